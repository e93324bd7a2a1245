import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcdc.deform import (
    deform_input,
    deformable_conv2d,
    dense_offset_learner,
    expand_local_to_dense,
    lcdc_conv2d,
    offset_learner,
    offset_storage,
)
from lcdc.motion import multilinear_image
from lcdc.tensor import KernelSpec, bilinear_sample, conv2d


def loop_deformable(x, w, offsets, spec):
    """Scalar loop over every output, channel and tap with per-plane sampling."""
    h, wd, c = x.shape
    ho, wo = spec.output_size(h, wd)
    cg = c // spec.groups
    sr, sc = spec.anchor_shift()
    y = np.zeros((ho, wo, spec.out_channels))
    for i, j in itertools.product(range(ho), range(wo)):
        for k, (ki, kj) in enumerate(itertools.product(range(spec.kh), range(spec.kw))):
            for ch in range(c):
                g = ch // cg
                r = i * spec.stride - spec.padding + sr + ki * spec.dilation - sr + offsets[i, j, g, k, 0]
                s = j * spec.stride - spec.padding + sc + kj * spec.dilation - sc + offsets[i, j, g, k, 1]
                y[i, j] += w[ki, kj, ch] * bilinear_sample(x[..., ch], (r, s))
    return y


def random_case(seed, groups=1, stride=1, dilation=1):
    rng = np.random.default_rng(seed)
    spec = KernelSpec(3, 3, 4, 3, stride=stride, dilation=dilation, padding=dilation, groups=groups)
    x = rng.normal(size=(7, 6, 4))
    w = rng.normal(size=spec.weight_shape)
    return rng, spec, x, w


class TestDeformableConv:
    def test_zero_offsets_equal_conv2d(self):
        _, spec, x, w = random_case(0, groups=2, stride=2)
        ho, wo = spec.output_size(7, 6)
        off = np.zeros((ho, wo, 2, 9, 2))
        np.testing.assert_array_equal(deformable_conv2d(x, w, off, spec), conv2d(x, w, spec))

    def test_integer_shift_left(self):
        x = np.random.default_rng(1).normal(size=(4, 5, 1))
        spec = KernelSpec(1, 1, 1, 1)
        off = np.zeros((4, 5, 1, 1, 2))
        off[..., 1] = 1.0
        y = deformable_conv2d(x, np.ones((1, 1, 1, 1)), off, spec)
        np.testing.assert_array_equal(y[:, :-1], x[:, 1:])
        np.testing.assert_array_equal(y[:, -1], 0.0)

    def test_half_offset_on_linear_function(self):
        rr, cc = np.meshgrid(np.arange(4.0), np.arange(4.0), indexing="ij")
        x = (rr + 2 * cc)[..., None]
        off = np.full((4, 4, 1, 1, 2), 0.5)
        y = deformable_conv2d(x, np.ones((1, 1, 1, 1)), off, KernelSpec(1, 1, 1, 1))
        assert y[1, 1, 0] == pytest.approx(4.5, abs=1e-14)

    @pytest.mark.parametrize("groups,stride,dilation", [(1, 1, 1), (2, 1, 1), (4, 2, 1), (2, 1, 2)])
    def test_matches_loop_oracle(self, groups, stride, dilation):
        rng, spec, x, w = random_case(10 + groups, groups, stride, dilation)
        ho, wo = spec.output_size(7, 6)
        off = rng.uniform(-1.5, 1.5, size=(ho, wo, groups, 9, 2))
        np.testing.assert_allclose(deformable_conv2d(x, w, off, spec), loop_deformable(x, w, off, spec), atol=1e-12)

    def test_group_mismatch(self):
        _, spec, x, w = random_case(2, groups=2)
        with pytest.raises(ValueError, match="group mismatch"):
            deformable_conv2d(x, w, np.zeros((7, 6, 1, 9, 2)), spec)

    def test_offset_shape_mismatch(self):
        _, spec, x, w = random_case(3)
        with pytest.raises(ValueError, match="offset shape mismatch"):
            deformable_conv2d(x, w, np.zeros((7, 6, 1, 4, 2)), spec)

    def test_constant_integer_offset_is_shifted_conv(self):
        rng, spec, x, w = random_case(4)
        off = np.zeros((7, 6, 1, 9, 2))
        off[..., 0] = 2.0
        off[..., 1] = -1.0
        # shift on the padded domain: padded[r, c] = x[r - 1 + 2, c - 1 - 1]
        padded = np.zeros((9, 8, 4))
        for r, c in itertools.product(range(9), range(8)):
            if 0 <= r + 1 < 7 and 0 <= c - 2 < 6:
                padded[r, c] = x[r + 1, c - 2]
        unpadded = KernelSpec(3, 3, 4, 3)
        np.testing.assert_allclose(deformable_conv2d(x, w, off, spec), conv2d(padded, w, unpadded), atol=1e-13)


class TestOffsetLearners:
    def test_zero_phi(self):
        x = np.random.default_rng(0).normal(size=(5, 5, 3))
        out = offset_learner(x, np.zeros((3, 3, 3, 2)), KernelSpec.same(3, 3, 2))
        assert out.shape == (5, 5, 2)
        assert not out.any()

    def test_identity_extraction(self):
        x = np.random.default_rng(1).normal(size=(4, 6, 2))
        phi = np.eye(2).reshape(1, 1, 2, 2)
        np.testing.assert_array_equal(offset_learner(x, phi, KernelSpec(1, 1, 2, 2)), x)

    def test_constant_propagation(self):
        rng = np.random.default_rng(2)
        phi = rng.normal(size=(3, 3, 1, 2))
        c = 0.75
        out = offset_learner(np.full((6, 6, 1), c), phi, KernelSpec.same(3, 1, 2))
        s = phi.sum(axis=(0, 1, 2))
        np.testing.assert_allclose(out[1:-1, 1:-1], np.broadcast_to(c * s, (4, 4, 2)), rtol=1e-13)

    def test_must_emit_two_channels(self):
        with pytest.raises(ValueError, match="offset learner must emit 2 channels"):
            offset_learner(np.zeros((4, 4, 1)), np.zeros((3, 3, 1, 3)), KernelSpec.same(3, 1, 3))

    def test_must_preserve_extents(self):
        with pytest.raises(ValueError, match="preserve extents"):
            offset_learner(np.zeros((4, 4, 1)), np.zeros((3, 3, 1, 2)), KernelSpec(3, 3, 1, 2))

    def test_dense_zero(self):
        deform = KernelSpec.same(3, 4, 4, groups=2)
        out = dense_offset_learner(np.ones((5, 5, 4)), np.zeros((3, 3, 4, 36)), KernelSpec.same(3, 4, 36), deform)
        assert out.shape == (5, 5, 2, 9, 2)
        assert not out.any()

    def test_dense_single_tap_matches_local(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 5, 2))
        h = rng.normal(size=(3, 3, 2, 2))
        spec = KernelSpec.same(3, 2, 2)
        dense = dense_offset_learner(x, h, spec, KernelSpec(1, 1, 2, 2))
        np.testing.assert_array_equal(dense[:, :, 0, 0], offset_learner(x, h, spec))

    def test_dense_constant_propagation(self):
        rng = np.random.default_rng(4)
        deform = KernelSpec.same(3, 2, 2)
        h = rng.normal(size=(3, 3, 1, 18))
        out = dense_offset_learner(np.full((5, 5, 1), 2.0), h, KernelSpec.same(3, 1, 18), deform)
        expect = (2.0 * h.sum(axis=(0, 1, 2))).reshape(1, 9, 2)
        np.testing.assert_allclose(out[1:-1, 1:-1], np.broadcast_to(expect, (3, 3, 1, 9, 2)), rtol=1e-13)

    def test_dense_wrong_channels(self):
        with pytest.raises(ValueError, match="G\\*K\\*2"):
            dense_offset_learner(np.zeros((4, 4, 1)), np.zeros((3, 3, 1, 4)), KernelSpec.same(3, 1, 4), KernelSpec.same(3, 1, 1))


class TestExpand:
    @pytest.mark.parametrize("mode", ["shifted", "replicated"])
    def test_constant_field(self, mode):
        local = np.broadcast_to(np.array([0.3, -1.2]), (5, 5, 2))
        spec = KernelSpec(3, 3, 2, 2, padding=1, groups=2)
        dense = expand_local_to_dense(local, spec, mode)
        assert dense.shape == (5, 5, 2, 9, 2)
        if mode == "shifted":
            dense = dense[1:-1, 1:-1]
        np.testing.assert_array_equal(dense, np.broadcast_to([0.3, -1.2], dense.shape))

    def test_ramp_shifted(self):
        local = np.zeros((6, 6, 2))
        local[..., 0] = np.arange(6.0)[:, None]
        spec = KernelSpec.same(3, 1, 1)
        dense = expand_local_to_dense(local, spec)
        taps = spec.tap_offsets()
        for i, j in itertools.product(range(1, 5), range(1, 5)):
            np.testing.assert_array_equal(dense[i, j, 0, :, 0], i + taps[:, 0])
            np.testing.assert_array_equal(dense[i, j, 0, :, 1], 0.0)

    def test_outside_field_is_zero(self):
        local = np.ones((4, 4, 2))
        dense = expand_local_to_dense(local, KernelSpec.same(3, 1, 1))
        assert not dense[0, 0, 0, 0].any()  # tap (-1, -1) of the corner
        np.testing.assert_array_equal(dense[0, 0, 0, 8], [1.0, 1.0])

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="unknown expansion mode"):
            expand_local_to_dense(np.zeros((3, 3, 2)), KernelSpec.same(3, 1, 1), "tiled")


class TestDeformInput:
    def test_zero_is_identity(self):
        x = np.random.default_rng(0).normal(size=(5, 4, 3))
        np.testing.assert_array_equal(deform_input(x, np.zeros((5, 4, 2))), x)

    def test_integer_shift_up(self):
        x = np.random.default_rng(1).normal(size=(5, 4, 2))
        local = np.zeros((5, 4, 2))
        local[..., 0] = 1.0
        out = deform_input(x, local)
        np.testing.assert_array_equal(out[:-1], x[1:])
        np.testing.assert_array_equal(out[-1], 0.0)

    def test_row_midpoints_on_multilinear(self):
        x = multilinear_image(6, 5, channels=2)
        local = np.zeros((6, 5, 2))
        local[..., 0] = 0.5
        out = deform_input(x, local)
        np.testing.assert_allclose(out[:-1], 0.5 * (x[:-1] + x[1:]), atol=1e-14)

    def test_extent_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            deform_input(np.zeros((4, 4, 1)), np.zeros((4, 3, 2)))


class TestLcdc:
    def test_zero_offsets_equal_conv2d(self):
        _, spec, x, w = random_case(5)
        for path in ("factorized", "direct"):
            np.testing.assert_array_equal(lcdc_conv2d(x, w, np.zeros((7, 6, 2)), spec, path=path), conv2d(x, w, spec))

    @given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 4]), st.sampled_from([1, 2]), st.sampled_from([1, 2]))
    @settings(max_examples=30, deadline=None)
    def test_paths_agree_bit_for_bit(self, seed, groups, stride, dilation):
        rng, spec, x, w = random_case(seed, groups, stride, dilation)
        local = rng.uniform(-2, 2, size=(7, 6, 2))
        direct = lcdc_conv2d(x, w, local, spec, path="direct")
        fact = lcdc_conv2d(x, w, local, spec, path="factorized")
        dense = deformable_conv2d(x, w, expand_local_to_dense(local, spec), spec)
        via_input = conv2d(deform_input(x, local), w, spec)
        np.testing.assert_array_equal(direct, fact)
        np.testing.assert_array_equal(direct, dense)
        np.testing.assert_array_equal(fact, via_input)

    def test_matches_loop_with_tied_offsets(self):
        rng, spec, x, w = random_case(6)
        local = rng.uniform(-1, 1, size=(7, 6, 2))
        dense = np.zeros((7, 6, 1, 9, 2))
        taps = spec.tap_offsets()
        for i, j, k in itertools.product(range(7), range(6), range(9)):
            r, c = i + taps[k, 0], j + taps[k, 1]
            if 0 <= r < 7 and 0 <= c < 6:
                dense[i, j, 0, k] = local[r, c]
        np.testing.assert_allclose(lcdc_conv2d(x, w, local, spec), loop_deformable(x, w, dense, spec), atol=1e-12)

    def test_unknown_path(self):
        _, spec, x, w = random_case(7)
        with pytest.raises(ValueError, match="unknown LCDC path"):
            lcdc_conv2d(x, w, np.zeros((7, 6, 2)), spec, path="fast")


@pytest.mark.parametrize("kh,kw,groups", [(3, 3, 4), (3, 3, 1), (1, 1, 1), (5, 3, 2)])
def test_storage_ratio(kh, kw, groups):
    dense, local = offset_storage(KernelSpec(kh, kw, 4, 4, groups=groups), 7, 5)
    assert dense == groups * kh * kw * local
    assert local == 7 * 5 * 2
