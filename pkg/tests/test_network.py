from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcdc import autodiff as ad
from lcdc.checks import mini_config, network_gradcheck
from lcdc.io import load_checkpoint, save_checkpoint
from lcdc.network import (
    NetConfig,
    NetParams,
    forward,
    forward_frames,
    forward_snippet,
    frame_offsets,
    fuse,
    fusion_schedule,
    init_params,
    offset_learner_counts,
    param_count,
    param_shapes,
    temporal_head_1d,
)


def schedule(frames, kt=4, t_stride=2, pool=2, pool_stride=2, stages=2):
    cfg = SimpleNamespace(
        frames=frames, fusion_kt=kt, fusion_t_stride=t_stride, pool_size=pool, pool_stride=pool_stride, fusion_channels=(1,) * stages
    )
    return [n for _, n in fusion_schedule(cfg)]


def temporal_oracle(n, stages=2):
    """conv with kernel 4 stride 2, then pool 2 stride 2, per stage."""
    out = [n]
    for _ in range(stages):
        n = (n - 4) // 2 + 1 if n >= 4 else 0
        out.append(n)
        n = n // 2
        out.append(n)
    return out


class TestFusionSchedule:
    def test_fifteen_steps_rejected(self):
        assert schedule(16) == [15, 6, 3, 0, 0]
        with pytest.raises(ValueError, match="no time step"):
            NetConfig(frames=16, fusion_kt=4, fusion_t_stride=2)

    def test_sixteen_steps_rejected_at_second_stage(self):
        assert schedule(17)[:3] == [16, 7, 3]
        assert schedule(17)[3] == 0
        with pytest.raises(ValueError):
            NetConfig(frames=17, fusion_kt=4, fusion_t_stride=2)

    def test_twenty_two_steps(self):
        # 22 -> 10 -> 5 -> 1, then a size-2 pool cannot fit
        assert schedule(23) == [22, 10, 5, 1, 0]

    @pytest.mark.parametrize("n", range(1, 80))
    def test_matches_oracle(self, n):
        assert schedule(n + 1) == temporal_oracle(n)

    def test_smallest_valid_full_scale_setting(self):
        n = next(n for n in range(1, 200) if temporal_oracle(n)[-1] >= 1)
        assert n == 26  # 26 -> 12 -> 6 -> 2 -> 1
        cfg = NetConfig(frames=n + 1, fusion_kt=4, fusion_t_stride=2)
        assert fusion_schedule(cfg)[-1][1] == 1

    def test_toy_default(self):
        assert [n for _, n in fusion_schedule(NetConfig())] == [15, 12, 6, 3, 1]


class TestConfig:
    def test_fusion_channel_arithmetic(self):
        cfg = NetConfig()
        assert cfg.fusion_in_channels == cfg.appearance_channels + 2 * cfg.num_blocks
        assert param_shapes(cfg)["fuse0.w"][-2] == 4 + 2 * 3

    def test_full_scale_analog(self):
        assert NetConfig(appearance_channels=256).fusion_in_channels == 262

    def test_dc_motion_channels(self):
        cfg = NetConfig(variant="dc", groups=4, bottleneck=8)
        assert cfg.motion_channels == 4 * 9 * 2
        assert cfg.offset_spec().out_channels == 72

    @pytest.mark.parametrize(
        "kw",
        [{"variant": "nope"}, {"num_blocks": 0}, {"kernel": 2}, {"fc_widths": (4,)}, {"head_pool": "max"}, {"variant": "dc", "groups": 3}],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            NetConfig(**kw)

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ValueError, match="unknown"):
            NetConfig.from_dict({"depth": 3})
        assert NetConfig.from_dict({"trunk_widths": [4, 4, 4]}).trunk_widths == (4, 4, 4)


class TestParamCount:
    def test_full_scale_geometry_ratio(self):
        counts = offset_learner_counts(3, 3, 512, groups=4, blocks=3)
        assert counts["ratio_dense_over_local"] == 36

    def test_unit_kernel(self):
        assert offset_learner_counts(1, 1, 16, groups=1)["ratio_dense_over_local"] == 1
        cfg = NetConfig(kernel=1)
        assert param_count(cfg, "dc", 1)["ratio_dense_over_local"] == 1

    def test_counting_oracle(self):
        counts = offset_learner_counts(3, 3, 8, groups=1, blocks=1)
        assert counts["lcdc_deform"] == 144 + 2
        assert counts["dc_deform"] == 1296 + 18
        cfg = NetConfig(num_blocks=1, bottleneck=8)
        pc = param_count(cfg, "dc", 1)
        assert (pc["lcdc_deform"], pc["dc_deform"]) == (146, 1314)
        assert pc["ratio_dense_over_local"] == 9

    @given(st.sampled_from([1, 3, 5]), st.sampled_from([1, 2, 4, 8]), st.integers(1, 3))
    @settings(max_examples=25, deadline=None)
    def test_ratio_is_groups_times_taps(self, k, groups, blocks):
        cfg = NetConfig(kernel=k, bottleneck=8, num_blocks=blocks, trunk_widths=(4, 4, 4))
        pc = param_count(cfg, "dc", groups)
        assert pc["ratio_dense_over_local"] == groups * k * k
        assert pc["deform_related"] == pc["dc_deform"]

    def test_total_counts_every_tensor(self):
        cfg = mini_config()
        params = init_params(cfg)
        assert param_count(cfg)["total"] == sum(v.size for v in params.weights.values())


class TestForward:
    cfg = mini_config()

    def test_determinism(self):
        params = init_params(self.cfg, 3)
        x = np.random.default_rng(0).uniform(size=(2, 8, 8, 8, 1))
        a = forward_snippet(x, params, self.cfg).logits.value
        b = forward_snippet(x.copy(), params, self.cfg).logits.value
        np.testing.assert_array_equal(a, b)

    def test_zero_frames_zero_motion(self):
        params = init_params(self.cfg, 1)
        r = forward_snippet(np.zeros((8, 8, 8, 1)), params, self.cfg)
        for off, m in zip(r.offsets, r.motions):
            assert not off.value.any()
            assert not m.value.any()

    def test_shapes(self):
        params = init_params(self.cfg)
        r = forward_snippet(np.zeros((3, 8, 8, 8, 1)), params, self.cfg)
        assert r.logits.shape == (3, 3)
        assert r.appearance.shape == (3, 8, 4, 4, 3)
        assert [m.shape for m in r.motions] == [(3, 7, 4, 4, 2)] * 2

    def test_extent_mismatch(self):
        with pytest.raises(ValueError, match="do not match"):
            forward_snippet(np.zeros((8, 9, 8, 1)), init_params(self.cfg), self.cfg)

    def test_offset_learners_start_at_zero(self):
        params = init_params(NetConfig(), 0)
        offsets = [k for k in params.weights if ".offset." in k]
        assert len(offsets) == 6
        assert all(not params.weights[k].any() for k in offsets)

    def test_physical_buffer_does_not_matter(self):
        params = init_params(self.cfg, 2)
        x = np.random.default_rng(1).uniform(size=(8, 8, 8, 1))
        # same ordered frames held in reversed memory, and as a strided view
        reversed_store = np.ascontiguousarray(x[::-1])[::-1]
        strided = np.repeat(x, 2, axis=0)[::2]
        ref = forward_snippet(x, params, self.cfg).logits.value
        np.testing.assert_array_equal(forward_snippet(reversed_store, params, self.cfg).logits.value, ref)
        np.testing.assert_array_equal(forward_snippet(strided, params, self.cfg).logits.value, ref)

    def test_order_invariance_without_motion(self):
        # one 1x1x1 fusion stage and no pooling: fusion is a temporal average
        cfg = mini_config(fusion_channels=(4,), fusion_kt=1, fusion_kernel=1, pool_size=1, pool_stride=1)
        params = init_params(cfg, 5)
        x = np.random.default_rng(2).uniform(size=(8, 8, 8, 1))
        perm = np.concatenate([[0], 1 + np.random.default_rng(3).permutation(7)])
        a = forward_snippet(x, params, cfg)
        b = forward_snippet(x[perm], params, cfg)
        assert all(not m.value.any() for m in a.motions + b.motions)
        np.testing.assert_allclose(b.logits.value, a.logits.value, rtol=1e-12, atol=1e-14)

    def test_fuse_constant_appearance(self):
        cfg = mini_config(fusion_kernel=1)
        params = init_params(cfg, 4)
        t, h, w = cfg.frames, 4, 4
        app = np.broadcast_to(np.array([0.2, 0.5, 1.0]), (1, t, h, w, 3)).copy()
        motions = [np.zeros((1, t - 1, h, w, 2)) for _ in range(cfg.num_blocks)]
        g = ad.Graph()
        leaves = {k: g.leaf(v, k) for k, v in params.weights.items()}
        out = fuse(g.leaf(app), [g.leaf(m) for m in motions], leaves, params, cfg, False).value
        # hand evaluation of the same stack on the constant vector
        v = np.concatenate([[0.2, 0.5, 1.0], np.zeros(4)])
        for i in range(len(cfg.fusion_channels)):
            wsum = params.weights[f"fuse{i}.w"].sum(axis=0)[0, 0]
            v = np.maximum(v @ wsum / np.sqrt(1 + 1e-5), 0.0)
        relu = lambda z: np.maximum(z, 0.0)  # noqa: E731
        h1 = relu(v @ params.weights["fc1.w"] + params.weights["fc1.b"])
        h2 = relu(h1 @ params.weights["fc2.w"] + params.weights["fc2.b"])
        np.testing.assert_allclose(out[0], h2, rtol=1e-12, atol=1e-14)

    def test_appearance_baseline(self):
        cfg = mini_config(variant="appearance")
        params = init_params(cfg)
        assert "fuse0.w" not in params.weights
        r = forward(np.zeros((5, 8, 8, 1)), params, cfg)
        assert r.logits.shape == (5, 3)
        with pytest.raises(ValueError):
            forward_snippet(np.zeros((8, 8, 8, 1)), params, cfg)
        assert forward_frames(np.zeros((8, 8, 1)), params, cfg).logits.shape == (1, 3)

    @pytest.mark.parametrize("variant,groups", [("lcdc_replicated", 1), ("dc", 2)])
    def test_other_variants_run(self, variant, groups):
        cfg = mini_config(variant=variant, groups=groups)
        r = forward_snippet(np.random.default_rng(0).uniform(size=(8, 8, 8, 1)), init_params(cfg), cfg)
        assert r.motions[0].shape[-1] == cfg.motion_channels

    def test_frame_offsets(self):
        params = init_params(self.cfg)
        offs = frame_offsets(np.zeros((5, 8, 8, 1)), params, self.cfg)
        assert [o.shape for o in offs] == [(5, 4, 4, 2)] * 2
        with pytest.raises(ValueError):
            frame_offsets(np.zeros((5, 8, 8)), params, self.cfg)

    def test_training_mode_updates_bn_state(self):
        params = init_params(self.cfg)
        before = params.copy()
        forward_snippet(np.random.default_rng(0).uniform(size=(2, 8, 8, 8, 1)), params, self.cfg, training=True)
        assert not np.array_equal(before.bn_state["stem0.bn"]["mean"], params.bn_state["stem0.bn"]["mean"])


@pytest.mark.parametrize("seed", [1, 11])
@pytest.mark.parametrize("variant,groups", [("lcdc", 1), ("dc", 2)])
def test_network_gradient(variant, groups, seed):
    report, lattice_gap, kink_margin = network_gradcheck(mini_config(variant=variant, groups=groups), seed=seed)
    assert lattice_gap >= 0.1
    assert kink_margin >= 1e-4
    assert max(report.values()) <= 1e-4


def test_kink_margin_recorded():
    g = ad.Graph()
    x = g.leaf(np.array([[-0.5, 2.0], [0.25, 3.0]]).reshape(1, 2, 2), "x")
    ad.max_pool_time(ad.relu(x), 2, 2)
    # relu sees |-0.5|, |0.25|...; the pool gap is min(0.25 - 0, 3 - 2)
    assert g.kink_margin == 0.25


def test_checkpoint_round_trip(tmp_path):
    cfg = mini_config()
    params = init_params(cfg, 9)
    manifest = save_checkpoint(tmp_path / "ck", params.tensors(), {"config": {"frames": 8}})
    tensors, loaded = load_checkpoint(tmp_path / "ck")
    assert loaded == manifest
    back = NetParams.from_tensors(tensors)
    for k, v in params.weights.items():
        np.testing.assert_array_equal(back.weights[k], v)
    assert set(back.bn_state) == set(params.bn_state)
    # a corrupted tensor file fails the content hash
    victim = tmp_path / "ck" / "cls.b.tsr"
    victim.write_bytes(victim.read_bytes()[:-1] + b"\x01")
    with pytest.raises(ValueError, match="hash"):
        load_checkpoint(tmp_path / "ck")


class TestTemporalHead:
    def test_unit_kernel_is_per_step_affine(self):
        rng = np.random.default_rng(0)
        f = rng.normal(size=(5, 3))
        w, b = rng.normal(size=(1, 3, 4)), rng.normal(size=4)
        cw, cb = rng.normal(size=(4, 2)), rng.normal(size=2)
        out = temporal_head_1d(f, w, b, cw, cb).value
        np.testing.assert_allclose(out, (f @ w[0] + b) @ cw + cb, rtol=1e-13)

    def test_identity_passthrough(self):
        f = np.random.default_rng(1).normal(size=(6, 3))
        w = np.zeros((3, 3, 3))
        w[1] = np.eye(3)
        out = temporal_head_1d(f, w, np.zeros(3), np.eye(3), np.zeros(3)).value
        np.testing.assert_array_equal(out, f)

    def test_averaging_constant_sequence(self):
        rng = np.random.default_rng(2)
        v = rng.normal(size=2)
        w = np.broadcast_to(np.eye(2) / 3, (3, 2, 2)).copy()
        cw, cb = rng.normal(size=(2, 2)), rng.normal(size=2)
        out = temporal_head_1d(np.stack([v, v, v]), w, np.zeros(2), cw, cb).value
        np.testing.assert_allclose(out[1], v @ cw + cb, rtol=1e-13)

    def test_too_short(self):
        with pytest.raises(ValueError, match="sequence too short"):
            temporal_head_1d(np.zeros((2, 3)), np.zeros((3, 3, 3)), np.zeros(3), np.eye(3), np.zeros(3))
