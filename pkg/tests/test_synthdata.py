from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcdc.io import read_labels_csv
from lcdc.synthdata import (
    SequenceConfig,
    SnippetConfig,
    SplitMix64,
    generate_sequence,
    generate_snippet,
    hash_seed,
    make_dataset,
    segments_from_labels,
)

DATA = Path(__file__).parent / "data"
M64 = (1 << 64) - 1


def splitmix_reference(seed, n):
    """Plain-integer SplitMix64."""
    out = []
    state = seed
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & M64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
        out.append(z ^ (z >> 31))
    return out


def circular_centroid(img, axis):
    n = img.shape[axis]
    ang = 2 * np.pi * np.arange(n) / n
    prof = img.sum(axis=1 - axis)
    return np.angle(np.sum(prof * np.exp(1j * ang))) * n / (2 * np.pi)


class TestPrng:
    def test_reference_value(self):
        assert int(SplitMix64(0).next_u64(1)[0]) == 0xE220A8397B1DCDAF

    @given(st.integers(0, M64))
    @settings(max_examples=40, deadline=None)
    def test_matches_integer_reference(self, seed):
        assert [int(v) for v in SplitMix64(seed).next_u64(5)] == splitmix_reference(seed, 5)

    def test_stream_continues(self):
        a = SplitMix64(42)
        first = [int(v) for v in a.next_u64(3)] + [int(v) for v in a.next_u64(2)]
        assert first == splitmix_reference(42, 5)

    def test_uniform_range_and_permutation(self):
        rng = SplitMix64(1)
        u = rng.uniform((1000,))
        assert u.min() >= 0.0 and u.max() < 1.0
        assert sorted(SplitMix64(2).permutation(20).tolist()) == list(range(20))
        ints = SplitMix64(3).integers(2, 5, (500,))
        assert set(ints.tolist()) == {2, 3, 4}

    def test_hash_seed_distinguishes_parts(self):
        assert hash_seed(1, 2) != hash_seed(2, 1)
        assert hash_seed(7, 0, 1, 2) == hash_seed(7, 0, 1, 2)


class TestSnippet:
    def test_determinism(self):
        a = generate_snippet("left", 123)
        b = generate_snippet("left", 123)
        np.testing.assert_array_equal(a.frames, b.frames)
        assert a.frames.shape == (16, 32, 32, 1)
        assert a.label == 2

    def test_range(self):
        f = generate_snippet("down", 5).frames
        assert f.min() >= 0.0 and f.max() <= 1.0

    def test_first_frame_shared_across_classes(self):
        up = generate_snippet("up", 77).frames
        down = generate_snippet("down", 77).frames
        np.testing.assert_array_equal(up[0], down[0])
        assert not np.array_equal(up[1], down[1])

    @pytest.mark.parametrize("speed", [1.0, 0.5, 1.5, 2.0])
    def test_centroid_moves_at_speed(self, speed):
        cfg = SnippetConfig(speed=speed, background=0.0)
        f = generate_snippet("right", 9, cfg).frames[..., 0]
        cols = [circular_centroid(fr, axis=1) for fr in f]
        steps = (np.diff(cols) + 16) % 32 - 16
        np.testing.assert_allclose(steps, speed, atol=0.1)
        rows = [circular_centroid(fr, axis=0) for fr in f]
        np.testing.assert_allclose((np.diff(rows) + 16) % 32 - 16, 0.0, atol=0.1)

    @pytest.mark.parametrize("cls,axis,sign", [("up", 0, -1), ("down", 0, 1), ("left", 1, -1)])
    def test_direction(self, cls, axis, sign):
        f = generate_snippet(cls, 4, SnippetConfig(background=0.0)).frames[..., 0]
        c = [circular_centroid(fr, axis) for fr in f]
        np.testing.assert_allclose((np.diff(c) + 16) % 32 - 16, sign * 1.0, atol=0.1)

    @given(st.integers(0, 2**40), st.sampled_from(["up", "down", "left", "right"]))
    @settings(max_examples=10, deadline=None)
    def test_disk_moves_rigidly(self, seed, cls):
        # with a black background the frame is the first one rolled on the torus
        f = generate_snippet(cls, seed, SnippetConfig(background=0.0)).frames
        step = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}[cls]
        for t in (1, 6, 15):
            np.testing.assert_array_equal(f[t], np.roll(f[0], (step[0] * t, step[1] * t), axis=(0, 1)))

    def test_frame_means_class_independent(self):
        # the start position is uniform on the torus, so per-frame statistics
        # agree across classes in distribution
        cfg = SnippetConfig(frames=12)
        means = {}
        for cls in cfg.classes:
            means[cls] = np.array([generate_snippet(cls, hash_seed(99, i), cfg).frames[-1].mean() for i in range(40)])
        pooled = np.std(np.concatenate(list(means.values()))) / np.sqrt(40)
        centers = [m.mean() for m in means.values()]
        assert max(centers) - min(centers) < 4 * pooled

    def test_rotation_classes(self):
        cfg = SnippetConfig(classes=("cw", "ccw"))
        a = generate_snippet("cw", 3, cfg).frames
        b = generate_snippet("ccw", 3, cfg).frames
        np.testing.assert_array_equal(a[0], b[0])
        assert not np.array_equal(a[3], b[3])

    def test_invalid_class(self):
        with pytest.raises(ValueError, match="invalid class"):
            generate_snippet("sideways", 0)
        with pytest.raises(ValueError, match="invalid class"):
            SnippetConfig(classes=("up", "spin"))

    def test_speed_below_texture_scale(self):
        with pytest.raises(ValueError, match="texture scale"):
            SnippetConfig(speed=4.0, texture_scale=4.0)


class TestDataset:
    def test_layout_and_determinism(self):
        cfg = SnippetConfig(frames=4, height=12, width=12, radius=3)
        x, y = make_dataset(3, 7, cfg)
        assert x.shape == (12, 4, 12, 12, 1)
        assert y.tolist() == [0] * 3 + [1] * 3 + [2] * 3 + [3] * 3
        x2, _ = make_dataset(3, 7, cfg)
        np.testing.assert_array_equal(x, x2)

    def test_splits_differ(self):
        cfg = SnippetConfig(frames=3, height=10, width=10, radius=3)
        a, _ = make_dataset(2, 7, cfg, split=0)
        b, _ = make_dataset(2, 7, cfg, split=1)
        assert not np.array_equal(a, b)


class TestSequence:
    def test_segments_round_trip(self):
        s = generate_sequence(3)
        assert segments_from_labels(s.frame_labels) == s.segments
        assert len(s.frame_labels) == sum(e - b for _, b, e in s.segments) == len(s.frames)

    def test_partition_and_distinct_neighbors(self):
        s = generate_sequence(4, SequenceConfig(num_segments=10))
        assert s.segments[0][1] == 0
        for (c0, _, e0), (c1, b1, _) in zip(s.segments, s.segments[1:]):
            assert e0 == b1 and c0 != c1

    def test_golden_labels(self):
        assert generate_sequence(11).frame_labels == read_labels_csv(DATA / "sequence_seed11_labels.csv")

    def test_segments_from_labels(self):
        assert segments_from_labels([1, 1, 0, 0, 0, 1]) == [(1, 0, 2), (0, 2, 5), (1, 5, 6)]
        assert segments_from_labels([]) == []
