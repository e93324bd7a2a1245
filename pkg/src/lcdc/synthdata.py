"""Synthetic fine-grained motion: classes share appearance and differ only in motion.

A textured disk moves over a static textured background on a torus.  The
textures and the start position depend only on the sample seed, so frame 0
is the same for every class and, because the torus has no edges, any
single frame has the same distribution whatever the class.  Only the
displacement between frames tells the classes apart.

Randomness comes from SplitMix64, a 64-bit counter generator with a
xorshift-multiply output function, so samples are bit-identical across
platforms:

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    out = z ^ (z >> 31)
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15

TRANSLATIONS = {
    "up": (-1.0, 0.0),
    "down": (1.0, 0.0),
    "left": (0.0, -1.0),
    "right": (0.0, 1.0),
}
ROTATIONS = {"cw": 1.0, "ccw": -1.0}
ALL_CLASSES = tuple(TRANSLATIONS) + tuple(ROTATIONS)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def hash_seed(*parts: int) -> int:
    """Fold integers into one 64-bit seed."""
    h = 0x6A09E667F3BCC909
    for p in parts:
        z = np.array([(h + GAMMA + (int(p) & MASK64)) & MASK64], dtype=np.uint64)
        h = int(_mix(z)[0])
    return h


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GAMMA)
        z = np.uint64(self.state) + steps
        self.state = (self.state + n * GAMMA) & MASK64
        return _mix(z)

    def uniform(self, shape=()) -> np.ndarray:
        """Floats in [0, 1) with 53 random bits."""
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return u.reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u1 = 1.0 - self.uniform((n,))
        u2 = self.uniform((n,))
        return (np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)).reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in ``[low, high)``."""
        return (low + np.floor(self.uniform(shape) * (high - low))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable")


@dataclass(frozen=True)
class SnippetConfig:
    frames: int = 16
    height: int = 32
    width: int = 32
    texture_scale: float = 4.0
    speed: float = 1.0
    radius: float = 7.0
    background: float = 1.0
    classes: tuple = ("up", "down", "left", "right")

    def __post_init__(self):
        if not self.speed < self.texture_scale:
            raise ValueError(f"speed {self.speed} must be below texture scale {self.texture_scale}")
        for c in self.classes:
            if c not in ALL_CLASSES:
                raise ValueError(f"invalid class {c!r}; known classes are {ALL_CLASSES}")


@dataclass
class SnippetSample:
    frames: np.ndarray  # (T, H, W, 1)
    label: int
    seed: int


@dataclass
class SequenceSample:
    frames: np.ndarray
    frame_labels: list
    segments: list = field(default_factory=list)


def _smooth_noise(rng: SplitMix64, h: int, w: int, scale: float) -> np.ndarray:
    """Zero-mean, unit-variance periodic noise with correlation length ``scale``."""
    z = rng.uniform((h, w)) * 2.0 - 1.0
    k = max(1, int(round(scale)))
    for _ in range(2):
        for axis in (0, 1):
            acc = np.zeros_like(z)
            for s in range(-(k // 2), k - k // 2):
                acc += np.roll(z, s, axis=axis)
            z = acc / k
    z = z - z.mean()
    sd = z.std()
    return z / sd if sd > 0 else z


def _periodic_sample(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    h, w = img.shape
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    fr = rows - r0
    fc = cols - c0
    r0 = r0.astype(np.int64) % h
    c0 = c0.astype(np.int64) % w
    r1 = (r0 + 1) % h
    c1 = (c0 + 1) % w
    return (
        (1 - fr) * (1 - fc) * img[r0, c0]
        + (1 - fr) * fc * img[r0, c1]
        + fr * (1 - fc) * img[r1, c0]
        + fr * fc * img[r1, c1]
    )


def _shift(img: np.ndarray, dr: float, dc: float) -> np.ndarray:
    """Periodic translation by ``(dr, dc)``; exact for integer shifts."""
    if float(dr).is_integer() and float(dc).is_integer():
        return np.roll(img, (int(dr), int(dc)), axis=(0, 1))
    h, w = img.shape
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return _periodic_sample(img, rr - dr, cc - dc)


def _render(cls: str, seed: int, cfg: SnippetConfig, frames: int) -> np.ndarray:
    h, w = cfg.height, cfg.width
    rng = SplitMix64(hash_seed(seed, 0xA11CE))
    bg = np.clip(cfg.background * (0.45 + 0.15 * _smooth_noise(rng, h, w, cfg.texture_scale)), 0.0, 1.0)
    tex = np.clip(0.7 + 0.2 * _smooth_noise(rng, h, w, cfg.texture_scale / 2), 0.0, 1.0)
    start = rng.integers(0, h * w)
    cr, cc = int(start) // w, int(start) % w

    rr, gc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dr = (rr - cr + h / 2) % h - h / 2
    dc = (gc - cc + w / 2) % w - w / 2
    mask = (dr**2 + dc**2 <= cfg.radius**2).astype(np.float64)

    out = np.empty((frames, h, w, 1))
    for t in range(frames):
        if cls in TRANSLATIONS:
            vr, vc = TRANSLATIONS[cls]
            m = _shift(mask, vr * cfg.speed * t, vc * cfg.speed * t)
            b = _shift(tex, vr * cfg.speed * t, vc * cfg.speed * t)
        else:
            theta = ROTATIONS[cls] * cfg.speed * t / cfg.radius
            ct, st = np.cos(theta), np.sin(theta)
            # texture rotates about the disk center; the disk itself stays put
            src_r = cr + ct * dr - st * dc
            src_c = cc + st * dr + ct * dc
            b = tex if t == 0 else _periodic_sample(tex, src_r, src_c)
            m = mask
        out[t, :, :, 0] = bg * (1.0 - m) + b * m
    return out


def generate_snippet(cls: str, seed: int, cfg: SnippetConfig = SnippetConfig()) -> SnippetSample:
    """One snippet of class ``cls``; appearance depends on ``seed`` only."""
    if cls not in cfg.classes:
        raise ValueError(f"invalid class {cls!r}; expected one of {cfg.classes}")
    return SnippetSample(_render(cls, seed, cfg, cfg.frames), cfg.classes.index(cls), int(seed))


def make_dataset(n_per_class: int, seed: int, cfg: SnippetConfig = SnippetConfig(), split: int = 0):
    """Frames ``(N, T, H, W, 1)`` and labels, sample ``i`` of class ``c`` seeded by hash(seed, c, i)."""
    frames, labels = [], []
    for ci, cls in enumerate(cfg.classes):
        for i in range(n_per_class):
            s = generate_snippet(cls, hash_seed(seed, split, ci, i), cfg)
            frames.append(s.frames)
            labels.append(s.label)
    return np.stack(frames), np.asarray(labels, dtype=np.int64)


def segments_from_labels(labels) -> list[tuple[int, int, int]]:
    """Maximal runs as ``(label, start, end)`` with ``end`` exclusive."""
    segs = []
    start = 0
    prev = _NONE = object()
    for i, lab in enumerate(labels):
        if lab != prev:
            if prev is not _NONE:
                segs.append((int(prev), start, i))
            start, prev = i, lab
    if prev is not _NONE:
        segs.append((int(prev), start, i + 1))
    return segs


@dataclass(frozen=True)
class SequenceConfig:
    num_segments: int = 6
    min_length: int = 8
    max_length: int = 24
    snippet: SnippetConfig = SnippetConfig()


def generate_sequence(seed: int, cfg: SequenceConfig = SequenceConfig()) -> SequenceSample:
    """A long video of consecutive segments with distinct neighboring classes."""
    rng = SplitMix64(hash_seed(seed, 0x5E9))
    classes = cfg.snippet.classes
    parts, labels, segments = [], [], []
    prev = -1
    for k in range(cfg.num_segments):
        choices = [c for c in range(len(classes)) if c != prev]
        ci = choices[int(rng.integers(0, len(choices)))]
        length = int(rng.integers(cfg.min_length, cfg.max_length + 1))
        frames = _render(classes[ci], hash_seed(seed, k), cfg.snippet, length)
        segments.append((ci, len(labels), len(labels) + length))
        parts.append(frames)
        labels.extend([ci] * length)
        prev = ci
    return SequenceSample(np.concatenate(parts), labels, segments)


def with_frames(cfg: SnippetConfig, frames: int) -> SnippetConfig:
    return replace(cfg, frames=frames)
