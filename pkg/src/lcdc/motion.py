"""Motion in feature space: offset differences, energy maps, and the flow-equivalence check.

A motion field is an ``(H, W, 2)`` array of ``(row, col)`` displacements
between consecutive time steps.  For deformable layers it is the change of
the adaptive receptive field, which reduces to the change of offsets
because the lattice terms cancel.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .deform import lcdc_conv2d
from .io import write_pgm16, write_ppm, write_tsr
from .tensor import KernelSpec, sample_bilinear


def receptive_field_diff(dense_t, dense_prev) -> np.ndarray:
    """Change of a dense (per-tap) offset field between two time steps."""
    a = np.asarray(dense_t, dtype=np.float64)
    b = np.asarray(dense_prev, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"offset fields differ in shape: {a.shape} vs {b.shape}")
    return a - b


def local_motion(local_t, local_prev) -> np.ndarray:
    a = np.asarray(local_t, dtype=np.float64)
    b = np.asarray(local_prev, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"offset fields differ in shape: {a.shape} vs {b.shape}")
    if a.shape[-1] != 2:
        raise ValueError(f"local offsets must end in 2, got {a.shape}")
    return a - b


def motion_sequence(locals_over_time) -> list[np.ndarray]:
    """``[local[t] - local[t-1] for t = 1..T-1]``."""
    seq = list(locals_over_time)
    return [local_motion(seq[t], seq[t - 1]) for t in range(1, len(seq))]


def _upsample_nearest(field: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = (np.arange(h) * field.shape[0]) // h
    cols = (np.arange(w) * field.shape[1]) // w
    return field[rows][:, cols]


def energy_map(motions) -> np.ndarray:
    """Per-location sum over layers of the motion vector length.

    Fields of different extents are nearest-neighbor upsampled to the
    largest grid before summing.
    """
    motions = [np.asarray(m, dtype=np.float64) for m in motions]
    if not motions:
        raise ValueError("energy_map needs at least one motion field")
    h = max(m.shape[0] for m in motions)
    w = max(m.shape[1] for m in motions)
    energy = np.zeros((h, w))
    for m in motions:
        norms = np.sqrt(m[..., 0] ** 2 + m[..., 1] ** 2)
        energy += _upsample_nearest(norms, h, w)
    return energy


def motion_to_rgb(motion, suppress: float = 0.0) -> tuple[np.ndarray, float]:
    """Color-code a motion field: hue is direction, value is magnitude.

    Vectors shorter than ``suppress`` are drawn black.  Returns the image
    and the magnitude used for normalization.
    """
    m = np.asarray(motion, dtype=np.float64)
    mag = np.hypot(m[..., 0], m[..., 1])
    mag = np.where(mag < suppress, 0.0, mag)
    peak = float(mag.max()) if mag.size else 0.0
    hue = (np.arctan2(-m[..., 0], m[..., 1]) / (2 * np.pi)) % 1.0
    val = mag / peak if peak > 0 else np.zeros_like(mag)
    rgb = np.zeros(m.shape[:2] + (3,))
    for idx in np.ndindex(*m.shape[:2]):
        rgb[idx] = colorsys.hsv_to_rgb(hue[idx], 1.0, val[idx])
    return rgb, peak


def export_motion(out_dir, locals_by_layer, suppress: float = 0.0) -> dict:
    """Write offsets, motion fields and energy maps for ``T`` frames.

    ``locals_by_layer`` is a list (one entry per layer) of ``T`` local
    offset fields.  Returns the normalization constants it wrote to
    ``normalization.txt``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    consts = {}
    n_steps = len(locals_by_layer[0])
    for li, seq in enumerate(locals_by_layer):
        write_tsr(out / f"offsets_l{li}.tsr", np.stack(seq))
        motions = motion_sequence(seq)
        if motions:
            write_tsr(out / f"motion_l{li}.tsr", np.stack(motions))
        for t, m in enumerate(motions, start=1):
            rgb, peak = motion_to_rgb(m, suppress)
            write_ppm(out / f"motion_l{li}_t{t:03d}.ppm", rgb)
            consts[f"motion_l{li}_t{t:03d}.ppm"] = peak
    energies = []
    for t in range(1, n_steps):
        layer_motions = [local_motion(seq[t], seq[t - 1]) for seq in locals_by_layer]
        if suppress > 0:
            layer_motions = [
                np.where(np.hypot(m[..., 0], m[..., 1])[..., None] < suppress, 0.0, m) for m in layer_motions
            ]
        e = energy_map(layer_motions)
        energies.append(e)
        consts[f"energy_t{t:03d}.pgm"] = write_pgm16(out / f"energy_t{t:03d}.pgm", e)
    if energies:
        write_tsr(out / "energy.tsr", np.stack(energies))
    with open(out / "normalization.txt", "w") as fh:
        for name in sorted(consts):
            fh.write(f"{name}={consts[name]!r}\n")
    return consts


# ---------------------------------------------------------------------------
# flow equivalence


def multilinear_image(h: int, w: int, a=0.5, b=0.3, c=-0.2, d=0.05, channels: int = 1) -> np.ndarray:
    """Sample ``a + b*row + c*col + d*row*col`` on an ``h x w`` grid.

    Bilinear interpolation reproduces this function exactly at any interior
    point.  Extra channels get different coefficients.
    """
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    planes = []
    for ch in range(channels):
        s = 1.0 + 0.5 * ch
        planes.append(a * s + b * rr + c * s * cc + d * (-1) ** ch * rr * cc)
    return np.stack(planes, axis=-1)


@dataclass
class FlowReport:
    max_output_gap: float
    max_motion_gap: float
    compared: int
    passed: bool

    def lines(self) -> list[str]:
        return [
            f"max_output_gap={self.max_output_gap:.6e}",
            f"max_motion_gap={self.max_motion_gap:.6e}",
            f"compared={self.compared}",
            "PASS" if self.passed else "FAIL",
        ]


def _as_field(o, h: int, w: int) -> np.ndarray:
    o = np.asarray(o, dtype=np.float64)
    if o.shape == (2,):
        return np.broadcast_to(o, (h, w, 2)).copy()
    if o.shape != (h, w, 2):
        raise ValueError(f"motion field must be (2,) or ({h}, {w}, 2), got {o.shape}")
    return o


def _sample_field(field: np.ndarray, pos: np.ndarray) -> np.ndarray:
    return sample_bilinear(field[None], pos[None])[0]


def solve_encoded_offsets(local_prev, o, iters: int = 50) -> np.ndarray:
    """Offsets at time t that satisfy ``local_t[n] = local_prev[n] + o(n + local_t[n])``.

    Constant ``o`` is solved in closed form; otherwise by fixed-point
    iteration with ``o`` sampled bilinearly.
    """
    prev = np.asarray(local_prev, dtype=np.float64)
    h, w, _ = prev.shape
    o_arr = np.asarray(o, dtype=np.float64)
    if o_arr.shape == (2,):
        return prev + o_arr
    field = _as_field(o_arr, h, w)
    grid = np.stack(np.meshgrid(np.arange(h), np.arange(w), indexing="ij"), axis=-1).astype(np.float64)
    cur = prev + field
    for _ in range(iters):
        nxt = prev + _sample_field(field, grid + cur)
        if np.max(np.abs(nxt - cur)) < 1e-15:
            return nxt
        cur = nxt
    return cur


def _exact_mask(pos: np.ndarray, shift: np.ndarray, h: int, w: int) -> np.ndarray:
    """True where all four lattice neighbors of ``pos``, moved by ``-shift``, stay in the map."""
    r0 = np.floor(pos[..., 0])
    c0 = np.floor(pos[..., 1])
    ok = np.ones(pos.shape[:-1], dtype=bool)
    for dr in (0, 1):
        for dc in (0, 1):
            rr = r0 + dr - shift[..., 0]
            cc = c0 + dc - shift[..., 1]
            ok &= (rr >= 0) & (rr <= h - 1) & (cc >= 0) & (cc <= w - 1)
    return ok


def check_flow_equivalence(x_prev, o, local_prev, w, spec: KernelSpec, tol: float = 1e-9, local_t=None) -> FlowReport:
    """Check that consistent LCDC outputs go with offsets that encode the motion.

    ``x_t`` is built as ``x_prev(s - o(s))``.  ``local_t`` defaults to the
    solution of the encoded-motion relation; pass it explicitly to test a
    violated constraint.  Only output locations whose whole sampling
    footprint (in both frames) stays inside the map are compared.
    """
    x_prev = np.asarray(x_prev, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if not np.any(w):
        raise ValueError("flow-equivalence hypothesis violated: kernel is identically zero")
    h, wd, _ = x_prev.shape
    prev = np.asarray(local_prev, dtype=np.float64)
    field = _as_field(o, h, wd)
    grid = np.stack(np.meshgrid(np.arange(h), np.arange(wd), indexing="ij"), axis=-1).astype(np.float64)

    # frame t from the motion relation; exact where the source stays inside
    x_t = sample_bilinear(x_prev[None], (grid - field)[None])[0]
    if local_t is None:
        local_t = solve_encoded_offsets(prev, o)
    local_t = np.asarray(local_t, dtype=np.float64)

    y_prev = lcdc_conv2d(x_prev, w, prev, spec)
    y_t = lcdc_conv2d(x_t, w, local_t, spec)

    # locations whose sample points are exact in both frames
    p_t = grid + local_t
    p_prev = grid + prev
    t_shift = _sample_field(field, p_t)
    ok_src = _exact_mask(p_t, np.zeros_like(p_t), h, wd) & _exact_mask(p_prev, np.zeros_like(p_prev), h, wd)
    ok_t = np.ones((h, wd), dtype=bool)
    r0 = np.floor(p_t[..., 0])
    c0 = np.floor(p_t[..., 1])
    for dr in (0, 1):
        for dc in (0, 1):
            rr = np.clip(r0 + dr, 0, h - 1).astype(int)
            cc = np.clip(c0 + dc, 0, wd - 1).astype(int)
            corner_shift = field[rr, cc]
            src = np.stack([r0 + dr, c0 + dc], axis=-1) - corner_shift
            ok_t &= (src[..., 0] >= 0) & (src[..., 0] <= h - 1) & (src[..., 1] >= 0) & (src[..., 1] <= wd - 1)
    good = ok_src & ok_t

    ho, wo = spec.output_size(h, wd)
    src = spec.anchors(ho, wo)[:, :, None, :] + spec.tap_offsets()[None, None, :, :]
    inside = (src[..., 0] >= 0) & (src[..., 0] < h) & (src[..., 1] >= 0) & (src[..., 1] < wd)
    rs = np.clip(src[..., 0], 0, h - 1)
    cs = np.clip(src[..., 1], 0, wd - 1)
    out_mask = np.all(inside & good[rs, cs], axis=-1)

    motion = local_motion(local_t, prev)
    motion_gap = np.abs(motion - t_shift).max(axis=-1)
    n = int(out_mask.sum())
    out_gap = float(np.abs(y_t - y_prev)[out_mask].max()) if n else 0.0
    mot_gap = float(motion_gap[good].max()) if good.any() else 0.0
    return FlowReport(out_gap, mot_gap, n, bool(n > 0 and out_gap <= tol and mot_gap <= tol))

