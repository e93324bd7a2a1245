"""Dense tensor substrate: kernel geometry, bilinear sampling, 2D/3D convolution.

Tensors are plain ``numpy.ndarray`` objects in float64, channels-last.
A 2D feature map is ``(H, W, C)``; a batch of them is ``(N, H, W, C)``.
Every operation here accepts either form and returns the same form.

Kernels are stored in tap order as ``(kh, kw, I, O)`` and applied as a
cross-correlation: tap ``(ki, kj)`` of output location ``n`` reads the
input at ``n * stride - padding + (ki, kj) * dilation``.  Writing the
kernel as ``w[-k]`` and flipping the storage order gives the textbook
convolution; we keep the flip absorbed in storage.

Coordinates are always ``(row, col)``.  Samples outside the map read 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "KernelSpec",
    "as_tensor",
    "bilinear_sample",
    "sample_bilinear",
    "sample_bilinear_backward",
    "conv2d",
    "conv2d_backward",
    "conv3d",
    "conv3d_backward",
]


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a finite float64 array, raising on NaN/Inf."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class KernelSpec:
    """Geometry of a 2D kernel.

    ``groups`` is the number of deformable groups; it partitions the input
    channels into contiguous blocks that share one offset field.  Plain
    convolution ignores it.
    """

    kh: int
    kw: int
    in_channels: int
    out_channels: int
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        for field in ("kh", "kw", "in_channels", "out_channels", "stride", "dilation", "groups"):
            if int(getattr(self, field)) < 1:
                raise ValueError(f"KernelSpec.{field} must be positive, got {getattr(self, field)}")
        if self.padding < 0:
            raise ValueError(f"KernelSpec.padding must be non-negative, got {self.padding}")
        if self.in_channels % self.groups:
            raise ValueError(
                f"in_channels={self.in_channels} is not divisible by groups={self.groups}"
            )

    @classmethod
    def same(cls, k: int, in_channels: int, out_channels: int, dilation: int = 1, groups: int = 1):
        """Odd square kernel, stride 1, padding that preserves extents."""
        if k % 2 == 0:
            raise ValueError("same padding needs an odd kernel")
        return cls(k, k, in_channels, out_channels, 1, dilation, dilation * (k - 1) // 2, groups)

    @property
    def taps(self) -> int:
        return self.kh * self.kw

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.kh, self.kw, self.in_channels, self.out_channels)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.dilation * (self.kh - 1) - 1) // self.stride + 1
        wo = (w + 2 * self.padding - self.dilation * (self.kw - 1) - 1) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"input {h}x{w} too small for kernel spec {self}")
        return ho, wo

    def anchor_shift(self) -> tuple[int, int]:
        """Offset from ``n*stride - padding`` to the kernel anchor.

        The anchor is the kernel center when the extent is odd and the
        top-left tap otherwise.
        """
        sr = self.dilation * (self.kh - 1) // 2 if self.kh % 2 else 0
        sc = self.dilation * (self.kw - 1) // 2 if self.kw % 2 else 0
        return sr, sc

    def tap_offsets(self) -> np.ndarray:
        """``(K, 2)`` integer displacements of each tap from the anchor, tap-major."""
        sr, sc = self.anchor_shift()
        ki, kj = np.meshgrid(np.arange(self.kh), np.arange(self.kw), indexing="ij")
        taps = np.stack([ki.ravel() * self.dilation - sr, kj.ravel() * self.dilation - sc], axis=1)
        return taps.astype(np.int64)

    def anchors(self, ho: int, wo: int) -> np.ndarray:
        """``(ho, wo, 2)`` input-grid anchor of every output location."""
        sr, sc = self.anchor_shift()
        r = np.arange(ho) * self.stride - self.padding + sr
        c = np.arange(wo) * self.stride - self.padding + sc
        rr, cc = np.meshgrid(r, c, indexing="ij")
        return np.stack([rr, cc], axis=-1).astype(np.int64)

    def check_weight(self, w: np.ndarray) -> None:
        if tuple(w.shape) != self.weight_shape:
            raise ValueError(f"kernel shape mismatch: expected {self.weight_shape}, got {tuple(w.shape)}")


def _batched(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ValueError(f"expected a rank-{rank} tensor or a batch of them, got shape {x.shape}")


# ---------------------------------------------------------------------------
# bilinear sampling


def _corner_terms(pos: np.ndarray):
    r = pos[..., 0]
    c = pos[..., 1]
    r0 = np.floor(r)
    c0 = np.floor(c)
    return r0.astype(np.int64), c0.astype(np.int64), r - r0, c - c0


def _corners(x: np.ndarray, pos: np.ndarray):
    """Yield ``(dr, dc, rows, cols, valid, values)`` for the four lattice neighbors."""
    n, h, w, _ = x.shape
    r0, c0, fr, fc = _corner_terms(pos)
    b = np.arange(n).reshape((n,) + (1,) * (pos.ndim - 2))
    b = np.broadcast_to(b, r0.shape)
    for dr in (0, 1):
        for dc in (0, 1):
            rr = r0 + dr
            cc = c0 + dc
            valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            rr = np.clip(rr, 0, h - 1)
            cc = np.clip(cc, 0, w - 1)
            vals = x[b, rr, cc] * valid[..., None]
            yield dr, dc, b, rr, cc, valid, vals


def sample_bilinear(x, pos) -> np.ndarray:
    """Sample ``x`` (``(N,H,W,C)``) at fractional points ``pos`` (``(N,...,2)``).

    Returns ``(N, ..., C)``.  Lattice points outside the map contribute 0.
    """
    x = np.asarray(x, dtype=np.float64)
    pos = np.asarray(pos, dtype=np.float64)
    if pos.shape[0] != x.shape[0] or pos.shape[-1] != 2:
        raise ValueError(f"sample points {pos.shape} do not match batch {x.shape}")
    _, _, fr, fc = _corner_terms(pos)
    fr = fr[..., None]
    fc = fc[..., None]
    wts = {(0, 0): (1 - fr) * (1 - fc), (0, 1): (1 - fr) * fc, (1, 0): fr * (1 - fc), (1, 1): fr * fc}
    out = np.zeros(pos.shape[:-1] + (x.shape[-1],))
    for dr, dc, _, _, _, _, vals in _corners(x, pos):
        out += wts[dr, dc] * vals
    return out


def sample_bilinear_backward(x, pos, g) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian product of :func:`sample_bilinear`.

    Returns ``(grad_x, grad_pos)``.  The gradient with respect to the point
    is the slope of the bilinear patch whose lower corner is ``floor(pos)``,
    so at exact lattice coordinates it is the right-hand limit.
    """
    x = np.asarray(x, dtype=np.float64)
    pos = np.asarray(pos, dtype=np.float64)
    _, _, fr, fc = _corner_terms(pos)
    fr = fr[..., None]
    fc = fc[..., None]
    wts = {(0, 0): (1 - fr) * (1 - fc), (0, 1): (1 - fr) * fc, (1, 0): fr * (1 - fc), (1, 1): fr * fc}
    gx = np.zeros_like(x)
    v = {}
    for dr, dc, b, rr, cc, valid, vals in _corners(x, pos):
        v[dr, dc] = vals
        np.add.at(gx, (b, rr, cc), g * wts[dr, dc] * valid[..., None])
    d_row = (1 - fc) * (v[1, 0] - v[0, 0]) + fc * (v[1, 1] - v[0, 1])
    d_col = (1 - fr) * (v[0, 1] - v[0, 0]) + fr * (v[1, 1] - v[1, 0])
    gpos = np.stack([(g * d_row).sum(-1), (g * d_col).sum(-1)], axis=-1)
    return gx, gpos


def bilinear_sample(plane, p) -> float:
    """Bilinear interpolation of a single 2D plane at point ``p = (row, col)``.

    >>> bilinear_sample([[0.0, 1.0], [2.0, 3.0]], (0.5, 0.5))
    1.5
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise ValueError(f"expected a 2D plane, got shape {plane.shape}")
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (2,) or not np.all(np.isfinite(p)):
        raise ValueError(f"invalid sample point {p!r}")
    return float(sample_bilinear(plane[None, :, :, None], p[None, None])[0, 0, 0])


# ---------------------------------------------------------------------------
# 2D convolution


def _im2col2d(xp: np.ndarray, spec: KernelSpec, ho: int, wo: int) -> np.ndarray:
    s, d = spec.stride, spec.dilation
    if spec.taps == 1 and s == 1:
        return xp[:, :ho, :wo, None, :]
    cols = []
    for ki in range(spec.kh):
        for kj in range(spec.kw):
            r0, c0 = ki * d, kj * d
            cols.append(xp[:, r0 : r0 + s * (ho - 1) + 1 : s, c0 : c0 + s * (wo - 1) + 1 : s, :])
    return np.stack(cols, axis=3)  # N, Ho, Wo, K, C


def _check_conv_input(x: np.ndarray, w: np.ndarray, spec: KernelSpec) -> None:
    spec.check_weight(w)
    if x.shape[-1] != spec.in_channels:
        raise ValueError(
            f"input channel mismatch: expected {spec.in_channels}, got shape {tuple(x.shape)}"
        )


def conv2d(x, w, spec: KernelSpec, bias=None) -> np.ndarray:
    """Zero-padded 2D cross-correlation of ``x`` with ``w`` (``(kh,kw,I,O)``)."""
    xb, squeeze = _batched(x, 3)
    w = np.asarray(w, dtype=np.float64)
    _check_conv_input(xb, w, spec)
    n, h, wd, c = xb.shape
    ho, wo = spec.output_size(h, wd)
    p = spec.padding
    xp = np.pad(xb, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = _im2col2d(xp, spec, ho, wo)
    y = cols.reshape(n * ho * wo, spec.taps * c) @ w.reshape(spec.taps * c, spec.out_channels)
    y = y.reshape(n, ho, wo, spec.out_channels)
    if bias is not None:
        y = y + np.asarray(bias, dtype=np.float64)
    return y[0] if squeeze else y


def conv2d_backward(x, w, spec: KernelSpec, gy):
    """Return ``(grad_x, grad_w, grad_bias)`` for :func:`conv2d`."""
    xb, squeeze = _batched(x, 3)
    gyb, _ = _batched(gy, 3)
    w = np.asarray(w, dtype=np.float64)
    n, h, wd, c = xb.shape
    ho, wo = spec.output_size(h, wd)
    p, s, d = spec.padding, spec.stride, spec.dilation
    xp = np.pad(xb, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = _im2col2d(xp, spec, ho, wo).reshape(n * ho * wo, spec.taps * c)
    g2 = gyb.reshape(n * ho * wo, spec.out_channels)
    gw = (cols.T @ g2).reshape(w.shape)
    gb = g2.sum(axis=0)
    gcols = (g2 @ w.reshape(spec.taps * c, spec.out_channels).T).reshape(n, ho, wo, spec.taps, c)
    gxp = np.zeros_like(xp)
    k = 0
    for ki in range(spec.kh):
        for kj in range(spec.kw):
            r0, c0 = ki * d, kj * d
            gxp[:, r0 : r0 + s * (ho - 1) + 1 : s, c0 : c0 + s * (wo - 1) + 1 : s, :] += gcols[:, :, :, k]
            k += 1
    gx = gxp[:, p : p + h, p : p + wd, :]
    return (gx[0] if squeeze else gx), gw, gb


# ---------------------------------------------------------------------------
# 3D convolution (time, row, col)


def _conv3d_geometry(x: np.ndarray, w: np.ndarray, spec: KernelSpec, t_stride: int):
    kt = w.shape[0]
    if w.shape[1:] != spec.weight_shape:
        raise ValueError(
            f"kernel shape mismatch: expected (kt,) + {spec.weight_shape}, got {tuple(w.shape)}"
        )
    if x.shape[-1] != spec.in_channels:
        raise ValueError(f"input channel mismatch: expected {spec.in_channels}, got {tuple(x.shape)}")
    n, t, h, wd, c = x.shape
    if t < kt:
        raise ValueError(f"snippet too short: temporal extent {t} < kernel {kt}")
    to = (t - kt) // t_stride + 1
    ho, wo = spec.output_size(h, wd)
    return kt, to, ho, wo


def _spatial_cols(xb, spec: KernelSpec, ho: int, wo: int):
    """Spatial im2col of every frame, ``(N, T, Ho*Wo, K*C)``; shared by all temporal taps."""
    n, t, h, wd, c = xb.shape
    p = spec.padding
    xp = np.pad(xb.reshape(n * t, h, wd, c), ((0, 0), (p, p), (p, p), (0, 0)))
    return _im2col2d(xp, spec, ho, wo).reshape(n, t, ho * wo, spec.taps * c)


def conv3d(x, w, spec: KernelSpec, t_stride: int = 1, bias=None) -> np.ndarray:
    """Convolution over ``(T, H, W, C)`` snippets, valid in time, zero-padded in space.

    ``w`` has shape ``(kt, kh, kw, I, O)``; ``spec`` carries the spatial part.
    """
    xb, squeeze = _batched(x, 4)
    w = np.asarray(w, dtype=np.float64)
    kt, to, ho, wo = _conv3d_geometry(xb, w, spec, t_stride)
    n = xb.shape[0]
    cols = _spatial_cols(xb, spec, ho, wo)
    wk = w.reshape(kt, -1, spec.out_channels)
    y = np.zeros((n, to, ho * wo, spec.out_channels))
    for dt in range(kt):
        y += cols[:, dt : dt + t_stride * (to - 1) + 1 : t_stride] @ wk[dt]
    y = y.reshape(n, to, ho, wo, spec.out_channels)
    if bias is not None:
        y = y + np.asarray(bias, dtype=np.float64)
    return y[0] if squeeze else y


def conv3d_backward(x, w, spec: KernelSpec, gy, t_stride: int = 1):
    """Return ``(grad_x, grad_w, grad_bias)`` for :func:`conv3d`."""
    xb, squeeze = _batched(x, 4)
    gyb, _ = _batched(gy, 4)
    w = np.asarray(w, dtype=np.float64)
    kt, to, ho, wo = _conv3d_geometry(xb, w, spec, t_stride)
    n, t, h, wd, c = xb.shape
    p, s, d = spec.padding, spec.stride, spec.dilation
    cols = _spatial_cols(xb, spec, ho, wo)
    m = spec.taps * c
    wk = w.reshape(kt, m, spec.out_channels)
    g3 = gyb.reshape(n, to, ho * wo, spec.out_channels)
    g2 = g3.reshape(-1, spec.out_channels)
    gw = np.empty_like(wk)
    gcols = np.zeros_like(cols)
    for dt in range(kt):
        sl = slice(dt, dt + t_stride * (to - 1) + 1, t_stride)
        gw[dt] = cols[:, sl].reshape(-1, m).T @ g2
        gcols[:, sl] += g3 @ wk[dt].T
    gb = g2.sum(axis=0)
    gcols = gcols.reshape(n * t, ho, wo, spec.taps, c)
    gxp = np.zeros((n * t, h + 2 * p, wd + 2 * p, c))
    k = 0
    for ki in range(spec.kh):
        for kj in range(spec.kw):
            r0, c0 = ki * d, kj * d
            gxp[:, r0 : r0 + s * (ho - 1) + 1 : s, c0 : c0 + s * (wo - 1) + 1 : s, :] += gcols[:, :, :, k]
            k += 1
    gx = gxp[:, p : p + h, p : p + wd, :].reshape(n, t, h, wd, c)
    return (gx[0] if squeeze else gx), gw.reshape(w.shape), gb
