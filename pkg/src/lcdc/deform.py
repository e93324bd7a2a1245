"""Deformable convolution and its locally-consistent special case.

Offset fields are channels-last arrays of ``(row, col)`` displacements in
feature-grid units:

* local offsets, one vector per location: ``(H, W, 2)``
* dense offsets, one vector per output location, deformable group and
  tap: ``(Ho, Wo, G, K, 2)`` with ``K = kh * kw`` in tap-major order

Both may carry a leading batch axis.  Input channels are assigned to
deformable groups in contiguous blocks of ``I // G``.

The locally-consistent convolution ties the dense offsets to a single
field, ``dense[n, g, k] = local[anchor(n) + tap(k)]``, which makes it a
plain convolution of the input warped by ``local``.  Both routes are
implemented (``path="direct"`` and ``path="factorized"``); they share the
sampling code and agree bit for bit.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    KernelSpec,
    _batched,
    conv2d,
    conv2d_backward,
    sample_bilinear,
    sample_bilinear_backward,
)

MODES = ("shifted", "replicated")


def _dense_positions(spec: KernelSpec, offsets: np.ndarray) -> np.ndarray:
    _, ho, wo = offsets.shape[:3]
    base = spec.anchors(ho, wo)[:, :, None, None, :] + spec.tap_offsets()[None, None, None, :, :]
    return base[None] + offsets


def _check_dense(xb: np.ndarray, w: np.ndarray, offb: np.ndarray, spec: KernelSpec):
    spec.check_weight(w)
    n, h, wd, c = xb.shape
    if c != spec.in_channels:
        raise ValueError(f"input channel mismatch: expected {spec.in_channels}, got shape {xb.shape}")
    ho, wo = spec.output_size(h, wd)
    expected = (n, ho, wo, spec.groups, spec.taps, 2)
    if offb.shape != expected:
        if offb.ndim == 6 and offb.shape[3] != spec.groups:
            raise ValueError(
                f"deformable group mismatch: offsets carry {offb.shape[3]} groups, spec has {spec.groups}"
            )
        raise ValueError(f"offset shape mismatch: expected {expected[1:]}, got {offb.shape[1:]}")
    return ho, wo


def _gather_cols(xb, pos, spec):
    cg = spec.in_channels // spec.groups
    parts = [
        sample_bilinear(xb[..., g * cg : (g + 1) * cg], pos[:, :, :, g]) for g in range(spec.groups)
    ]
    return np.concatenate(parts, axis=-1)  # N, Ho, Wo, K, C


def deformable_conv2d(x, w, offsets, spec: KernelSpec, bias=None) -> np.ndarray:
    """Convolution whose taps sample ``x`` at ``anchor(n) + tap(k) + offsets[n, g, k]``."""
    xb, squeeze = _batched(x, 3)
    offb, _ = _batched(offsets, 5)
    w = np.asarray(w, dtype=np.float64)
    ho, wo = _check_dense(xb, w, offb, spec)
    cols = _gather_cols(xb, _dense_positions(spec, offb), spec)
    m = spec.taps * spec.in_channels
    y = (cols.reshape(-1, m) @ w.reshape(m, spec.out_channels)).reshape(xb.shape[0], ho, wo, -1)
    if bias is not None:
        y = y + np.asarray(bias, dtype=np.float64)
    return y[0] if squeeze else y


def deformable_conv2d_backward(x, w, offsets, spec: KernelSpec, gy):
    """Return ``(grad_x, grad_w, grad_offsets, grad_bias)``."""
    xb, squeeze = _batched(x, 3)
    offb, _ = _batched(offsets, 5)
    gyb, _ = _batched(gy, 3)
    w = np.asarray(w, dtype=np.float64)
    ho, wo = _check_dense(xb, w, offb, spec)
    pos = _dense_positions(spec, offb)
    cols = _gather_cols(xb, pos, spec)
    m = spec.taps * spec.in_channels
    g2 = gyb.reshape(-1, spec.out_channels)
    gw = (cols.reshape(-1, m).T @ g2).reshape(w.shape)
    gb = g2.sum(axis=0)
    gcols = (g2 @ w.reshape(m, spec.out_channels).T).reshape(cols.shape)
    cg = spec.in_channels // spec.groups
    gx = np.zeros_like(xb)
    goff = np.zeros_like(offb)
    for g in range(spec.groups):
        sl = slice(g * cg, (g + 1) * cg)
        gxg, gpos = sample_bilinear_backward(xb[..., sl], pos[:, :, :, g], gcols[..., sl])
        gx[..., sl] = gxg
        goff[:, :, :, g] = gpos
    if squeeze:
        return gx[0], gw, goff[0], gb
    return gx, gw, goff, gb


# ---------------------------------------------------------------------------
# offset learners


def offset_learner(x, phi, spec: KernelSpec, bias=None) -> np.ndarray:
    """Local offsets ``conv2d(x, phi)``; ``phi`` must emit exactly 2 channels."""
    if spec.out_channels != 2:
        raise ValueError("offset learner must emit 2 channels")
    out = conv2d(x, phi, spec, bias)
    if out.shape[-3:-1] != np.shape(x)[-3:-1]:
        raise ValueError(f"offset learner must preserve extents: {np.shape(x)[-3:-1]} -> {out.shape[-3:-1]}")
    return out


def dense_offset_learner(x, h, spec: KernelSpec, deform_spec: KernelSpec, bias=None) -> np.ndarray:
    """Dense offsets for ``deform_spec`` from a convolution emitting ``G*K*2`` channels.

    Output channels are read in ``(group, tap, row/col)`` order.
    """
    groups, taps = deform_spec.groups, deform_spec.taps
    if spec.out_channels != groups * taps * 2:
        raise ValueError(
            f"dense offset learner must emit G*K*2 = {groups * taps * 2} channels, spec has {spec.out_channels}"
        )
    out = conv2d(x, h, spec, bias)
    return out.reshape(out.shape[:-1] + (groups, taps, 2))


# ---------------------------------------------------------------------------
# local -> dense expansion


def _shifted_index(spec: KernelSpec, h: int, w: int):
    ho, wo = spec.output_size(h, w)
    src = spec.anchors(ho, wo)[:, :, None, :] + spec.tap_offsets()[None, None, :, :]
    r, c = src[..., 0], src[..., 1]
    valid = (r >= 0) & (r < h) & (c >= 0) & (c < w)
    return np.clip(r, 0, h - 1), np.clip(c, 0, w - 1), valid, (ho, wo)


def expand_local_to_dense(local, spec: KernelSpec, mode: str = "shifted") -> np.ndarray:
    """Broadcast a local offset field to dense offsets for ``spec``.

    ``shifted``: ``dense[n, g, k] = local[anchor(n) + tap(k)]`` with zeros
    outside the field; ``local`` lives on the input grid.
    ``replicated``: ``dense[n, g, k] = local[n]``; ``local`` lives on the
    output grid.
    """
    lb, squeeze = _batched(local, 3)
    if lb.shape[-1] != 2:
        raise ValueError(f"local offsets must end in 2, got shape {lb.shape}")
    n, h, w, _ = lb.shape
    if mode == "shifted":
        r, c, valid, (ho, wo) = _shifted_index(spec, h, w)
        dense = lb[:, r, c, :] * valid[None, ..., None]  # N, Ho, Wo, K, 2
    elif mode == "replicated":
        dense = np.broadcast_to(lb[:, :, :, None, :], (n, h, w, spec.taps, 2))
    else:
        raise ValueError(f"unknown expansion mode {mode!r}; expected one of {MODES}")
    dense = np.repeat(dense[:, :, :, None], spec.groups, axis=3)
    return dense[0] if squeeze else dense


def expand_local_to_dense_backward(local, spec: KernelSpec, gdense, mode: str = "shifted"):
    lb, squeeze = _batched(local, 3)
    gd, _ = _batched(gdense, 5)
    n, h, w, _ = lb.shape
    per_tap = gd.sum(axis=3)  # N, Ho, Wo, K, 2
    if mode == "shifted":
        r, c, valid, _ = _shifted_index(spec, h, w)
        g = np.zeros_like(lb)
        b = np.broadcast_to(np.arange(n)[:, None, None, None], (n,) + r.shape)
        np.add.at(g, (b, np.broadcast_to(r, b.shape), np.broadcast_to(c, b.shape)), per_tap * valid[None, ..., None])
    elif mode == "replicated":
        g = per_tap.sum(axis=3)
    else:
        raise ValueError(f"unknown expansion mode {mode!r}; expected one of {MODES}")
    return g[0] if squeeze else g


# ---------------------------------------------------------------------------
# deforming the input, and LCDC


def _local_positions(lb: np.ndarray) -> np.ndarray:
    _, h, w, _ = lb.shape
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([rr, cc], axis=-1)[None] + lb


def _check_local(xb, lb):
    if lb.shape[-1] != 2 or lb.shape[:3] != xb.shape[:3]:
        raise ValueError(f"offset field {lb.shape[1:]} does not match input {xb.shape[1:]}")


def deform_input(x, local) -> np.ndarray:
    """Warp every channel of ``x`` by the shared field: ``out[n] = x(n + local[n])``."""
    xb, squeeze = _batched(x, 3)
    lb, _ = _batched(local, 3)
    _check_local(xb, lb)
    out = sample_bilinear(xb, _local_positions(lb))
    return out[0] if squeeze else out


def deform_input_backward(x, local, gy):
    """Return ``(grad_x, grad_local)`` for :func:`deform_input`."""
    xb, squeeze = _batched(x, 3)
    lb, _ = _batched(local, 3)
    gyb, _ = _batched(gy, 3)
    _check_local(xb, lb)
    gx, gl = sample_bilinear_backward(xb, _local_positions(lb), gyb)
    return (gx[0], gl[0]) if squeeze else (gx, gl)


def lcdc_conv2d(x, w, local, spec: KernelSpec, bias=None, path: str = "factorized") -> np.ndarray:
    """Locally-consistent deformable convolution.

    ``factorized`` computes ``conv2d(deform_input(x, local), w)``;
    ``direct`` runs :func:`deformable_conv2d` on the shifted expansion.
    """
    if path == "factorized":
        return conv2d(deform_input(x, local), w, spec, bias)
    if path == "direct":
        return deformable_conv2d(x, w, expand_local_to_dense(local, spec, "shifted"), spec, bias)
    raise ValueError(f"unknown LCDC path {path!r}")


def lcdc_conv2d_backward(x, w, local, spec: KernelSpec, gy, path: str = "factorized"):
    """Return ``(grad_x, grad_w, grad_local, grad_bias)``."""
    if path == "factorized":
        xt = deform_input(x, local)
        gxt, gw, gb = conv2d_backward(xt, w, spec, gy)
        gx, gl = deform_input_backward(x, local, gxt)
        return gx, gw, gl, gb
    if path == "direct":
        dense = expand_local_to_dense(local, spec, "shifted")
        gx, gw, gd, gb = deformable_conv2d_backward(x, w, dense, spec, gy)
        return gx, gw, expand_local_to_dense_backward(local, spec, gd, "shifted"), gb
    raise ValueError(f"unknown LCDC path {path!r}")


def offset_storage(spec: KernelSpec, h: int, w: int) -> tuple[int, int]:
    """Number of stored offset values ``(dense, local)`` for an ``h x w`` output."""
    return h * w * spec.groups * spec.taps * 2, h * w * 2
