"""Tape-based reverse-mode differentiation over the tensor and deform ops.

A :class:`Graph` records every operation applied to its :class:`Var`
objects in execution order, which is already a topological order.
:meth:`Graph.backward` walks the tape once in reverse, accumulating
vector-Jacobian products into each operand.  Plain arrays passed to an op
are treated as constants.

    g = Graph()
    x = g.leaf(x0, "x")
    w = g.leaf(w0, "w")
    y = conv2d(x, w, spec)
    grads = g.backward(sum_squares(y))
    grads["w"]
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import deform as _deform
from . import tensor as _tensor
from .tensor import KernelSpec


class Var:
    __slots__ = ("value", "graph", "name")

    def __init__(self, value: np.ndarray, graph: "Graph", name: str | None = None):
        self.value = value
        self.graph = graph
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __repr__(self):
        return f"Var(name={self.name!r}, shape={self.value.shape})"


class Graph:
    """Operation tape.  One backward pass per forward pass."""

    def __init__(self):
        self.nodes: list[tuple[Var, tuple, Callable]] = []
        self.leaves: list[Var] = []
        self._done = False
        # distance of the recorded point from the kinks of relu and max pooling
        self.kink_margin = math.inf

    def leaf(self, value, name: str | None = None) -> Var:
        v = Var(np.array(value, dtype=np.float64), self, name)
        self.leaves.append(v)
        return v

    def record(self, value: np.ndarray, parents: tuple, vjp: Callable) -> Var:
        out = Var(value, self)
        self.nodes.append((out, parents, vjp))
        return out

    def backward(self, output: Var, seed=None) -> "Gradients":
        """Gradients of ``sum(seed * output)`` for every leaf."""
        if self._done:
            raise RuntimeError("backward already ran on this graph; rebuild it for another pass")
        if seed is None:
            seed = np.ones_like(output.value)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.value.shape:
            raise ValueError(f"seed shape {seed.shape} does not match output shape {output.value.shape}")
        self._done = True
        grads = {id(output): seed}
        for out, parents, vjp in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, vjp(g)):
                if pg is None or not isinstance(p, Var):
                    continue
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg
        return Gradients({id(v): grads.get(id(v), np.zeros_like(v.value)) for v in self.leaves}, self.leaves)


class Gradients:
    def __init__(self, by_id: dict, leaves: list[Var]):
        self._by_id = by_id
        self._by_name = {v.name: by_id[id(v)] for v in leaves if v.name is not None}

    def __getitem__(self, key):
        if isinstance(key, Var):
            return self._by_id[id(key)]
        return self._by_name[key]

    def __contains__(self, key):
        return key in self._by_name

    def items(self):
        return self._by_name.items()


def _val(a):
    return a.value if isinstance(a, Var) else np.asarray(a, dtype=np.float64)


def _graph(*args) -> Graph:
    for a in args:
        if isinstance(a, Var):
            return a.graph
        if isinstance(a, (list, tuple)):
            for b in a:
                if isinstance(b, Var):
                    return b.graph
    raise ValueError("operation needs at least one Var operand")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, d in enumerate(shape):
        if d == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Var:
    av, bv = _val(a), _val(b)
    return _graph(a, b).record(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b) -> Var:
    av, bv = _val(a), _val(b)
    return _graph(a, b).record(av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def mul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    return _graph(a, b).record(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def relu(a: Var) -> Var:
    av = _val(a)
    mask = av > 0
    g = _graph(a)
    if av.size:
        g.kink_margin = min(g.kink_margin, float(np.abs(av).min()))
    return g.record(np.where(mask, av, 0.0), (a,), lambda g: (g * mask,))


def reshape(a: Var, shape) -> Var:
    av = _val(a)
    return _graph(a).record(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def pad_axis(a: Var, axis: int, before: int, after: int) -> Var:
    """Zero padding along one axis."""
    av = _val(a)
    widths = [(0, 0)] * av.ndim
    widths[axis] = (before, after)
    sl = [slice(None)] * av.ndim
    sl[axis] = slice(before, before + av.shape[axis])
    return _graph(a).record(np.pad(av, widths), (a,), lambda g: (g[tuple(sl)],))


def concat(items, axis: int = -1) -> Var:
    vals = [_val(v) for v in items]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _graph(items).record(
        np.concatenate(vals, axis=axis), tuple(items), lambda g: tuple(np.split(g, sizes, axis=axis))
    )


def stack(items, axis: int = 0) -> Var:
    vals = [_val(v) for v in items]

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _graph(items).record(np.stack(vals, axis=axis), tuple(items), vjp)


def take(a: Var, index, axis: int = 0) -> Var:
    """``a`` indexed along ``axis`` with an integer or integer array."""
    av = _val(a)
    idx = np.asarray(index)

    def vjp(g):
        out = np.zeros_like(av)
        sl = [slice(None)] * av.ndim
        sl[axis] = idx
        if idx.ndim == 0:
            out[tuple(sl)] += g
        else:
            np.add.at(out, tuple(sl), g)
        return (out,)

    return _graph(a).record(np.take(av, idx, axis=axis), (a,), vjp)


def mean(a: Var, axis=None) -> Var:
    av = _val(a)
    out = av.mean(axis=axis)
    count = av.size // max(np.size(out), 1)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape) / count,)

    return _graph(a).record(np.asarray(out), (a,), vjp)


def sum_all(a: Var) -> Var:
    av = _val(a)
    return _graph(a).record(np.asarray(av.sum()), (a,), lambda g: (np.broadcast_to(g, av.shape).copy(),))


def sum_squares(a: Var) -> Var:
    av = _val(a)
    return _graph(a).record(np.asarray(np.sum(av * av)), (a,), lambda g: (2.0 * g * av,))


def linear(x, w, b=None) -> Var:
    """``x @ w + b`` with ``x`` of shape ``(N, I)`` and ``w`` of shape ``(I, O)``."""
    xv, wv = _val(x), _val(w)
    out = xv @ wv
    if b is not None:
        out = out + _val(b)
    return _graph(x, w, b).record(out, (x, w, b), lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# convolution and sampling


def conv2d(x, w, spec: KernelSpec, b=None) -> Var:
    xv, wv = _val(x), _val(w)
    out = _tensor.conv2d(xv, wv, spec, None if b is None else _val(b))
    return _graph(x, w, b).record(out, (x, w, b), lambda g: _tensor.conv2d_backward(xv, wv, spec, g))


def conv3d(x, w, spec: KernelSpec, t_stride: int = 1, b=None) -> Var:
    xv, wv = _val(x), _val(w)
    out = _tensor.conv3d(xv, wv, spec, t_stride, None if b is None else _val(b))
    return _graph(x, w, b).record(
        out, (x, w, b), lambda g: _tensor.conv3d_backward(xv, wv, spec, g, t_stride)
    )


def sample_points(x, pos) -> Var:
    """Batched bilinear sampling: ``x`` ``(N,H,W,C)`` at ``pos`` ``(N,...,2)``."""
    xv, pv = _val(x), _val(pos)
    out = _tensor.sample_bilinear(xv, pv)
    return _graph(x, pos).record(out, (x, pos), lambda g: _tensor.sample_bilinear_backward(xv, pv, g))


def bilinear_sample(plane, p) -> Var:
    """Scalar sample of a 2D plane at a 2-vector point."""
    planev, pv = _val(plane), _val(p)
    if pv.shape != (2,) or not np.all(np.isfinite(pv)):
        raise ValueError(f"invalid sample point {pv!r}")
    x4 = planev[None, :, :, None]
    p3 = pv[None, None]
    out = _tensor.sample_bilinear(x4, p3)[0, 0, 0]

    def vjp(g):
        gx, gp = _tensor.sample_bilinear_backward(x4, p3, np.full((1, 1, 1), float(g)))
        return gx[0, :, :, 0], gp[0, 0]

    return _graph(plane, p).record(np.asarray(out), (plane, p), vjp)


def deform_input(x, local) -> Var:
    xv, lv = _val(x), _val(local)
    out = _deform.deform_input(xv, lv)
    return _graph(x, local).record(out, (x, local), lambda g: _deform.deform_input_backward(xv, lv, g))


def expand_local_to_dense(local, spec: KernelSpec, mode: str = "shifted") -> Var:
    lv = _val(local)
    out = _deform.expand_local_to_dense(lv, spec, mode)
    return _graph(local).record(
        out, (local,), lambda g: (_deform.expand_local_to_dense_backward(lv, spec, g, mode),)
    )


def deformable_conv2d(x, w, offsets, spec: KernelSpec, b=None) -> Var:
    xv, wv, ov = _val(x), _val(w), _val(offsets)
    out = _deform.deformable_conv2d(xv, wv, ov, spec, None if b is None else _val(b))

    def vjp(g):
        gx, gw, go, gb = _deform.deformable_conv2d_backward(xv, wv, ov, spec, g)
        return gx, gw, go, gb

    return _graph(x, w, offsets, b).record(out, (x, w, offsets, b), vjp)


def lcdc_conv2d(x, w, local, spec: KernelSpec, b=None, path: str = "factorized") -> Var:
    """LCDC as a composition of recorded ops, along either route."""
    if path == "factorized":
        return conv2d(deform_input(x, local), w, spec, b)
    if path == "direct":
        return deformable_conv2d(x, w, expand_local_to_dense(local, spec, "shifted"), spec, b)
    raise ValueError(f"unknown LCDC path {path!r}")


def offset_learner(x, phi, spec: KernelSpec, b=None) -> Var:
    if spec.out_channels != 2:
        raise ValueError("offset learner must emit 2 channels")
    return conv2d(x, phi, spec, b)


# ---------------------------------------------------------------------------
# network pieces


def batch_norm(x, gamma, beta, state: dict | None = None, training: bool = True, momentum: float = 0.9, eps: float = 1e-5) -> Var:
    """Per-channel normalization over every axis but the last.

    In training mode the batch statistics are used and, when ``state`` is
    given, ``state['mean']``/``state['var']`` are updated as
    ``momentum * running + (1 - momentum) * batch``.
    """
    xv, gv, bv = _val(x), _val(gamma), _val(beta)
    axes = tuple(range(xv.ndim - 1))
    if training:
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        if state is not None:
            state["mean"] = momentum * state["mean"] + (1 - momentum) * mu
            state["var"] = momentum * state["var"] + (1 - momentum) * var
    else:
        mu, var = state["mean"], state["var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    out = gv * xhat + bv
    m = xv.size // xv.shape[-1]

    def vjp(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        if training:
            gx = (gv * inv / m) * (m * g - gb - xhat * gg)
        else:
            gx = g * gv * inv
        return gx, gg, gb

    return _graph(x, gamma, beta).record(out, (x, gamma, beta), vjp)


def max_pool_time(x, size: int = 2, stride: int = 2) -> Var:
    """Max pooling along axis 1 (time) of an ``(N, T, ...)`` tensor."""
    xv = _val(x)
    t = xv.shape[1]
    if t < size:
        raise ValueError(f"snippet too short: temporal extent {t} < pool size {size}")
    to = (t - size) // stride + 1
    wins = np.stack([xv[:, j : j + stride * (to - 1) + 1 : stride] for j in range(size)], axis=0)
    arg = np.argmax(wins, axis=0)
    out = np.take_along_axis(wins, arg[None], axis=0)[0]
    if size > 1:
        top2 = np.sort(wins, axis=0)[-2:]
        gap = top2[1] - top2[0]
        # exact ties come from identical computations, which move together
        if (gap > 0).any():
            _graph(x).kink_margin = min(_graph(x).kink_margin, float(gap[gap > 0].min()))

    def vjp(g):
        gx = np.zeros_like(xv)
        for j in range(size):
            gx[:, j : j + stride * (to - 1) + 1 : stride] += g * (arg == j)
        return (gx,)

    return _graph(x).record(out, (x,), vjp)


def softmax_cross_entropy(logits, labels) -> Var:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    lv = _val(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = lv.shape
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"invalid labels {labels!r} for {c} classes")
    shifted = lv - lv.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(n), labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _graph(logits).record(np.asarray(loss), (logits,), vjp)


# ---------------------------------------------------------------------------
# finite differences


def _scalar(out: Var, loss: str) -> Var:
    if out.value.ndim == 0 and loss == "identity":
        return out
    if loss == "sumsq":
        return sum_squares(out)
    if loss == "sum":
        return sum_all(out)
    raise ValueError(f"unknown loss {loss!r}")


def _evaluate(build, values: dict, loss: str) -> float:
    g = Graph()
    leaves = {k: g.leaf(v, k) for k, v in values.items()}
    return float(_scalar(build(leaves), loss).value)


def finite_diff_report(build, inputs: dict, leaves=None, eps: float = 1e-5, loss: str = "sumsq", max_coords: int | None = None, seed: int = 0) -> dict[str, float]:
    """Compare reverse-mode gradients with central differences, per leaf.

    ``build`` receives a dict of :class:`Var` (one per entry of ``inputs``)
    and returns the output Var; the scalar loss is ``sum(output**2)`` by
    default.  Each returned value is the max over checked coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    values = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    leaves = list(values) if leaves is None else list(leaves)
    g = Graph()
    vars_ = {k: g.leaf(v, k) for k, v in values.items()}
    grads = g.backward(_scalar(build(vars_), loss))
    rng = np.random.default_rng(seed)
    report = {}
    for name in leaves:
        base = values[name]
        analytic = grads[name]
        coords = list(np.ndindex(*base.shape)) if base.ndim else [()]
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        worst = 0.0
        for idx in coords:
            orig = base[idx]
            base[idx] = orig + eps
            fp = _evaluate(build, values, loss)
            base[idx] = orig - eps
            fm = _evaluate(build, values, loss)
            base[idx] = orig
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[idx])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
        report[name] = worst
    return report


def finite_diff_check(build, inputs: dict, leaves=None, eps: float = 1e-5, loss: str = "sumsq", max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error over all checked leaves; see :func:`finite_diff_report`."""
    return max(finite_diff_report(build, inputs, leaves, eps, loss, max_coords, seed).values())
