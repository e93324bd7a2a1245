"""Verification suites: equivalence, degeneracy, flow equivalence, gradients, parameter counts.

Each suite returns a :class:`SuiteResult` whose rows are
``(name, value, tolerance, passed)``.  The CLI prints the rows as CSV and
exits non-zero when a suite fails.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .deform import deformable_conv2d, expand_local_to_dense, lcdc_conv2d
from .motion import check_flow_equivalence, local_motion, multilinear_image, receptive_field_diff
from .network import NetConfig, NetParams, forward_snippet, init_params, param_count, temporal_head_1d
from .tensor import KernelSpec, conv2d


@dataclass
class Row:
    name: str
    value: float
    tol: float
    passed: bool

    def csv(self) -> str:
        return f"{self.name},{self.value:.6e},{self.tol:.1e},{'PASS' if self.passed else 'FAIL'}"


@dataclass
class SuiteResult:
    name: str
    rows: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.rows) and all(r.passed for r in self.rows)

    def add(self, name: str, value: float, tol: float, passed: bool | None = None) -> None:
        ok = value <= tol if passed is None else passed
        self.rows.append(Row(name, float(value), float(tol), bool(ok)))

    def lines(self) -> list[str]:
        return ["check,value,tol,status"] + [r.csv() for r in self.rows]


def _off_lattice(rng, shape, low: float = 0.1) -> np.ndarray:
    """Offsets whose fractional parts stay in ``[low, 1 - low]``."""
    return rng.integers(-1, 2, size=shape) + rng.uniform(low, 1.0 - low, size=shape)


# ---------------------------------------------------------------------------
# equivalence


def random_instance(rng, max_size: int = 16, max_channels: int = 8):
    """A random input, kernel, local offset field and spec for the equivalence checks."""
    h = int(rng.integers(3, max_size + 1))
    w = int(rng.integers(3, max_size + 1))
    k = int(rng.choice([1, 2, 3]))
    kw = int(rng.choice([1, 2, 3]))
    i = int(rng.integers(1, max_channels + 1))
    o = int(rng.integers(1, max_channels + 1))
    stride = int(rng.choice([1, 1, 2]))
    dilation = int(rng.choice([1, 1, 2]))
    padding = int(rng.integers(0, 3))
    groups = int(rng.choice([g for g in (1, 2, 4) if i % g == 0]))
    spec = KernelSpec(k, kw, i, o, stride=stride, dilation=dilation, padding=padding, groups=groups)
    try:
        spec.output_size(h, w)
    except ValueError:
        spec = KernelSpec(k, kw, i, o, padding=max(k, kw), groups=groups)
    x = rng.normal(size=(h, w, i))
    wt = rng.normal(size=spec.weight_shape)
    local = rng.uniform(-2.5, 2.5, size=(h, w, 2))
    return x, wt, local, spec


def equivalence_suite(n: int = 100, seed: int = 0, tol: float = 1e-12) -> SuiteResult:
    """LCDC against dense deformable convolution, the factorized form, and the zero-offset case."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    gaps = {"lcdc_vs_dense_shifted": 0.0, "lcdc_vs_conv_of_deformed": 0.0, "zero_offsets_vs_conv2d": 0.0}
    for _ in range(n):
        x, w, local, spec = random_instance(rng)
        direct = deformable_conv2d(x, w, expand_local_to_dense(local, spec, "shifted"), spec)
        fact = lcdc_conv2d(x, w, local, spec, path="factorized")
        lcdc_direct = lcdc_conv2d(x, w, local, spec, path="direct")
        plain = conv2d(x, w, spec)
        ho, wo = plain.shape[:2]
        zero = deformable_conv2d(x, w, np.zeros((ho, wo, spec.groups, spec.taps, 2)), spec)
        zero_local = lcdc_conv2d(x, w, np.zeros_like(local), spec)
        gaps["lcdc_vs_dense_shifted"] = max(gaps["lcdc_vs_dense_shifted"], np.abs(lcdc_direct - direct).max())
        gaps["lcdc_vs_conv_of_deformed"] = max(gaps["lcdc_vs_conv_of_deformed"], np.abs(fact - direct).max())
        gaps["zero_offsets_vs_conv2d"] = max(
            gaps["zero_offsets_vs_conv2d"], np.abs(zero - plain).max(), np.abs(zero_local - plain).max()
        )
    res = SuiteResult("equiv")
    for name, g in gaps.items():
        res.add(name, g, tol)
    res.add("instances", n, 100, passed=n >= 100)
    res.seconds = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# degeneracy


def dilation_offsets(plain: KernelSpec, dilated: KernelSpec, ho: int, wo: int) -> np.ndarray:
    """Fixed dense offsets that move the sample points of ``plain`` onto those of ``dilated``."""
    pos_plain = plain.anchors(ho, wo)[:, :, None, :] + plain.tap_offsets()[None, None]
    pos_dil = dilated.anchors(ho, wo)[:, :, None, :] + dilated.tap_offsets()[None, None]
    return (pos_dil - pos_plain)[:, :, None].astype(np.float64)


def degeneracy_suite(seed: int = 0, frames: int = 5) -> SuiteResult:
    """Constant-over-time offsets carry no motion; static input gives zero network motion."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    res = SuiteResult("degeneracy")
    spec = KernelSpec.same(3, 4, 4)
    h = w = 9
    # standard convolution: zero offsets at every step
    zeros = [np.zeros((h, w, 1, spec.taps, 2)) for _ in range(frames)]
    rf = max(np.abs(receptive_field_diff(zeros[t], zeros[t - 1])).max() for t in range(1, frames))
    res.add("standard_rf_diff", rf, 0.0)
    # dilated convolution as a deformable one with fixed offsets
    for d in (2, 3):
        plain = KernelSpec.same(3, 4, 4)
        dil = KernelSpec.same(3, 4, 4, dilation=d)
        ho, wo = plain.output_size(h, w)
        fixed = [dilation_offsets(plain, dil, ho, wo) for _ in range(frames)]
        rf = max(np.abs(receptive_field_diff(fixed[t], fixed[t - 1])).max() for t in range(1, frames))
        res.add(f"dilated{d}_rf_diff", rf, 0.0)
        x = rng.normal(size=(h, w, 4))
        wt = rng.normal(size=plain.weight_shape)
        gap = np.abs(deformable_conv2d(x, wt, fixed[0], plain) - conv2d(x, wt, dil)).max()
        res.add(f"dilated{d}_as_deformable", gap, 1e-12)
    # constant local fields over time
    local = rng.uniform(-2, 2, size=(h, w, 2))
    lm = max(np.abs(local_motion(local.copy(), local.copy())).max() for _ in range(frames - 1))
    res.add("constant_local_motion", lm, 0.0)
    # a static snippet through an untrained network with nonzero offset learners
    cfg = mini_config()
    params = _offset_params(cfg, seed)
    frame = rng.uniform(size=(cfg.height, cfg.width, cfg.channels))
    snippet = np.broadcast_to(frame, (cfg.frames,) + frame.shape).copy()
    r = forward_snippet(snippet, params, cfg, training=False)
    nm = max(float(np.abs(m.value).max()) for m in r.motions)
    res.add("static_snippet_network_motion", nm, 0.0)
    res.seconds = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# flow equivalence

FLOW_TRANSLATIONS = ((1.0, 0.0), (0.0, 1.0), (0.5, 0.25), (-1.0, 0.5))


def flow_suite(grid: int = 16, translations=FLOW_TRANSLATIONS, tol: float = 1e-9, seed: int = 0) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    res = SuiteResult("flow")
    spec = KernelSpec.same(3, 2, 3)
    x_prev = multilinear_image(grid, grid, channels=2)
    w = rng.normal(size=spec.weight_shape)
    local_prev = rng.uniform(-0.75, 0.75, size=(grid, grid, 2))
    for o in translations:
        rep = check_flow_equivalence(x_prev, np.asarray(o, dtype=np.float64), local_prev, w, spec, tol)
        tag = f"o=({o[0]:g};{o[1]:g})"
        res.add(f"{tag}_output_gap", rep.max_output_gap, tol, passed=rep.passed)
        res.add(f"{tag}_motion_gap", rep.max_motion_gap, tol, passed=rep.passed)
    # violated constraint: offsets ignore the motion
    rep = check_flow_equivalence(x_prev, np.array([1.0, 0.0]), local_prev, w, spec, tol, local_t=local_prev)
    res.add("violated_output_gap", rep.max_output_gap, 1e-3, passed=rep.max_output_gap > 1e-3 and not rep.passed)
    res.seconds = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# gradients


def op_cases(seed: int = 0) -> list:
    """``(name, build, inputs, loss)`` for every differentiable op."""
    rng = np.random.default_rng(seed)
    nrm = rng.normal
    away = lambda shape: np.sign(nrm(size=shape)) * rng.uniform(0.1, 1.5, size=shape)  # noqa: E731
    s3 = KernelSpec(3, 3, 3, 4, padding=1)
    s_str = KernelSpec(3, 2, 4, 3, stride=2, dilation=2, padding=2)
    s_grp = KernelSpec(3, 3, 4, 3, stride=2, padding=1, groups=2)
    s_lc = KernelSpec.same(3, 3, 2)
    x4 = nrm(size=(2, 7, 6, 3))
    cases = [
        ("add", lambda v: ad.add(v["a"], v["b"]), {"a": nrm(size=(3, 4)), "b": nrm(size=(4,))}, "sumsq"),
        ("sub", lambda v: ad.sub(v["a"], v["b"]), {"a": nrm(size=(3, 4)), "b": nrm(size=(3, 1))}, "sumsq"),
        ("mul", lambda v: ad.mul(v["a"], v["b"]), {"a": nrm(size=(3, 4)), "b": nrm(size=(3, 4))}, "sumsq"),
        ("relu", lambda v: ad.relu(v["a"]), {"a": away((4, 5))}, "sumsq"),
        ("reshape", lambda v: ad.reshape(v["a"], (6, 2)), {"a": nrm(size=(3, 4))}, "sumsq"),
        ("pad_axis", lambda v: ad.pad_axis(v["a"], 0, 1, 2), {"a": nrm(size=(3, 4))}, "sumsq"),
        ("concat", lambda v: ad.concat([v["a"], v["b"]], axis=1), {"a": nrm(size=(3, 2)), "b": nrm(size=(3, 4))}, "sumsq"),
        ("stack", lambda v: ad.stack([v["a"], v["b"]], axis=1), {"a": nrm(size=(3, 2)), "b": nrm(size=(3, 2))}, "sumsq"),
        ("take", lambda v: ad.take(v["a"], np.array([2, 0, 2]), axis=1), {"a": nrm(size=(3, 4))}, "sumsq"),
        ("mean", lambda v: ad.mean(v["a"], axis=(0, 2)), {"a": nrm(size=(3, 4, 2))}, "sumsq"),
        ("sum_all", lambda v: ad.sum_all(v["a"]), {"a": nrm(size=(3, 4))}, "sumsq"),
        ("sum_squares", lambda v: ad.sum_squares(v["a"]), {"a": nrm(size=(3, 4))}, "sumsq"),
        ("linear", lambda v: ad.linear(v["x"], v["w"], v["b"]), {"x": nrm(size=(3, 5)), "w": nrm(size=(5, 2)), "b": nrm(size=(2,))}, "sumsq"),
        ("conv2d", lambda v: ad.conv2d(v["x"], v["w"], s3, v["b"]), {"x": x4, "w": nrm(size=s3.weight_shape), "b": nrm(size=(4,))}, "sumsq"),
        (
            "conv2d_strided_dilated",
            lambda v: ad.conv2d(v["x"], v["w"], s_str),
            {"x": nrm(size=(2, 7, 6, 4)), "w": nrm(size=s_str.weight_shape)},
            "sumsq",
        ),
        (
            "conv3d",
            lambda v: ad.conv3d(v["x"], v["w"], KernelSpec(3, 3, 2, 3, padding=1), 2, v["b"]),
            {"x": nrm(size=(2, 7, 5, 4, 2)), "w": nrm(size=(3, 3, 3, 2, 3)), "b": nrm(size=(3,))},
            "sumsq",
        ),
        (
            "sample_points",
            lambda v: ad.sample_points(v["x"], v["p"]),
            {"x": nrm(size=(2, 6, 5, 3)), "p": rng.integers(0, 4, size=(2, 7, 2)) + rng.uniform(0.1, 0.9, size=(2, 7, 2))},
            "sumsq",
        ),
        (
            "bilinear_sample",
            lambda v: ad.bilinear_sample(v["x"], v["p"]),
            {"x": nrm(size=(5, 6)), "p": np.array([2.3, 3.7])},
            "sumsq",
        ),
        (
            "deform_input",
            lambda v: ad.deform_input(v["x"], v["o"]),
            {"x": nrm(size=(2, 6, 5, 3)), "o": _off_lattice(rng, (2, 6, 5, 2))},
            "sumsq",
        ),
        (
            "expand_shifted",
            lambda v: ad.expand_local_to_dense(v["o"], KernelSpec(3, 3, 2, 2, padding=1, groups=2), "shifted"),
            {"o": nrm(size=(5, 4, 2))},
            "sumsq",
        ),
        (
            "expand_replicated",
            lambda v: ad.expand_local_to_dense(v["o"], KernelSpec(3, 3, 2, 2, padding=1), "replicated"),
            {"o": nrm(size=(5, 4, 2))},
            "sumsq",
        ),
        (
            "deformable_conv2d",
            lambda v: ad.deformable_conv2d(v["x"], v["w"], v["o"], s_grp, v["b"]),
            {
                "x": nrm(size=(2, 7, 6, 4)),
                "w": nrm(size=s_grp.weight_shape),
                "o": _off_lattice(rng, (2, 4, 3, 2, 9, 2)),
                "b": nrm(size=(3,)),
            },
            "sumsq",
        ),
        (
            "offset_learner",
            lambda v: ad.offset_learner(v["x"], v["phi"], KernelSpec.same(3, 3, 2), v["b"]),
            {"x": nrm(size=(2, 5, 4, 3)), "phi": nrm(size=(3, 3, 3, 2)), "b": nrm(size=(2,))},
            "sumsq",
        ),
        (
            "batch_norm_train",
            lambda v: ad.batch_norm(v["x"], v["g"], v["b"], None, True),
            {"x": nrm(size=(4, 3, 2)), "g": nrm(size=(2,)), "b": nrm(size=(2,))},
            "sumsq",
        ),
        (
            "batch_norm_eval",
            lambda v: ad.batch_norm(v["x"], v["g"], v["b"], {"mean": np.array([0.1, -0.2]), "var": np.array([1.5, 0.7])}, False),
            {"x": nrm(size=(4, 3, 2)), "g": nrm(size=(2,)), "b": nrm(size=(2,))},
            "sumsq",
        ),
        (
            "max_pool_time",
            lambda v: ad.max_pool_time(v["x"], 2, 2),
            {"x": rng.permutation(2 * 7 * 3).reshape(2, 7, 3) * 0.1},
            "sumsq",
        ),
        (
            "softmax_cross_entropy",
            lambda v: ad.softmax_cross_entropy(v["z"], np.array([0, 2, 1])),
            {"z": nrm(size=(3, 4))},
            "identity",
        ),
        (
            "temporal_head_1d",
            lambda v: temporal_head_1d(v["f"], v["w"], v["b"], v["cw"], v["cb"]),
            {"f": nrm(size=(6, 4)), "w": nrm(size=(3, 4, 5)), "b": nrm(size=(5,)), "cw": nrm(size=(5, 3)), "cb": nrm(size=(3,))},
            "sumsq",
        ),
    ]
    for path in ("factorized", "direct"):
        cases.append(
            (
                f"lcdc_conv2d_{path}",
                lambda v, path=path: ad.lcdc_conv2d(v["x"], v["w"], v["o"], s_lc, v["b"], path=path),
                {"x": nrm(size=(2, 6, 5, 3)), "w": nrm(size=s_lc.weight_shape), "o": _off_lattice(rng, (2, 6, 5, 2)), "b": nrm(size=(2,))},
                "sumsq",
            )
        )
    return cases


def mini_config(**kw) -> NetConfig:
    base = dict(
        frames=8,
        height=8,
        width=8,
        trunk_widths=(4, 4),
        trunk_strides=(2, 1),
        num_blocks=2,
        bottleneck=2,
        appearance_channels=3,
        fusion_channels=(3, 3),
        fusion_kt=2,
        fc_widths=(5, 4),
        num_classes=3,
    )
    base.update(kw)
    return NetConfig(**base)


def _offset_params(cfg: NetConfig, seed: int) -> NetParams:
    """Initial parameters with small offset learners and biases that keep offsets off the lattice.

    The remaining biases are drawn away from zero so no unit sits exactly on
    a relu kink.
    """
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    for name in list(params.weights):
        v = params.weights[name]
        if ".offset." in name:
            if name.endswith(".w"):
                params.weights[name] = rng.normal(size=v.shape) * 0.01
            else:
                params.weights[name] = np.resize(np.array([0.35, 0.6]), v.shape)
        elif name.endswith(".b"):
            params.weights[name] = np.sign(rng.normal(size=v.shape)) * rng.uniform(0.05, 0.2, size=v.shape)
    return params


def network_gradcheck(cfg: NetConfig | None = None, seed: int = 0, eps: float = 1e-5, max_coords: int = 4, max_draws: int = 50):
    """Relative gradient error of the assembled network, per parameter tensor.

    Also returns the distance of every sampled offset from the integer
    lattice, which must stay at least 0.1 for the check to be meaningful,
    and the distance from the relu and max-pool kinks.  Inputs are redrawn
    until the lattice distance is at least 0.1 and the kink distance at
    least ``10 * eps``, so the difference stencil never straddles a kink.
    """
    cfg = cfg or mini_config()
    params = _offset_params(cfg, seed)
    rng = np.random.default_rng(seed + 2)
    y = np.array([0, 1, 2]) % cfg.num_classes

    def loss_of(p: NetParams):
        r = forward_snippet(x, p.copy(), cfg, training=True)
        return r, ad.softmax_cross_entropy(r.logits, y)

    for _ in range(max_draws):
        x = rng.uniform(size=(3, cfg.frames, cfg.height, cfg.width, cfg.channels))
        r, loss = loss_of(params)
        offs = np.concatenate([o.value.ravel() for o in r.offsets])
        lattice_gap = float(np.min(np.abs(offs - np.round(offs))))
        kink_margin = r.graph.kink_margin
        if lattice_gap >= 0.1 and kink_margin >= 10 * eps:
            break
    grads = r.graph.backward(loss)
    report = {}
    for name in sorted(params.weights):
        base = params.weights[name]
        coords = list(np.ndindex(*base.shape))
        if len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        worst = 0.0
        for idx in coords:
            orig = base[idx]
            base[idx] = orig + eps
            fp = float(loss_of(params)[1].value)
            base[idx] = orig - eps
            fm = float(loss_of(params)[1].value)
            base[idx] = orig
            num = (fp - fm) / (2 * eps)
            a = float(grads[name][idx])
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
        report[name] = worst
    return report, lattice_gap, kink_margin


def gradcheck_suite(seed: int = 0, eps: float = 1e-5, tol: float = 1e-4) -> SuiteResult:
    t0 = time.perf_counter()
    res = SuiteResult("gradcheck")
    for name, build, inputs, loss in op_cases(seed):
        err = ad.finite_diff_check(build, inputs, eps=eps, loss=loss, max_coords=40, seed=seed)
        res.add(name, err, tol)
    for variant in ("lcdc", "dc"):
        cfg = mini_config(variant=variant, groups=2 if variant == "dc" else 1)
        report, gap, margin = network_gradcheck(cfg, seed, eps)
        res.add(f"network_{variant}", max(report.values()), tol)
        res.add(f"network_{variant}_offset_lattice_gap", gap, 0.1, passed=gap >= 0.1)
        res.add(f"network_{variant}_kink_margin", margin, 10 * eps, passed=margin >= 10 * eps)
    res.seconds = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# parameter accounting

# measured deformable parameter counts of the full-scale networks (thousands)
MEASURED_DC_K = 995.5
MEASURED_LCDC_K = 27.7


def full_scale_config(**kw) -> NetConfig:
    """Offset-learner geometry of the full-scale network: three blocks with 512-channel 3x3 kernels."""
    base = dict(bottleneck=512, num_blocks=3, kernel=3, trunk_widths=(8, 16, 512), appearance_channels=8)
    base.update(kw)
    return NetConfig(**base)


def params_suite(kh: int = 3, kw: int = 3, groups: int = 4) -> SuiteResult:
    t0 = time.perf_counter()
    res = SuiteResult("params")
    if kh != kw:
        raise ValueError("the network uses square kernels; pass kh == kw")
    for g in sorted({1, 2, groups}):
        for k in sorted({1, 3, kh}):
            cfg = NetConfig(kernel=k, bottleneck=8, variant="dc", groups=g)
            counts = param_count(cfg, "dc", g)
            res.add(f"ratio_G{g}_k{k}", abs(counts["ratio_dense_over_local"] - g * k * k), 0.0)
    full = param_count(full_scale_config(kernel=kh, variant="dc", groups=groups), "dc", groups)
    measured = MEASURED_DC_K / MEASURED_LCDC_K
    ratio = full["ratio_dense_over_local"]
    res.add("full_scale_ratio_vs_measured", abs(ratio - measured) / measured, 0.03)
    res.seconds = time.perf_counter() - t0
    return res
