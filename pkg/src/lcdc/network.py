"""Toy LCDC network: shared per-frame trunk, deformable residual blocks, 3D fusion.

Every frame of a snippet goes through the same trunk.  The last
``num_blocks`` trunk blocks are deformable; their offset fields are kept
for each frame, differenced over time, and concatenated with the
appearance features of the later frame.  Two 3D conv stages
(conv -> BN -> ReLU -> temporal max pool) reduce time, the remaining steps
are averaged, and two fully connected layers with ReLU feed the classifier.

Variants:

``lcdc``
    one local offset field per block (2 channels), shifted expansion,
    computed as convolution of the warped input
``lcdc_replicated``
    one local offset field per block, replicated across taps
``dc``
    unconstrained deformable convolution with ``groups`` deformable groups;
    the motion channels are the full per-tap offset differences
``appearance``
    single-frame baseline: trunk, then the fully connected head
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .synthdata import SplitMix64, hash_seed
from .tensor import KernelSpec

VARIANTS = ("lcdc", "lcdc_replicated", "dc", "appearance")


@dataclass(frozen=True)
class NetConfig:
    frames: int = 16
    height: int = 32
    width: int = 32
    channels: int = 1
    trunk_widths: tuple = (4, 8, 8)
    trunk_strides: tuple = (2, 2, 1)
    num_blocks: int = 3
    bottleneck: int = 4
    kernel: int = 3
    dilation: int = 1
    appearance_channels: int = 4
    variant: str = "lcdc"
    groups: int = 1
    fusion_channels: tuple = (8, 8)
    fusion_kt: int = 4
    fusion_t_stride: int = 1
    fusion_kernel: int = 3
    pool_size: int = 2
    pool_stride: int = 2
    fc_widths: tuple = (64, 64)
    head_pool: str = "mean"
    num_classes: int = 4
    bn_momentum: float = 0.9

    def __post_init__(self):
        for name in ("trunk_widths", "trunk_strides", "fusion_channels", "fc_widths"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be at least 1")
        if len(self.trunk_widths) != len(self.trunk_strides):
            raise ValueError("trunk_widths and trunk_strides differ in length")
        if len(self.fc_widths) != 2:
            raise ValueError("the head has exactly two fully connected layers")
        if self.head_pool not in ("mean", "flatten"):
            raise ValueError(f"head_pool must be 'mean' or 'flatten', got {self.head_pool!r}")
        if self.kernel % 2 == 0:
            raise ValueError("deformable kernel must be odd")
        if self.bottleneck % self.deform_groups:
            raise ValueError(f"bottleneck {self.bottleneck} not divisible by groups {self.deform_groups}")
        if self.variant != "appearance":
            fusion_schedule(self, strict=True)

    @property
    def deform_groups(self) -> int:
        return self.groups if self.variant == "dc" else 1

    @property
    def feature_size(self) -> tuple[int, int]:
        h, w = self.height, self.width
        for s in self.trunk_strides:
            spec = KernelSpec(3, 3, 1, 1, stride=s, padding=1)
            h, w = spec.output_size(h, w)
        return h, w

    @property
    def motion_channels(self) -> int:
        """Motion channels contributed by one deformable block."""
        if self.variant == "dc":
            return self.groups * self.kernel * self.kernel * 2
        return 2

    @property
    def fusion_in_channels(self) -> int:
        return self.appearance_channels + self.num_blocks * self.motion_channels

    def deform_spec(self) -> KernelSpec:
        return KernelSpec.same(self.kernel, self.bottleneck, self.bottleneck, self.dilation, self.deform_groups)

    def offset_spec(self) -> KernelSpec:
        out = 2 if self.variant != "dc" else self.groups * self.kernel * self.kernel * 2
        return KernelSpec.same(self.kernel, self.bottleneck, out)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown NetConfig fields: {sorted(unknown)}")
        return cls(**d)


def fusion_schedule(cfg: NetConfig, strict: bool = False) -> list[tuple[str, int]]:
    """Temporal length after each fusion step, starting from ``frames - 1``.

    Conv steps give ``floor((n - kt) / stride) + 1`` and pool steps
    ``floor((n - size) / stride) + 1``.  With ``strict`` a schedule that
    leaves no time step before averaging raises ``ValueError``.
    """
    n = cfg.frames - 1
    rows = [("input", n)]
    ok = n >= 1
    for i in range(len(cfg.fusion_channels)):
        n = (n - cfg.fusion_kt) // cfg.fusion_t_stride + 1 if n >= cfg.fusion_kt else 0
        rows.append((f"conv{i + 1}", n))
        n = (n - cfg.pool_size) // cfg.pool_stride + 1 if n >= cfg.pool_size else 0
        rows.append((f"pool{i + 1}", n))
        ok = ok and n >= 1
    if strict and not ok:
        table = ", ".join(f"{k}={v}" for k, v in rows)
        raise ValueError(f"fusion temporal arithmetic leaves no time step: {table}")
    return rows


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: NetConfig) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}

    def bn(prefix, c):
        shapes[f"{prefix}.bn.gamma"] = (c,)
        shapes[f"{prefix}.bn.beta"] = (c,)

    c_in = cfg.channels
    for i, c in enumerate(cfg.trunk_widths):
        shapes[f"stem{i}.w"] = (3, 3, c_in, c)
        bn(f"stem{i}", c)
        c_in = c
    k, cb = cfg.kernel, cfg.bottleneck
    off = cfg.offset_spec().out_channels
    for j in range(cfg.num_blocks):
        p = f"block{j}"
        shapes[f"{p}.a.w"] = (1, 1, c_in, cb)
        bn(f"{p}.a", cb)
        shapes[f"{p}.offset.w"] = (k, k, cb, off)
        shapes[f"{p}.offset.b"] = (off,)
        shapes[f"{p}.b.w"] = (k, k, cb, cb)
        bn(f"{p}.b", cb)
        shapes[f"{p}.c.w"] = (1, 1, cb, c_in)
        bn(f"{p}.c", c_in)
    shapes["app.w"] = (1, 1, c_in, cfg.appearance_channels)
    shapes["app.b"] = (cfg.appearance_channels,)
    h, w = cfg.feature_size
    if cfg.variant == "appearance":
        flat = h * w * cfg.appearance_channels
    else:
        c = cfg.fusion_in_channels
        fk = cfg.fusion_kernel
        for i, co in enumerate(cfg.fusion_channels):
            shapes[f"fuse{i}.w"] = (cfg.fusion_kt, fk, fk, c, co)
            bn(f"fuse{i}", co)
            c = co
        flat = h * w * c
    if cfg.head_pool == "mean":
        flat //= h * w
    shapes["fc1.w"] = (flat, cfg.fc_widths[0])
    shapes["fc1.b"] = (cfg.fc_widths[0],)
    shapes["fc2.w"] = (cfg.fc_widths[0], cfg.fc_widths[1])
    shapes["fc2.b"] = (cfg.fc_widths[1],)
    shapes["cls.w"] = (cfg.fc_widths[1], cfg.num_classes)
    shapes["cls.b"] = (cfg.num_classes,)
    return shapes


def is_decayed(name: str) -> bool:
    """Weight tensors take weight decay; biases and batch-norm parameters do not."""
    return name.endswith(".w")


@dataclass
class NetParams:
    weights: dict
    bn_state: dict = field(default_factory=dict)

    def copy(self) -> "NetParams":
        return NetParams(
            {k: v.copy() for k, v in self.weights.items()},
            {k: {s: v.copy() for s, v in st.items()} for k, st in self.bn_state.items()},
        )

    def tensors(self) -> dict[str, np.ndarray]:
        """Flat name -> array view, running statistics included."""
        out = dict(self.weights)
        for k, st in self.bn_state.items():
            out[f"{k}.running_mean"] = st["mean"]
            out[f"{k}.running_var"] = st["var"]
        return out

    @classmethod
    def from_tensors(cls, tensors: dict) -> "NetParams":
        weights, state = {}, {}
        for k, v in tensors.items():
            if k.endswith(".running_mean"):
                state.setdefault(k[: -len(".running_mean")], {})["mean"] = v
            elif k.endswith(".running_var"):
                state.setdefault(k[: -len(".running_var")], {})["var"] = v
            else:
                weights[k] = v
        return cls(weights, state)


def init_params(cfg: NetConfig, seed: int = 0) -> NetParams:
    """He-normal weights, zero biases, zero offset learners, unit BN scale."""
    weights, state = {}, {}
    for i, (name, shape) in enumerate(sorted(param_shapes(cfg).items())):
        if name.endswith(".bn.gamma"):
            weights[name] = np.ones(shape)
            state[name[: -len(".gamma")]] = {"mean": np.zeros(shape), "var": np.ones(shape)}
        elif name.startswith("block") and ".offset." in name:
            weights[name] = np.zeros(shape)
        elif name.endswith(".w"):
            fan_in = int(np.prod(shape[:-1]))
            weights[name] = SplitMix64(hash_seed(seed, i)).normal(shape) * np.sqrt(2.0 / fan_in)
        else:
            weights[name] = np.zeros(shape)
    return NetParams(weights, state)


def param_count(cfg: NetConfig, variant: str | None = None, groups: int | None = None) -> dict:
    """Parameter totals for ``cfg`` under ``variant`` and the DC/LCDC offset ratio.

    ``deform_related`` counts the offset-learner kernels and biases.  The
    ratio compares a ``dc`` network with ``groups`` deformable groups to
    the ``lcdc`` network with the same trunk.
    """
    variant = variant or cfg.variant
    groups = groups or cfg.groups

    def count(v, g):
        c = NetConfig.from_dict({**asdict(cfg), "variant": v, "groups": g})
        shapes = param_shapes(c)
        total = sum(int(np.prod(s)) for s in shapes.values())
        deform = sum(int(np.prod(s)) for n, s in shapes.items() if ".offset." in n)
        return total, deform

    total, deform = count(variant, groups)
    _, dc = count("dc", groups)
    _, lc = count("lcdc", 1)
    return {"total": total, "deform_related": deform, "dc_deform": dc, "lcdc_deform": lc, "ratio_dense_over_local": dc / lc}


def offset_learner_counts(kh: int, kw: int, channels: int, groups: int = 1, blocks: int = 1) -> dict:
    """Offset-learner weights and biases of ``blocks`` deformable layers.

    The dense learner emits ``2 * groups * kh * kw`` channels, the local one
    2, so the ratio is ``groups * kh * kw`` with or without biases.
    """
    dense_out = 2 * groups * kh * kw
    dc = blocks * (kh * kw * channels * dense_out + dense_out)
    lcdc = blocks * (kh * kw * channels * 2 + 2)
    return {"dc_deform": dc, "lcdc_deform": lcdc, "ratio_dense_over_local": dc / lcdc}


# ---------------------------------------------------------------------------
# forward


@dataclass
class ForwardResult:
    logits: ad.Var
    offsets: list  # per block, Var (N, T, H, W, C_off)
    motions: list  # per block, Var (N, T-1, H, W, C_off)
    appearance: ad.Var  # (N, T, H, W, C_a)
    graph: ad.Graph
    leaves: dict


def _bn(x, leaves, params, prefix, training, cfg):
    return ad.batch_norm(
        x,
        leaves[f"{prefix}.bn.gamma"],
        leaves[f"{prefix}.bn.beta"],
        params.bn_state[f"{prefix}.bn"],
        training,
        cfg.bn_momentum,
    )


def _deform_block(x, j, leaves, params, cfg, training):
    p = f"block{j}"
    c_in = x.shape[-1]
    cb = cfg.bottleneck
    a = ad.relu(_bn(ad.conv2d(x, leaves[f"{p}.a.w"], KernelSpec(1, 1, c_in, cb)), leaves, params, f"{p}.a", training, cfg))
    off = ad.conv2d(a, leaves[f"{p}.offset.w"], cfg.offset_spec(), leaves[f"{p}.offset.b"])
    spec = cfg.deform_spec()
    if cfg.variant in ("lcdc", "appearance"):
        b = ad.lcdc_conv2d(a, leaves[f"{p}.b.w"], off, spec)
    elif cfg.variant == "lcdc_replicated":
        b = ad.deformable_conv2d(a, leaves[f"{p}.b.w"], ad.expand_local_to_dense(off, spec, "replicated"), spec)
    else:
        n, h, w, _ = off.shape
        dense = ad.reshape(off, (n, h, w, cfg.groups, spec.taps, 2))
        b = ad.deformable_conv2d(a, leaves[f"{p}.b.w"], dense, spec)
    b = ad.relu(_bn(b, leaves, params, f"{p}.b", training, cfg))
    c = _bn(ad.conv2d(b, leaves[f"{p}.c.w"], KernelSpec(1, 1, cb, c_in)), leaves, params, f"{p}.c", training, cfg)
    return ad.relu(ad.add(x, c)), off


def trunk(x, leaves, params, cfg: NetConfig, training: bool):
    """Per-frame trunk on ``(M, H, W, C)``; returns appearance and block offsets."""
    c_in = cfg.channels
    for i, (c, s) in enumerate(zip(cfg.trunk_widths, cfg.trunk_strides)):
        spec = KernelSpec(3, 3, c_in, c, stride=s, padding=1)
        x = ad.relu(_bn(ad.conv2d(x, leaves[f"stem{i}.w"], spec), leaves, params, f"stem{i}", training, cfg))
        c_in = c
    offsets = []
    for j in range(cfg.num_blocks):
        x, off = _deform_block(x, j, leaves, params, cfg, training)
        offsets.append(off)
    app = ad.relu(ad.conv2d(x, leaves["app.w"], KernelSpec(1, 1, c_in, cfg.appearance_channels), leaves["app.b"]))
    return app, offsets


def _head(feat, leaves, cfg: NetConfig):
    """Spatial reduction, then two fully connected layers with ReLU."""
    if cfg.head_pool == "mean":
        flat = ad.mean(feat, axis=(1, 2))
    else:
        flat = ad.reshape(feat, (feat.shape[0], -1))
    h1 = ad.relu(ad.linear(flat, leaves["fc1.w"], leaves["fc1.b"]))
    h2 = ad.relu(ad.linear(h1, leaves["fc2.w"], leaves["fc2.b"]))
    return h2


def fuse(appearance, motions, leaves, params, cfg: NetConfig, training: bool):
    """Spatio-temporal fusion of appearance ``(N,T,...)`` with ``T-1`` motion steps per block."""
    t = appearance.shape[1]
    for m in motions:
        if m.shape[1] != t - 1 or m.shape[2:4] != appearance.shape[2:4]:
            raise ValueError(f"motion {m.shape} does not align with appearance {appearance.shape}")
    x = ad.concat([ad.take(appearance, np.arange(1, t), axis=1)] + list(motions), axis=-1)
    c = cfg.fusion_in_channels
    fk = cfg.fusion_kernel
    for i, co in enumerate(cfg.fusion_channels):
        spec = KernelSpec(fk, fk, c, co, padding=fk // 2)
        x = ad.conv3d(x, leaves[f"fuse{i}.w"], spec, cfg.fusion_t_stride)
        x = ad.relu(_bn(x, leaves, params, f"fuse{i}", training, cfg))
        x = ad.max_pool_time(x, cfg.pool_size, cfg.pool_stride)
        c = co
    return _head(ad.mean(x, axis=1), leaves, cfg)


def _leaves(graph, params):
    return {k: graph.leaf(v, k) for k, v in params.weights.items()}


def forward_snippet(frames, params: NetParams, cfg: NetConfig, training: bool = False, graph=None) -> ForwardResult:
    """Logits for snippets ``(N, T, H, W, C)`` (or a single ``(T, H, W, C)``)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 4:
        frames = frames[None]
    expected = (cfg.frames, cfg.height, cfg.width, cfg.channels)
    if frames.shape[1:] != expected:
        raise ValueError(f"frame extents {frames.shape[1:]} do not match config {expected}")
    if cfg.variant == "appearance":
        raise ValueError("the appearance baseline takes single frames; use forward_frames")
    graph = graph or ad.Graph()
    leaves = _leaves(graph, params)
    n, t = frames.shape[:2]
    app, offsets = trunk(frames.reshape((n * t,) + expected[1:]), leaves, params, cfg, training)
    app5 = ad.reshape(app, (n, t) + app.shape[1:])
    offs5, motions = [], []
    for off in offsets:
        o5 = ad.reshape(off, (n, t) + off.shape[1:])
        offs5.append(o5)
        motions.append(ad.sub(ad.take(o5, np.arange(1, t), axis=1), ad.take(o5, np.arange(0, t - 1), axis=1)))
    feat = fuse(app5, motions, leaves, params, cfg, training)
    logits = ad.linear(feat, leaves["cls.w"], leaves["cls.b"])
    return ForwardResult(logits, offs5, motions, app5, graph, leaves)


def forward_frames(frames, params: NetParams, cfg: NetConfig, training: bool = False, graph=None) -> ForwardResult:
    """Appearance-only baseline on single frames ``(N, H, W, C)``."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 3:
        frames = frames[None]
    graph = graph or ad.Graph()
    leaves = _leaves(graph, params)
    app, offsets = trunk(frames, leaves, params, cfg, training)
    logits = ad.linear(_head(app, leaves, cfg), leaves["cls.w"], leaves["cls.b"])
    return ForwardResult(logits, offsets, [], app, graph, leaves)


def frame_offsets(frames, params: NetParams, cfg: NetConfig) -> list[np.ndarray]:
    """Offset fields of every deformable block for frames ``(T, H, W, C)``, in inference mode.

    Returns one ``(T, H', W', C_off)`` array per block.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[1:] != (cfg.height, cfg.width, cfg.channels):
        raise ValueError(
            f"frames must be (T, {cfg.height}, {cfg.width}, {cfg.channels}), got {frames.shape}"
        )
    graph = ad.Graph()
    _, offsets = trunk(frames, _leaves(graph, params), params, cfg, training=False)
    return [o.value for o in offsets]


def forward(batch, params: NetParams, cfg: NetConfig, training: bool = False, graph=None) -> ForwardResult:
    if cfg.variant == "appearance":
        return forward_frames(batch, params, cfg, training, graph)
    return forward_snippet(batch, params, cfg, training, graph)


# ---------------------------------------------------------------------------
# temporal head over per-snippet features


def temporal_head_1d(features, w, b, cls_w, cls_b) -> ad.Var:
    """1D convolution over time with same padding, then a per-step linear classifier.

    ``features`` is ``(T, D)`` and ``w`` is ``(k, D, D2)``.  Arguments may be
    arrays or Vars; arrays become leaves of the Vars' graph.
    """
    args = {"features": features, "w": w, "b": b, "cls_w": cls_w, "cls_b": cls_b}
    g = next((a.graph for a in args.values() if isinstance(a, ad.Var)), None) or ad.Graph()
    v = {k: a if isinstance(a, ad.Var) else g.leaf(a, k) for k, a in args.items()}
    t, d = v["features"].shape
    k, _, d2 = v["w"].shape
    if t < k:
        raise ValueError(f"sequence too short: {t} steps for a kernel of length {k}")
    left = (k - 1) // 2
    padded = ad.pad_axis(v["features"], 0, left, k - 1 - left)
    spec = KernelSpec(k, 1, d, d2)
    h = ad.conv2d(ad.reshape(padded, (t + k - 1, 1, d)), ad.reshape(v["w"], (k, 1, d, d2)), spec, v["b"])
    return ad.linear(ad.reshape(h, (t, d2)), v["cls_w"], v["cls_b"])
