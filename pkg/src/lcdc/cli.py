"""Command line entry point: ``lcdc <subcommand> [flags]``.

Machine-readable results go to stdout as CSV or ``key=value`` lines;
progress and explanations go to stderr.  Exit status is 0 on success, 1
when a verification suite fails and 2 for bad flags or inputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _say(*parts) -> None:
    print(*parts, file=sys.stderr)


def _out(line: str) -> None:
    print(line)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return str(int(v)) if v.is_integer() else f"{v:.10g}"


def _pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(p) for p in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected 'row,col', got {text!r}") from exc
    return a, b


def _int_list(text: str) -> list[float]:
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from exc
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits, got {text}")
    return v


def _suite(result) -> int:
    for line in result.lines():
        _out(line)
    _say(f"{result.name}: {'PASS' if result.passed else 'FAIL'} in {result.seconds:.2f}s")
    return EXIT_OK if result.passed else EXIT_FAIL


# ---------------------------------------------------------------------------
# subcommands


def cmd_gradcheck(args) -> int:
    from .checks import gradcheck_suite

    return _suite(gradcheck_suite(seed=args.seed, eps=args.eps, tol=args.tol))


def cmd_equiv(args) -> int:
    from .checks import equivalence_suite

    return _suite(equivalence_suite(n=args.n, seed=args.seed, tol=args.tol))


def cmd_degeneracy(args) -> int:
    from .checks import degeneracy_suite

    return _suite(degeneracy_suite(seed=args.seed))


def cmd_prop1(args) -> int:
    from .checks import FLOW_TRANSLATIONS, flow_suite

    if args.translation is None:
        return _suite(flow_suite(args.grid, FLOW_TRANSLATIONS, args.tol, args.seed))
    from .motion import check_flow_equivalence, multilinear_image
    from .tensor import KernelSpec

    if args.grid < 5:
        raise UsageError("--grid must be at least 5")
    rng = np.random.default_rng(args.seed)
    spec = KernelSpec.same(3, 2, 3)
    x_prev = multilinear_image(args.grid, args.grid, channels=2)
    w = rng.normal(size=spec.weight_shape)
    local_prev = rng.uniform(-0.75, 0.75, size=(args.grid, args.grid, 2))
    o = np.asarray(args.translation)
    local_t = local_prev if args.violate else None
    rep = check_flow_equivalence(x_prev, o, local_prev, w, spec, args.tol, local_t=local_t)
    _out(f"translation={_fmt(o[0])},{_fmt(o[1])}")
    for line in rep.lines():
        _out(line)
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_params(args) -> int:
    from .network import NetConfig, offset_learner_counts, param_count

    if args.config:
        cfg = NetConfig.from_dict(_read_json(args.config).get("net", _read_json(args.config)))
        groups = args.groups or cfg.groups
        counts = param_count(cfg, cfg.variant, groups)
        for k in ("total", "deform_related", "dc_deform", "lcdc_deform"):
            _out(f"{k}={counts[k]}")
        _out(f"ratio={_fmt(counts['ratio_dense_over_local'])}")
        return EXIT_OK
    groups = args.groups or 1
    counts = offset_learner_counts(args.kh, args.kw, args.channels, groups, args.blocks)
    _out(f"kh={args.kh}")
    _out(f"kw={args.kw}")
    _out(f"groups={groups}")
    _out(f"channels={args.channels}")
    _out(f"blocks={args.blocks}")
    _out(f"dc_deform={counts['dc_deform']}")
    _out(f"lcdc_deform={counts['lcdc_deform']}")
    _out(f"ratio={_fmt(counts['ratio_dense_over_local'])}")
    return EXIT_OK


def cmd_taps(args) -> int:
    from .network import fusion_schedule
    from .tensor import KernelSpec

    spec = KernelSpec(args.kh, args.kw, 1, 1, stride=args.stride, dilation=args.dilation, padding=args.padding)
    sr, sc = spec.anchor_shift()
    _out(f"anchor_shift={sr},{sc}")
    _out("tap,ki,kj,dr,dc")
    for k, (dr, dc) in enumerate(spec.tap_offsets()):
        _out(f"{k},{k // spec.kw},{k % spec.kw},{dr},{dc}")
    if args.config:
        raw = _read_json(args.config)
        cfg = _unchecked_config(raw.get("net", raw))
    else:
        cfg = _unchecked_config(
            {"frames": args.frames, "fusion_kt": args.kt, "fusion_t_stride": args.t_stride}
        )
    rows = fusion_schedule(cfg)
    _out("stage,length")
    for name, n in rows:
        _out(f"{name},{n}")
    if any(n < 1 for _, n in rows):
        _say("fusion temporal arithmetic leaves no time step; this configuration is rejected")
        return EXIT_USAGE
    return EXIT_OK


def _unchecked_config(d: dict):
    """A NetConfig built without the schedule check, for printing the table of a bad config."""
    from .network import NetConfig

    cfg = NetConfig(variant="appearance")
    merged = {**asdict(cfg), **d}
    unknown = set(d) - set(asdict(cfg))
    if unknown:
        raise UsageError(f"unknown NetConfig fields: {sorted(unknown)}")
    for k, v in merged.items():
        object.__setattr__(cfg, k, tuple(v) if isinstance(v, list) else v)
    return cfg


def cmd_gen(args) -> int:
    from .io import write_labels_csv, write_tsr
    from .synthdata import SequenceConfig, generate_sequence, generate_snippet, make_dataset

    snippet = _snippet_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "snippet":
        cls = args.cls or snippet.classes[0]
        s = generate_snippet(cls, args.seed, snippet)
        write_tsr(out / "frames.tsr", s.frames)
        write_labels_csv(out / "labels.csv", [s.label] * snippet.frames)
        _out(f"frames={snippet.frames}")
        _out(f"label={s.label}")
    elif args.kind == "sequence":
        cfg = SequenceConfig(num_segments=args.segments, snippet=snippet)
        s = generate_sequence(args.seed, cfg)
        write_tsr(out / "frames.tsr", s.frames)
        write_labels_csv(out / "labels.csv", s.frame_labels)
        _out(f"frames={len(s.frame_labels)}")
        _out(f"segments={len(s.segments)}")
    else:
        x, y = make_dataset(args.per_class, args.seed, snippet, args.split)
        write_tsr(out / "snippets.tsr", x)
        write_labels_csv(out / "labels.csv", y)
        _out(f"snippets={len(y)}")
    _say(f"wrote {args.kind} to {out}")
    return EXIT_OK


def _snippet_config(args):
    from .synthdata import SnippetConfig

    kw = {}
    for name in ("frames", "height", "width", "speed"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    if getattr(args, "classes", None):
        kw["classes"] = tuple(c.strip() for c in args.classes.split(","))
    return SnippetConfig(**kw)


def cmd_train(args) -> int:
    from .train import load_run_config, train_toy

    net, data, opt = load_run_config(args.config)
    if args.epochs is not None:
        opt.epochs = args.epochs
    _say(f"training {net.variant} for {opt.epochs} epochs, seed {args.seed}")
    res = train_toy(net, data, opt, seed=args.seed, out=args.out, log=_say)
    last = res.history[-1]
    _out(f"variant={net.variant}")
    _out(f"epochs={len(res.history)}")
    _out(f"final_data_loss={last['data_loss']!r}")
    _out(f"final_train_acc={_fmt(last['train_acc'])}")
    _out(f"final_test_acc={_fmt(last['test_acc'])}")
    _out(f"best_test_acc={_fmt(max(r['test_acc'] for r in res.history))}")
    _say(f"done in {res.seconds:.1f}s")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .io import read_labels_csv
    from .metrics import evaluate

    pred = read_labels_csv(args.pred)
    gt = read_labels_csv(args.gt)
    ks = args.k or [10.0]
    scores = evaluate(pred, gt, ks, args.background)
    _say("columns: accuracy,edit," + ",".join(f"f1@{_fmt(k)}" for k in ks))
    _out(",".join(_fmt(round(v, 6)) for v in scores))
    return EXIT_OK


def cmd_motion(args) -> int:
    from .io import load_checkpoint, read_tsr
    from .motion import export_motion
    from .network import NetConfig, NetParams, frame_offsets

    tensors, manifest = load_checkpoint(args.checkpoint)
    if "config" not in manifest:
        raise UsageError(f"checkpoint {args.checkpoint} carries no network config")
    cfg = NetConfig.from_dict(manifest["config"])
    if cfg.variant == "dc":
        raise UsageError("motion export needs a locally consistent network (lcdc or lcdc_replicated)")
    params = NetParams.from_tensors(tensors)
    frames = []
    for path in args.frames:
        arr = read_tsr(path)
        frames.extend(arr if arr.ndim == 4 else [arr])
    frames = np.stack([f if f.ndim == 3 else f[..., None] for f in frames])
    if len(frames) < 2:
        raise UsageError("motion needs at least two frames")
    offsets = frame_offsets(frames, params, cfg)
    per_layer = [[o[t] for t in range(len(frames))] for o in offsets]
    consts = export_motion(args.out, per_layer, args.suppress)
    _out(f"frames={len(frames)}")
    _out(f"layers={len(per_layer)}")
    peak = max((v for k, v in consts.items() if k.startswith("energy")), default=0.0)
    _out(f"max_energy={peak!r}")
    _say(f"wrote motion fields and energy maps to {args.out}")
    return EXIT_OK


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_u64, default=0, help="seed for every random draw (default 0)")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS threads; results do not depend on it")

    p = argparse.ArgumentParser(prog="lcdc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op and the toy network")
    s.add_argument("--eps", type=float, default=1e-5, help="central difference step")
    s.add_argument("--tol", type=float, default=1e-4, help="max relative error")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("equiv", parents=[common], help="LCDC / deformable / factorized equivalence suite")
    s.add_argument("--n", type=int, default=100, help="number of random instances")
    s.add_argument("--tol", type=float, default=1e-12, help="max absolute difference")
    s.set_defaults(func=cmd_equiv)

    s = sub.add_parser("degeneracy", parents=[common], help="zero motion for constant-over-time offsets")
    s.set_defaults(func=cmd_degeneracy)

    s = sub.add_parser("prop1", parents=[common], help="flow-equivalence check on multilinear images")
    s.add_argument("--grid", type=int, default=16, help="image side length")
    s.add_argument("--translation", type=_pair, default=None, help="constant motion 'row,col'; default runs the full suite")
    s.add_argument("--tol", type=float, default=1e-9, help="max output and motion gap")
    s.add_argument("--violate", action="store_true", help="keep offsets fixed so the constraint is broken")
    s.set_defaults(func=cmd_prop1)

    s = sub.add_parser("params", parents=[common], help="offset-learner parameter counts and the dense/local ratio")
    s.add_argument("--config", help="network config JSON; counts the whole network")
    s.add_argument("--kh", type=int, default=3, help="kernel rows")
    s.add_argument("--kw", type=int, default=3, help="kernel columns")
    s.add_argument("--groups", type=int, default=None, help="deformable groups of the dense variant")
    s.add_argument("--channels", type=int, default=512, help="offset-learner input channels")
    s.add_argument("--blocks", type=int, default=3, help="number of deformable layers")
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("taps", parents=[common], help="tap-anchor table and fusion temporal arithmetic")
    s.add_argument("--kh", type=int, default=3)
    s.add_argument("--kw", type=int, default=3)
    s.add_argument("--stride", type=int, default=1)
    s.add_argument("--dilation", type=int, default=1)
    s.add_argument("--padding", type=int, default=1)
    s.add_argument("--frames", type=int, default=16, help="snippet length T")
    s.add_argument("--kt", type=int, default=4, help="temporal kernel of the fusion convs")
    s.add_argument("--t-stride", dest="t_stride", type=int, default=1, help="temporal stride of the fusion convs")
    s.add_argument("--config", help="network config JSON; overrides --frames/--kt/--t-stride")
    s.set_defaults(func=cmd_taps)

    s = sub.add_parser("gen", parents=[common], help="write synthetic snippets or sequences")
    s.add_argument("--kind", choices=("snippet", "sequence", "dataset"), default="snippet")
    s.add_argument("--class", dest="cls", default=None, help="class of a single snippet")
    s.add_argument("--classes", default=None, help="comma-separated class list")
    s.add_argument("--frames", type=int, default=None)
    s.add_argument("--height", type=int, default=None)
    s.add_argument("--width", type=int, default=None)
    s.add_argument("--speed", type=float, default=None, help="pixels per frame")
    s.add_argument("--segments", type=int, default=6, help="segments per sequence")
    s.add_argument("--per-class", dest="per_class", type=int, default=10, help="dataset snippets per class")
    s.add_argument("--split", type=int, default=0, help="dataset split id (0 train, 1 test)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("train", parents=[common], help="train the toy network on generated snippets")
    s.add_argument("--config", default=None, help="JSON with optional 'net', 'data', 'optimizer' sections")
    s.add_argument("--epochs", type=int, default=None, help="override the optimizer epoch count")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="accuracy, edit score and F1@k of frame label CSVs")
    s.add_argument("pred", help="predicted labels CSV (frame,label)")
    s.add_argument("gt", help="ground-truth labels CSV (frame,label)")
    s.add_argument("--k", type=_int_list, default=None, help="comma-separated overlap thresholds (default 10)")
    s.add_argument("--background", type=int, default=None, help="label excluded from segment metrics")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("motion", parents=[common], help="export offsets, motion fields and energy maps")
    s.add_argument("--frames", nargs="+", required=True, help="TSR files holding frames or a (T,H,W,C) sequence")
    s.add_argument("--checkpoint", required=True, help="checkpoint directory written by train")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--suppress", type=float, default=0.0, help="draw motion vectors shorter than this as zero")
    s.set_defaults(func=cmd_motion)
    return p


def _threads(n):
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError("--threads must be positive")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _threads(args.threads):
            return args.func(args)
    except (UsageError, ValueError, FileNotFoundError) as exc:
        _say(f"lcdc {args.command}: error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
