"""Loss, momentum SGD and the toy motion-discrimination training loop."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .io import save_checkpoint, write_labels_csv
from .network import NetConfig, NetParams, forward, init_params, is_decayed
from .synthdata import SnippetConfig, SplitMix64, hash_seed, make_dataset


def reg_loss(params, weight_decay: float) -> float:
    """``(weight_decay/2) * sum ||w||^2`` over weight tensors only."""
    weights = params.weights if isinstance(params, NetParams) else dict(params or {})
    total = 0.0
    for name in sorted(weights):
        if is_decayed(name):
            total += float(np.sum(np.square(weights[name])))
    return 0.5 * weight_decay * total


def cross_entropy(logits, label: int, params=None, weight_decay: float = 0.0) -> float:
    logits = np.asarray(logits, dtype=np.float64).ravel()
    if not 0 <= int(label) < logits.size:
        raise ValueError(f"invalid label {label} for {logits.size} classes")
    shifted = logits - logits.max()
    data = float(np.log(np.exp(shifted).sum()) - shifted[int(label)])
    return data + reg_loss(params, weight_decay)


@dataclass
class OptimizerConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_factor: float = 0.96
    decay_epochs: int = 10
    epochs: int = 30
    batch_size: int = 8


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    decay_factor: float = 0.96
    decay_interval: int = 0  # steps; 0 disables the schedule
    step: int = 0
    velocity: dict = field(default_factory=dict)

    @classmethod
    def create(cls, params: dict, **kw) -> "OptimizerState":
        st = cls(**kw)
        st.velocity = {k: np.zeros_like(v) for k, v in params.items()}
        return st


def sgd_momentum_step(params: dict, grads: dict, state: OptimizerState) -> tuple[dict, OptimizerState]:
    """``v <- m*v + g``, ``theta <- theta - lr*v``; the lr decays every ``decay_interval`` steps.

    Weight decay adds ``weight_decay * theta`` to the gradient of weight
    tensors.  Parameters are updated in sorted-name order.
    """
    out = {}
    for name in sorted(params):
        theta = params[name]
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise ValueError(f"shape mismatch for {name}: param {theta.shape}, grad {g.shape}")
        if state.weight_decay and is_decayed(name):
            g = g + state.weight_decay * theta
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(theta)
        elif v.shape != theta.shape:
            raise ValueError(f"shape mismatch for {name}: param {theta.shape}, velocity {v.shape}")
        v = state.momentum * v + g
        state.velocity[name] = v
        out[name] = theta - state.lr * v
    state.step += 1
    if state.decay_interval and state.step % state.decay_interval == 0:
        state.lr *= state.decay_factor
    return out, state


# ---------------------------------------------------------------------------
# toy experiment


@dataclass
class ToyData:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def load_toy_data(snippet: SnippetConfig, n_train: int = 200, n_test: int = 50, seed: int = 7) -> ToyData:
    tx, ty = make_dataset(n_train, seed, snippet, split=0)
    vx, vy = make_dataset(n_test, seed, snippet, split=1)
    return ToyData(tx, ty, vx, vy)


def single_frames(x: np.ndarray, seed: int) -> np.ndarray:
    """One frame per snippet, chosen by a seeded draw; input to the appearance baseline."""
    idx = SplitMix64(hash_seed(seed, 0xF4A)).integers(0, x.shape[1], (x.shape[0],))
    return x[np.arange(x.shape[0]), idx]


def predict(x: np.ndarray, params: NetParams, cfg: NetConfig, batch_size: int = 32) -> np.ndarray:
    preds = []
    for i in range(0, len(x), batch_size):
        r = forward(x[i : i + batch_size], params, cfg, training=False)
        preds.append(np.argmax(r.logits.value, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


@dataclass
class TrainResult:
    history: list  # dicts with epoch, data_loss, reg_loss, train_acc, test_acc
    params: NetParams
    test_pred: np.ndarray
    test_y: np.ndarray
    seconds: float

    @property
    def test_acc(self) -> float:
        return self.history[-1]["test_acc"] if self.history else float("nan")


HISTORY_FIELDS = ("epoch", "data_loss", "reg_loss", "train_acc", "test_acc")


def train_toy(
    cfg: NetConfig = NetConfig(),
    data_cfg: SnippetConfig = SnippetConfig(),
    opt: OptimizerConfig = OptimizerConfig(),
    seed: int = 0,
    out=None,
    data: ToyData | None = None,
    log=None,
) -> TrainResult:
    """Train ``cfg`` on generated snippets and evaluate snippet accuracy each epoch.

    The appearance variant sees one seeded frame per snippet instead of the
    whole snippet.  Batches follow a seeded permutation per epoch, so runs
    with equal arguments are bit-identical.
    """
    if cfg.variant != "appearance" and (cfg.frames, cfg.height, cfg.width) != (
        data_cfg.frames,
        data_cfg.height,
        data_cfg.width,
    ):
        raise ValueError("network and data configs disagree on snippet extents")
    if cfg.num_classes != len(data_cfg.classes):
        raise ValueError(f"network has {cfg.num_classes} classes, data has {len(data_cfg.classes)}")
    start = time.perf_counter()
    data = data or load_toy_data(data_cfg)
    tx, vx = data.train_x, data.test_x
    if cfg.variant == "appearance":
        tx = single_frames(tx, hash_seed(seed, 0))
        vx = single_frames(vx, hash_seed(seed, 1))
    ty, vy = data.train_y, data.test_y

    params = init_params(cfg, seed)
    steps_per_epoch = math.ceil(len(tx) / opt.batch_size)
    state = OptimizerState.create(
        params.weights,
        lr=opt.lr,
        momentum=opt.momentum,
        weight_decay=opt.weight_decay,
        decay_factor=opt.decay_factor,
        decay_interval=opt.decay_epochs * steps_per_epoch,
    )
    history = []
    vpred = np.zeros(0, dtype=np.int64)
    for epoch in range(1, opt.epochs + 1):
        order = SplitMix64(hash_seed(seed, 0xE9, epoch)).permutation(len(tx))
        data_sum, correct = 0.0, 0
        for b in range(steps_per_epoch):
            idx = order[b * opt.batch_size : (b + 1) * opt.batch_size]
            r = forward(tx[idx], params, cfg, training=True)
            loss = ad.softmax_cross_entropy(r.logits, ty[idx])
            grads = r.graph.backward(loss)
            data_sum += float(loss.value) * len(idx)
            correct += int(np.sum(np.argmax(r.logits.value, axis=1) == ty[idx]))
            new, state = sgd_momentum_step(params.weights, {k: grads[k] for k in params.weights}, state)
            params.weights = new
        vpred = predict(vx, params, cfg)
        row = {
            "epoch": epoch,
            "data_loss": data_sum / len(tx),
            "reg_loss": reg_loss(params, opt.weight_decay),
            "train_acc": 100.0 * correct / len(tx),
            "test_acc": 100.0 * float(np.mean(vpred == vy)),
        }
        if not all(math.isfinite(row[k]) for k in ("data_loss", "reg_loss")):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}: {row}")
        history.append(row)
        if log:
            log(", ".join(f"{k}={row[k]:.4f}" if isinstance(row[k], float) else f"{k}={row[k]}" for k in HISTORY_FIELDS))
    result = TrainResult(history, params, vpred, vy, time.perf_counter() - start)
    if out is not None:
        write_run(out, result, cfg, data_cfg, opt, seed)
    return result


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])


def write_run(out, result: TrainResult, cfg, data_cfg, opt, seed) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_history(out / "history.csv", result.history)
    save_checkpoint(out / "checkpoint", result.params.tensors(), {"config": asdict(cfg)})
    echo = {"net": asdict(cfg), "data": asdict(data_cfg), "optimizer": asdict(opt), "seed": seed}
    (out / "config.echo.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    write_labels_csv(out / "test_pred.csv", result.test_pred)
    write_labels_csv(out / "test_gt.csv", result.test_y)


def load_run_config(path=None) -> tuple[NetConfig, SnippetConfig, OptimizerConfig]:
    """Read a run config JSON with optional ``net``, ``data`` and ``optimizer`` sections.

    Missing sections and fields keep their defaults.  Unknown fields are errors.
    """
    raw = {} if path is None else json.loads(Path(path).read_text())
    unknown = set(raw) - {"net", "data", "optimizer"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    net = NetConfig.from_dict(raw.get("net", {}))
    data = dict(raw.get("data", {}))
    if "classes" in data:
        data["classes"] = tuple(data["classes"])
    try:
        data_cfg = SnippetConfig(**data)
        opt = OptimizerConfig(**raw.get("optimizer", {}))
    except TypeError as exc:
        raise ValueError(f"bad config field: {exc}") from exc
    return net, data_cfg, opt
