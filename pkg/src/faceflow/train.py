"""Minibatch Adam training of the flow network, evaluation and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .dataset import FlowDataset
from .io import load_checkpoint, save_checkpoint
from .losses import AdamState, FlowLossWeights, LrSchedule, adam_step, flow_loss
from .metrics import AepeReport, aepe2d, aepe3d
from .networks import DffnetConfig, dffnet_forward, init_dffnet

__all__ = [
    "TrainConfig",
    "TrainResult",
    "NumericalError",
    "train_loop",
    "predict",
    "evaluate",
    "zero_flow_baseline",
    "save_dffnet",
    "load_dffnet",
    "LOG_COLUMNS",
]

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "train_loss", "epe_term", "photo_term", "val_aepe3d", "val_aepe2d")


class NumericalError(RuntimeError):
    """Raised when the training loss or its gradients stop being finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    base_lr: float = 1e-4
    lr_decay: float = 0.2
    lr_every: int = 10
    alpha: float = 10.0
    level_weights: tuple | None = None  # one per enabled output, coarsest first
    base: int = 16
    max_disp: int = 4
    levels: int = 4
    pncc_mode: str = "full"
    corr_gain: float = 32.0
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")

    def network(self, height: int, width: int) -> DffnetConfig:
        return DffnetConfig(width, height, self.base, self.max_disp, self.levels, None, self.pncc_mode, self.corr_gain)

    def weights(self, n_outputs: int) -> FlowLossWeights:
        if self.level_weights is None:
            return FlowLossWeights.uniform(n_outputs, self.alpha)
        return FlowLossWeights(tuple(self.level_weights), self.alpha)

    def schedule(self):
        if self.base_lr == 0:
            return lambda epoch: 0.0
        return LrSchedule.step_decay(self.base_lr, self.lr_decay, self.lr_every, max(self.epochs, 1))

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Load field overrides from a ``key = value`` text file (``#`` starts a comment).

        A file whose first non-blank character is ``{`` is read as a JSON object instead.
        Unknown keys are rejected. ``level_weights`` takes a comma-separated list.
        """
        text = Path(path).read_text()
        if text.lstrip().startswith("{"):
            data = json.loads(text)
            if not isinstance(data, dict):
                raise ValueError(f"{path}: expected a JSON object")
        else:
            data = {}
            for n, line in enumerate(text.splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{n}: expected key = value")
                key, val = (s.strip() for s in line.split("=", 1))
                data[key] = val
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(fields)
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
        return cls(**{k: _coerce(k, v) for k, v in data.items()})


def _coerce(key, value):
    kind = type(getattr(TrainConfig, key))
    if key == "level_weights":
        if value is None or value == "none":
            return None
        items = value.split(",") if isinstance(value, str) else value
        return tuple(float(v) for v in items)
    if not isinstance(value, str):
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        if type(value) is not kind:
            raise ValueError(f"config key {key}: expected {kind.__name__}, got {value!r}")
        return value
    if kind is bool:
        if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"config key {key}: expected a boolean, got {value!r}")
        return value.lower() in ("true", "1", "yes")
    try:
        return kind(value)
    except ValueError:
        raise ValueError(f"config key {key}: cannot parse {value!r} as {kind.__name__}") from None


@dataclass
class TrainResult:
    params: dict
    net: DffnetConfig
    history: list


def _rate(schedule, epoch):
    return schedule.rate(epoch) if hasattr(schedule, "rate") else float(schedule(epoch))


def predict(params: dict, net: DffnetConfig, data: FlowDataset, batch_size: int = 16) -> np.ndarray:
    """Finest-level flow for every pair, [M, 3, H, W]."""
    out = []
    for s in range(0, len(data), batch_size):
        i1, i2, pn, _, _ = data.batch(slice(s, s + batch_size))
        out.append(dffnet_forward(params, i1, i2, pn, net)[-1].data)
    return np.concatenate(out) if out else np.zeros((0, 3) + data.size, np.float32)


def _hwc_list(a):
    return [np.transpose(x, (1, 2, 0)) for x in a]


def evaluate(params: dict, net: DffnetConfig, data: FlowDataset, batch_size: int = 16):
    """(AEPE-3D report, AEPE-2D report) of the finest prediction over foreground."""
    pred = _hwc_list(predict(params, net, data, batch_size))
    gt = _hwc_list(data.flow)
    masks = list(data.mask)
    return aepe3d(pred, gt, masks), aepe2d(pred, gt, masks)


def zero_flow_baseline(data: FlowDataset):
    zero = [np.zeros(f.shape[1:] + (3,)) for f in data.flow]
    gt = _hwc_list(data.flow)
    return aepe3d(zero, gt, list(data.mask)), aepe2d(zero, gt, list(data.mask))


def _check_finite(loss, params, epoch, step, parts):
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss} at epoch {epoch} step {step} (terms {parts})")
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in {name} at epoch {epoch} step {step}")


def train_loop(
    config: TrainConfig,
    dataset: FlowDataset,
    schedule=None,
    log_path=None,
    params: dict | None = None,
    steps_per_epoch: int | None = None,
) -> TrainResult:
    """Train on the "train" split, validating on "test" after every epoch.

    `schedule` is an LrSchedule (or any callable epoch -> rate); the default is the
    config's step decay. Each epoch visits the training pairs in a seeded shuffle;
    `steps_per_epoch` truncates epochs (used for smoke tests). The per-epoch metrics are
    returned and, when `log_path` is given, written as CSV.
    """
    train = dataset.subset("train")
    val = dataset.subset("test")
    if len(train) == 0:
        raise ValueError("dataset has no training pairs")
    H, W = train.size
    net = config.network(H, W)
    if params is None:
        params = init_dffnet(net, seed=config.seed)
    weights = config.weights(net.n_outputs)
    schedule = schedule if schedule is not None else config.schedule()
    state = AdamState(lr=_rate(schedule, 0))
    rng = np.random.default_rng(config.seed)

    limits = threadpool_limits(limits=1) if config.deterministic else nullcontext()
    history = []
    writer = None
    fh = open(log_path, "w", newline="") if log_path else None
    try:
        if fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
        with limits:
            for epoch in range(config.epochs):
                state.lr = _rate(schedule, epoch)
                order = rng.permutation(len(train))
                batches = [order[s : s + config.batch_size] for s in range(0, len(order), config.batch_size)]
                if steps_per_epoch is not None:
                    batches = batches[:steps_per_epoch]
                sums = np.zeros(3)
                t0 = time.perf_counter()
                for step, idx in enumerate(batches):
                    i1, i2, pn, fl, mk = train.batch(idx)
                    for p in params.values():
                        p.grad = None
                    with T.Tape() as tape:
                        preds = dffnet_forward(params, i1, i2, pn, net)
                        loss, parts = flow_loss(preds, fl, pn, i1, i2, weights, mask=mk)
                    value = loss.item()
                    if np.isfinite(value):
                        tape.backward(loss)
                    _check_finite(value, params, epoch, step, parts)
                    adam_step(state, params)
                    sums += (value, parts["epe"], parts["photo"])
                row = {
                    "epoch": epoch,
                    "lr": state.lr,
                    "train_loss": float(sums[0] / len(batches)),
                    "epe_term": float(sums[1] / len(batches)),
                    "photo_term": float(sums[2] / len(batches)),
                    "val_aepe3d": float("nan"),
                    "val_aepe2d": float("nan"),
                }
                if len(val):
                    r3, r2 = evaluate(params, net, val)
                    row["val_aepe3d"], row["val_aepe2d"] = r3.mean, r2.mean
                history.append(row)
                log.info(
                    "epoch %d lr %.3g loss %.4f val aepe3d %.4f (%.1fs)",
                    epoch,
                    state.lr,
                    row["train_loss"],
                    row["val_aepe3d"],
                    time.perf_counter() - t0,
                )
                if writer:
                    writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])
                    fh.flush()
    finally:
        if fh:
            fh.close()
    return TrainResult(params, net, history)


_NET_FIELDS = ("width", "height", "base", "max_disp", "levels")


def save_dffnet(path, params: dict, net: DffnetConfig) -> None:
    """Checkpoint parameters plus the network configuration as `config.*` entries."""
    tensors = {f"config.{k}": np.array(getattr(net, k), dtype=np.float32) for k in _NET_FIELDS}
    tensors["config.predict"] = np.array(net.predict, dtype=np.float32)
    tensors["config.pncc_z_only"] = np.array(net.pncc_mode == "z", dtype=np.float32)
    tensors["config.corr_gain"] = np.array(net.corr_gain, dtype=np.float32)
    tensors.update(params)
    save_checkpoint(path, tensors)


def load_dffnet(path):
    """Returns (params, DffnetConfig) from a checkpoint written by `save_dffnet`."""
    raw = load_checkpoint(path)
    try:
        kw = {k: int(raw.pop(f"config.{k}")) for k in _NET_FIELDS}
        kw["predict"] = tuple(bool(v) for v in raw.pop("config.predict"))
        kw["pncc_mode"] = "z" if raw.pop("config.pncc_z_only") else "full"
        kw["corr_gain"] = float(raw.pop("config.corr_gain"))
    except KeyError as exc:
        raise ValueError(f"{path}: checkpoint lacks network configuration entry {exc}") from exc
    net = DffnetConfig(**kw)
    expected = init_dffnet(net, seed=0)
    if set(expected) != set(raw):
        raise ValueError(f"{path}: parameter names do not match the stored configuration")
    params = {}
    for name, ref in expected.items():
        if raw[name].shape != ref.shape:
            raise ValueError(f"{path}: {name} has shape {raw[name].shape}, expected {ref.shape}")
        params[name] = T.Tensor(raw[name], requires_grad=True, name=name)
    return params, net


def report_rows(r3: AepeReport, r2: AepeReport):
    """Per-pair CSV rows (index, aepe3d, aepe2d) for an evaluation report."""
    return [(k, a, b) for k, (a, b) in enumerate(zip(r3.per_pair, r2.per_pair))]
