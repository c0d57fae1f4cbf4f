"""Losses, Adam, the train / finetune loops and checkpoint persistence."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .chemdata import Batch, ClusterSet, SplitIndices, batch_clusters
from .model import (
    ModelConfig,
    ModelParams,
    energy_forward,
    init_params,
    mean_energy_per_atom,
    param_gradients,
)

log = logging.getLogger(__name__)

MAGIC = b"NNPF"
FORMAT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    energy_weight: float = 1.0
    force_weight: float = 0.0
    energy_loss: str = "MSE"
    normalize_energy_by: str = "cluster"

    def __post_init__(self):
        if self.energy_weight < 0 or self.force_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.energy_weight + self.force_weight <= 0:
            raise ValueError("energy_weight + force_weight must be positive")
        if self.energy_loss not in ("MSE", "MAE"):
            raise ValueError(f"energy_loss must be MSE or MAE, got {self.energy_loss!r}")
        if self.normalize_energy_by not in ("cluster", "per_water"):
            raise ValueError("normalize_energy_by must be 'cluster' or 'per_water'")

    @classmethod
    def pretrain(cls):
        return cls(1.0, 0.0, "MSE", "cluster")

    @classmethod
    def with_forces(cls):
        return cls(0.01, 0.99, "MSE", "cluster")


@dataclass(frozen=True)
class Schedule:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_patience: int = 10
    min_lr: float = 1e-6
    early_stopping: Optional[int] = None
    seed: int = 0

    @classmethod
    def finetune(cls, **kw):
        return cls(**{"lr": 1e-4, **kw})


@dataclass
class OptimizerState:
    step: int
    m: dict
    v: dict
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ModelParams, lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        zeros = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        return cls(0, zeros, {k: np.zeros_like(v) for k, v in params.arrays.items()}, lr, beta1, beta2, eps)


@dataclass
class LossResult:
    loss: float
    energy_loss: float
    force_loss: float
    energy_adjoint: np.ndarray
    force_adjoint: Optional[np.ndarray]


# ----------------------------------------------------------------- losses


def loss_from_predictions(e_pred, e_true, n_waters, cfg: LossConfig, f_pred=None, f_true=None) -> LossResult:
    """Scalar loss and its adjoints with respect to predicted E and F."""
    e_pred = np.asarray(e_pred, dtype=np.float64)
    scale = 1.0 / np.asarray(n_waters, dtype=np.float64) if cfg.normalize_energy_by == "per_water" else 1.0
    err = (e_pred - np.asarray(e_true)) * scale
    c = len(err)
    if cfg.energy_loss == "MSE":
        le = float(np.mean(err**2))
        adj_e = 2.0 * err * scale / c
    else:
        le = float(np.mean(np.abs(err)))
        adj_e = np.sign(err) * scale / c
    lf, adj_f = 0.0, None
    if cfg.force_weight > 0:
        if f_true is None or np.isnan(f_true).any():
            raise ValueError("force_weight > 0 but force targets are missing")
        df = np.asarray(f_pred) - f_true
        lf = float(np.mean(df**2))
        adj_f = cfg.force_weight * 2.0 * df / df.size
    total = cfg.energy_weight * le + cfg.force_weight * lf
    return LossResult(total, le, lf, cfg.energy_weight * adj_e, adj_f)


def compute_loss(params: ModelParams, batch: Batch, cfg: LossConfig, evaluation=None) -> LossResult:
    """Loss on one batch plus adjoints dL/dE (per cluster) and dL/dF (per atom)."""
    if batch.energies is None or np.isnan(batch.energies).any():
        raise ValueError("energy targets are missing")
    if cfg.force_weight > 0 and (batch.forces is None or np.isnan(batch.forces).any()):
        raise ValueError("force_weight > 0 but force targets are missing")
    need_f = cfg.force_weight > 0
    if evaluation is None:
        if need_f:
            evaluation = energy_forward(params, batch, track_positions=True)
        else:
            with ad.no_record():
                evaluation = energy_forward(params, batch)
    f_pred = evaluation.forces() if need_f else None
    return loss_from_predictions(
        evaluation.energies, batch.energies, batch.n_waters, cfg, f_pred, batch.forces
    )


def loss_and_gradients(params: ModelParams, batch: Batch, cfg: LossConfig):
    need_f = cfg.force_weight > 0
    ev = energy_forward(params, batch, track_positions=need_f, track_params=True)
    if need_f:
        ev.position_gradient(create_graph=True)
    res = compute_loss(params, batch, cfg, evaluation=ev)
    grads = param_gradients(params, batch, res.energy_adjoint, res.force_adjoint, evaluation=ev)
    return res, grads


# -------------------------------------------------------------- optimizer


def adam_step(state: OptimizerState, params: ModelParams, grads: dict):
    """One bias-corrected Adam update; returns (new params, new state)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name}")
        if g.shape != params.arrays[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_arrays, new_m, new_v = {}, {}, {}
    for name, p in params.arrays.items():
        g = grads.get(name)
        if g is None:
            new_arrays[name], new_m[name], new_v[name] = p.copy(), state.m[name], state.v[name]
            continue
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_arrays[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    return ModelParams(params.config, new_arrays), replace(state, step=t, m=new_m, v=new_v)


# ------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    params: ModelParams
    optimizer: Optional[OptimizerState] = None
    history: list = field(default_factory=list)
    provenance: dict = field(default_factory=lambda: {"init": "scratch", "parent": None, "chain": []})
    dataset_tag: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def id(self) -> str:
        return self.params.fingerprint()

    @property
    def config(self) -> ModelConfig:
        return self.params.config

    def metadata(self) -> dict:
        opt = None
        if self.optimizer is not None:
            o = self.optimizer
            opt = {"step": o.step, "lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps}
        return {
            "format_version": FORMAT_VERSION,
            "model_config": self.params.config.to_dict(),
            "optimizer": opt,
            "history": self.history,
            "provenance": self.provenance,
            "dataset_tag": self.dataset_tag,
            "seed": self.seed,
            "meta": self.meta,
            "id": self.id,
        }


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    arrays = [(f"params/{k}", v) for k, v in sorted(ckpt.params.arrays.items())]
    if ckpt.optimizer is not None:
        arrays += [(f"adam_m/{k}", v) for k, v in sorted(ckpt.optimizer.m.items())]
        arrays += [(f"adam_v/{k}", v) for k, v in sorted(ckpt.optimizer.v.items())]
    meta = _canonical_json(ckpt.metadata())
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", FORMAT_VERSION))
    out.write(struct.pack("<Q", len(meta)))
    out.write(meta)
    out.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(arr.tobytes())
    return out.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(ckpt))
    return path


def _take(buf, pos, n, what):
    if pos + n > len(buf):
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf[pos : pos + n], pos + n


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    magic, pos = _take(buf, 0, 4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic bytes {magic!r}")
    raw, pos = _take(buf, pos, 4, "version")
    (version,) = struct.unpack("<I", raw)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    raw, pos = _take(buf, pos, 8, "metadata length")
    (n_meta,) = struct.unpack("<Q", raw)
    raw, pos = _take(buf, pos, n_meta, "metadata")
    meta = json.loads(raw.decode())
    raw, pos = _take(buf, pos, 4, "array count")
    (n_arrays,) = struct.unpack("<I", raw)
    arrays = {}
    for _ in range(n_arrays):
        raw, pos = _take(buf, pos, 2, "name length")
        (n_name,) = struct.unpack("<H", raw)
        raw, pos = _take(buf, pos, n_name, "name")
        name = raw.decode()
        raw, pos = _take(buf, pos, 1, "ndim")
        (ndim,) = struct.unpack("<B", raw)
        raw, pos = _take(buf, pos, 8 * ndim, "shape")
        shape = struct.unpack(f"<{ndim}Q", raw)
        size = int(np.prod(shape, dtype=np.int64)) * 8
        raw, pos = _take(buf, pos, size, f"array {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint payload")
    config = ModelConfig.from_dict(meta["model_config"])
    params = ModelParams(config, {k[7:]: v for k, v in arrays.items() if k.startswith("params/")})
    opt = None
    if meta.get("optimizer"):
        o = meta["optimizer"]
        opt = OptimizerState(
            o["step"],
            {k[7:]: v for k, v in arrays.items() if k.startswith("adam_m/")},
            {k[7:]: v for k, v in arrays.items() if k.startswith("adam_v/")},
            o["lr"], o["beta1"], o["beta2"], o["eps"],
        )
    ckpt = Checkpoint(params, opt, meta["history"], meta["provenance"], meta["dataset_tag"], meta["seed"], meta["meta"])
    if meta.get("id") and meta["id"] != ckpt.id:
        raise CheckpointError("checkpoint id does not match stored parameters")
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in history:
            w.writerow([row["epoch"], "" if row["train_loss"] is None else repr(row["train_loss"]),
                        repr(row["val_loss"]), repr(row["lr"])])


# ------------------------------------------------------------------ loops


def dataset_loss(params: ModelParams, clusters, cfg: LossConfig, batch_size: int = 64) -> float:
    """Loss over a whole set, reduced exactly (not an average of batch means)."""
    clusters = list(clusters)
    e_pred, f_pred = [], []
    for k in range(0, len(clusters), batch_size):
        b = batch_clusters(clusters[k : k + batch_size])
        if cfg.force_weight > 0:
            ev = energy_forward(params, b, track_positions=True)
            f_pred.append(ev.forces())
        else:
            with ad.no_record():
                ev = energy_forward(params, b)
        e_pred.append(ev.energies.copy())
    full = batch_clusters(clusters)
    return loss_from_predictions(
        np.concatenate(e_pred), full.energies, full.n_waters, cfg,
        np.concatenate(f_pred) if f_pred else None, full.forces,
    ).loss


EpochHook = Callable[[int, ModelParams, np.ndarray], Optional[np.ndarray]]


def train(
    dataset: ClusterSet,
    split: SplitIndices,
    init,
    loss_cfg: LossConfig = LossConfig(),
    schedule: Schedule = Schedule(),
    config: Optional[ModelConfig] = None,
    epoch_hook: Optional[EpochHook] = None,
    train_indices=None,
    dataset_tag: Optional[str] = None,
) -> Checkpoint:
    """Mini-batch Adam training with best-validation checkpointing.

    ``init`` is an integer seed (fresh weights, per-element offsets set to the
    training-set mean energy per atom) or a :class:`Checkpoint` whose weights
    are copied; the optimizer always starts fresh.  ``epoch_hook(epoch,
    params, train_idx)`` may return a new array of training indices.
    """
    train_idx = np.asarray(split.train if train_indices is None else train_indices, dtype=np.int64)
    if len(train_idx) == 0 or len(split.val) == 0:
        raise ValueError("train and validation splits must be non-empty")
    clusters = dataset.clusters
    val_set = [clusters[i] for i in split.val]
    tag = dataset_tag if dataset_tag is not None else dataset.tags.get("tag", "")

    if isinstance(init, Checkpoint):
        parent = init
        params = parent.params.copy()
        vocab = set(params.config.element_vocabulary)
        if not dataset.elements <= vocab:
            raise ValueError(f"dataset elements {sorted(dataset.elements)} not covered by parent vocabulary {sorted(vocab)}")
        if config is not None and config != parent.config:
            raise ValueError("model config differs from the parent checkpoint")
        provenance = {
            "init": "pretrain",
            "parent": parent.id,
            "chain": list(parent.provenance.get("chain", [])) + [parent.id],
        }
        seed = schedule.seed
    else:
        seed = int(init)
        config = config or ModelConfig(element_vocabulary=tuple(sorted(dataset.elements)))
        offset = mean_energy_per_atom([clusters[i] for i in train_idx])
        params = init_params(config, seed, energy_offset=offset)
        provenance = {"init": "scratch", "parent": None, "chain": []}

    opt = OptimizerState.fresh(params, schedule.lr)
    rng = np.random.default_rng(schedule.seed)
    val_loss = dataset_loss(params, val_set, loss_cfg)
    if not math.isfinite(val_loss):
        raise TrainingDiverged("initial validation loss is not finite")
    history = [{"epoch": 0, "train_loss": None, "val_loss": val_loss, "lr": opt.lr}]
    best, best_loss = params.copy(), val_loss
    since_best = since_decay = 0

    for epoch in range(1, schedule.epochs + 1):
        order = train_idx[rng.permutation(len(train_idx))]
        total, count = 0.0, 0
        for k in range(0, len(order), schedule.batch_size):
            b = batch_clusters([clusters[i] for i in order[k : k + schedule.batch_size]])
            res, grads = loss_and_gradients(params, b, loss_cfg)
            if not math.isfinite(res.loss):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
            params, opt = adam_step(opt, params, grads)
            total += res.loss * b.n_clusters
            count += b.n_clusters
        val_loss = dataset_loss(params, val_set, loss_cfg)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"validation loss is {val_loss} at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": total / count, "val_loss": val_loss, "lr": opt.lr})
        log.debug("epoch %d train %.6g val %.6g lr %.3g", epoch, total / count, val_loss, opt.lr)
        if val_loss < best_loss:
            best, best_loss = params.copy(), val_loss
            since_best = since_decay = 0
        else:
            since_best += 1
            since_decay += 1
        if since_decay >= schedule.lr_patience and opt.lr > schedule.min_lr:
            opt = replace(opt, lr=max(opt.lr * schedule.lr_decay, schedule.min_lr))
            since_decay = 0
        if schedule.early_stopping is not None and since_best >= schedule.early_stopping:
            break
        if epoch_hook is not None:
            new_idx = epoch_hook(epoch, params, train_idx)
            if new_idx is not None:
                train_idx = np.asarray(new_idx, dtype=np.int64)

    meta = {
        "loss": asdict(loss_cfg),
        "schedule": asdict(schedule),
        "n_train": int(len(train_idx)),
        "best_val_loss": best_loss,
    }
    return Checkpoint(best, opt, history, provenance, tag, seed, meta)


def finetune(
    parent: Checkpoint,
    dataset: ClusterSet,
    split: SplitIndices,
    loss_cfg: LossConfig = LossConfig.with_forces(),
    schedule: Schedule = Schedule.finetune(),
    **kw,
) -> Checkpoint:
    """Retrain from ``parent`` weights with a fresh optimizer."""
    return train(dataset, split, parent, loss_cfg, schedule, **kw)
