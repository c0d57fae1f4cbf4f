"""Error-threshold active sampling for finetuning.

A training set is split into a small training subset and a reserve.  Every
few epochs a random batch of reserve samples is scored with the current
model, and a sample moves into the training subset when

    1 - erf((eps_s - mu) / sigma) < p_tol

where ``mu`` and ``sigma`` summarize per-sample force errors over the
validation set.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special

from .chemdata import ClusterSet, SplitIndices
from .evaluation import predict_all


def erf(x):
    """Gaussian error function (double precision, scalar or array)."""
    out = special.erf(x)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class ErrorStats:
    mu: float
    sigma: float
    n: int

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    @classmethod
    def from_errors(cls, errors) -> "ErrorStats":
        errors = np.asarray(errors, dtype=np.float64)
        if errors.size < 2:
            raise ValueError("need at least two errors for a spread estimate")
        return cls(float(errors.mean()), float(errors.std()), int(errors.size))


@dataclass(frozen=True)
class PromotionRecord:
    round: int
    sample_id: int
    epsilon: float
    mu: float
    sigma: float
    promoted: bool


@dataclass
class SamplingPools:
    """Disjoint training subset and reserve, plus the append-only log."""

    train_subset: np.ndarray
    reserve: np.ndarray
    log: list = field(default_factory=list)
    rounds: int = 0

    def __post_init__(self):
        self.train_subset = np.sort(np.asarray(self.train_subset, dtype=np.int64))
        self.reserve = np.sort(np.asarray(self.reserve, dtype=np.int64))
        if np.intersect1d(self.train_subset, self.reserve).size:
            raise ValueError("training subset and reserve overlap")

    @classmethod
    def from_indices(cls, indices, subset_size: int, seed: int = 0) -> "SamplingPools":
        """Seeded split of ``indices`` into a subset of ``subset_size`` and a reserve."""
        indices = np.asarray(indices, dtype=np.int64)
        if not 0 < subset_size <= len(indices):
            raise ValueError("subset_size must be in [1, len(indices)]")
        perm = np.random.default_rng(seed).permutation(len(indices))
        return cls(indices[perm[:subset_size]], indices[perm[subset_size:]])

    def promotions(self):
        return [r for r in self.log if r.promoted]

    def replay(self) -> "SamplingPools":
        """Initial pools reconstructed by undoing every logged promotion."""
        moved = np.array([r.sample_id for r in self.promotions()], dtype=np.int64)
        return SamplingPools(
            np.setdiff1d(self.train_subset, moved), np.union1d(self.reserve, moved)
        )

    def apply_log(self, log) -> "SamplingPools":
        """Pools after replaying ``log`` on top of these (initial) pools."""
        moved = np.array([r.sample_id for r in log if r.promoted], dtype=np.int64)
        if not np.isin(moved, self.reserve).all():
            raise ValueError("log promotes a sample that is not in the reserve")
        rounds = max((r.round for r in log), default=0)
        return SamplingPools(
            np.union1d(self.train_subset, moved), np.setdiff1d(self.reserve, moved), list(log), rounds
        )

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "sample_id", "epsilon_s", "mu", "sigma", "promoted"])
            for r in self.log:
                w.writerow([r.round, r.sample_id, repr(r.epsilon), repr(r.mu), repr(r.sigma), int(r.promoted)])

    @staticmethod
    def read_log(path) -> list:
        with open(path, newline="") as fh:
            return [
                PromotionRecord(int(row["round"]), int(row["sample_id"]), float(row["epsilon_s"]),
                                float(row["mu"]), float(row["sigma"]), bool(int(row["promoted"])))
                for row in csv.DictReader(fh)
            ]


def per_sample_force_error(model, clusters) -> np.ndarray:
    """Mean absolute force-component error for each cluster."""
    clusters = list(clusters)
    if any(c.forces is None for c in clusters):
        raise ValueError("force targets are required to score samples")
    _, f_pred = predict_all(model, clusters, with_forces=True)
    f_true = np.concatenate([c.forces for c in clusters])
    err = np.abs(f_pred - f_true).reshape(-1)
    counts = np.array([3 * c.n_atoms for c in clusters])
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return np.add.reduceat(err, starts) / counts


def validation_error_stats(model, validation) -> ErrorStats:
    """Mean and population standard deviation of per-sample force errors."""
    return ErrorStats.from_errors(per_sample_force_error(model, validation))


def promotion_decision(eps_s: float, stats: ErrorStats, p_tol: float) -> bool:
    """True when 1 - erf((eps_s - mu) / sigma) < p_tol.

    A zero spread is treated as the sigma -> 0+ limit: promote iff eps_s > mu.
    """
    if not 0.0 < p_tol < 1.0:
        raise ValueError("p_tol must lie in (0, 1)")
    if stats.sigma == 0.0:
        return bool(eps_s > stats.mu)
    return bool(1.0 - math.erf((eps_s - stats.mu) / stats.sigma) < p_tol)


def active_round(
    model,
    pools: SamplingPools,
    dataset,
    stats: ErrorStats,
    p_tol: float = 0.05,
    score_count: int = 256,
    seed: int = 0,
) -> SamplingPools:
    """Score a seeded random reserve subset and promote qualifying samples.

    Scored samples are logged in decreasing order of error, so within a
    round the hardest samples come first.
    """
    if len(pools.reserve) == 0:
        raise ValueError("reserve is empty")
    clusters = dataset.clusters if isinstance(dataset, ClusterSet) else list(dataset)
    rnd = pools.rounds + 1
    rng = np.random.default_rng([seed, rnd])
    k = min(score_count, len(pools.reserve))
    picked = np.sort(rng.choice(pools.reserve, size=k, replace=False))
    eps = per_sample_force_error(model, [clusters[i] for i in picked])
    order = np.lexsort((picked, -eps))
    log = list(pools.log)
    moved = []
    for o in order:
        ok = promotion_decision(float(eps[o]), stats, p_tol)
        log.append(PromotionRecord(rnd, int(picked[o]), float(eps[o]), stats.mu, stats.sigma, ok))
        if ok:
            moved.append(int(picked[o]))
    moved = np.array(moved, dtype=np.int64)
    return SamplingPools(
        np.union1d(pools.train_subset, moved), np.setdiff1d(pools.reserve, moved), log, rnd
    )


@dataclass(frozen=True)
class ActiveConfig:
    p_tol: float = 0.05
    round_period: int = 5
    score_count: int = 256
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.p_tol < 1.0:
            raise ValueError("p_tol must lie in (0, 1)")
        if self.round_period < 1 or self.score_count < 1:
            raise ValueError("round_period and score_count must be positive")


def active_training_loop(
    parent,
    dataset: ClusterSet,
    split: SplitIndices,
    pools: SamplingPools,
    loss_cfg=None,
    schedule=None,
    active: ActiveConfig = ActiveConfig(),
    log_path: Optional[str] = None,
    **kw,
):
    """Finetune on ``pools.train_subset`` with a sampling round every
    ``active.round_period`` epochs; returns (checkpoint, final pools)."""
    from .model import ModelParams
    from .training import LossConfig, Schedule, train

    loss_cfg = loss_cfg or LossConfig.with_forces()
    schedule = schedule or Schedule.finetune()
    val = [dataset.clusters[i] for i in split.val]
    state = {"pools": pools}

    def hook(epoch: int, params: ModelParams, train_idx):
        if epoch % active.round_period or len(state["pools"].reserve) == 0:
            return None
        stats = validation_error_stats(params, val)
        state["pools"] = active_round(
            params, state["pools"], dataset, stats, active.p_tol, active.score_count, active.seed
        )
        return state["pools"].train_subset

    ckpt = train(dataset, split, parent, loss_cfg, schedule, epoch_hook=hook,
                 train_indices=pools.train_subset, **kw)
    final = state["pools"]
    ckpt.meta["active"] = {
        "p_tol": active.p_tol,
        "round_period": active.round_period,
        "score_count": active.score_count,
        "seed": active.seed,
        "rounds": final.rounds,
        "promoted": len(final.promotions()),
        "train_subset": int(len(final.train_subset)),
    }
    if log_path is not None:
        final.write_log(log_path)
    return ckpt, final
