"""Test-set metrics: per-water energy error, force magnitude and angle errors."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .chemdata import batch_clusters

ZERO_NORM = 1e-12


def e_h2o_error(e_pred, e_true, n_waters):
    """|E_pred - E_true| / n_waters."""
    n_waters = np.asarray(n_waters)
    if np.any(n_waters < 1):
        raise ValueError("n_waters must be >= 1")
    out = np.abs(np.asarray(e_pred, dtype=np.float64) - e_true) / n_waters
    return float(out) if out.ndim == 0 else out


def f_mag_error(f_pred, f_true):
    """Signed per-atom norm difference ||F_pred|| - ||F_true||."""
    return np.linalg.norm(np.atleast_2d(f_pred), axis=-1) - np.linalg.norm(np.atleast_2d(f_true), axis=-1)


def f_ang_error(f_pred, f_true):
    """Per-atom angle between force directions divided by pi, in [0, 1].

    Atoms where either force has norm below 1e-12 get NaN (undefined angle).
    """
    a = np.atleast_2d(np.asarray(f_pred, dtype=np.float64))
    b = np.atleast_2d(np.asarray(f_true, dtype=np.float64))
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    ok = (na >= ZERO_NORM) & (nb >= ZERO_NORM)
    cos = np.einsum("ij,ij->i", a, b) / np.where(ok, na * nb, 1.0)
    ang = np.arccos(np.clip(cos, -1.0, 1.0)) / np.pi
    return np.where(ok, ang, np.nan)


@dataclass
class MetricsReport:
    test_tag: str
    model: str
    n_samples: int
    e_h2o_mae: float
    e_h2o_rmse: float
    f_mag_mae: Optional[float] = None
    f_mag_bias: Optional[float] = None
    f_mag_median: Optional[float] = None
    f_ang_mean: Optional[float] = None
    f_ang_median: Optional[float] = None
    undefined_angle: int = 0
    n_atoms: int = 0
    notes: list = field(default_factory=list)
    e_h2o_pred: list = field(default_factory=list, repr=False)
    e_h2o_true: list = field(default_factory=list, repr=False)

    def to_dict(self, include_values: bool = False) -> dict:
        d = asdict(self)
        if not include_values:
            d.pop("e_h2o_pred")
            d.pop("e_h2o_true")
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(**kw), indent=2, sort_keys=True)


def predict_all(model, clusters, with_forces=True, batch_size=64):
    """Energies and (optionally) forces from params or any provider."""
    from .model import ModelParams, predict

    if isinstance(model, ModelParams):
        es, fs = [], []
        for k in range(0, len(clusters), batch_size):
            e, f = predict(model, clusters[k : k + batch_size], with_forces=with_forces)
            es.append(e)
            if with_forces:
                fs.append(f)
        return np.concatenate(es), (np.concatenate(fs) if with_forces else None)
    e, f = model.predict(clusters)
    return np.asarray(e), (np.asarray(f) if with_forces else None)


def metrics_from_arrays(e_pred, e_true, n_waters, f_pred=None, f_true=None, test_tag="", model="") -> MetricsReport:
    e_pred = np.asarray(e_pred, dtype=np.float64)
    e_true = np.asarray(e_true, dtype=np.float64)
    err = e_h2o_error(e_pred, e_true, n_waters)
    err = np.atleast_1d(err)
    signed = (e_pred - e_true) / np.asarray(n_waters)
    rep = MetricsReport(
        test_tag=test_tag,
        model=model,
        n_samples=len(e_true),
        e_h2o_mae=float(np.mean(err)),
        e_h2o_rmse=float(np.sqrt(np.mean(signed**2))),
        e_h2o_pred=(e_pred / np.asarray(n_waters)).tolist(),
        e_h2o_true=(e_true / np.asarray(n_waters)).tolist(),
    )
    if f_pred is not None and f_true is not None:
        mag = f_mag_error(f_pred, f_true)
        ang = f_ang_error(f_pred, f_true)
        good = ~np.isnan(ang)
        rep.n_atoms = int(len(mag))
        rep.f_mag_mae = float(np.mean(np.abs(mag)))
        rep.f_mag_bias = float(np.mean(mag))
        rep.f_mag_median = float(np.median(np.abs(mag)))
        rep.undefined_angle = int((~good).sum())
        if good.any():
            rep.f_ang_mean = float(np.mean(ang[good]))
            rep.f_ang_median = float(np.median(ang[good]))
    return rep


def evaluate_model(model, test_set, tag: str = "", with_forces: Optional[bool] = None) -> MetricsReport:
    """All metrics over ``test_set`` for model params or a provider.

    Force metrics are computed when every test cluster carries forces,
    unless ``with_forces`` says otherwise.
    """
    clusters = list(test_set)
    if not clusters:
        raise ValueError("empty test set")
    has_f = all(c.forces is not None for c in clusters)
    notes = []
    if with_forces and not has_f:
        notes.append("force metrics omitted: test set has no force targets")
    want_f = has_f if with_forces is None else (with_forces and has_f)
    e_pred, f_pred = predict_all(model, clusters, want_f)
    full = batch_clusters(clusters)
    name = getattr(model, "name", None)
    if name is None and hasattr(model, "fingerprint"):
        name = f"nnp:{model.fingerprint()}"
    tag = tag or getattr(test_set, "tags", {}).get("tag", "")
    rep = metrics_from_arrays(
        e_pred, full.energies, full.n_waters,
        f_pred if want_f else None, full.forces if want_f else None,
        test_tag=tag, model=name or "",
    )
    rep.notes.extend(notes)
    return rep


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def mean(self) -> float:
        return float((self.centers * self.counts).sum() / self.counts.sum())


def energy_histogram(values, bins=60, value_range=None) -> Histogram:
    """Fixed-width histogram of per-water energies.

    ``bins`` may be a count or explicit edges; ``value_range`` defaults to
    the data min/max.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("need at least one value")
    if np.ndim(bins) == 0 and value_range is None:
        lo, hi = values.min(), values.max()
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        value_range = (lo, hi)
    counts, edges = np.histogram(values, bins=bins, range=value_range)
    return Histogram(edges, counts)


def comparison_histograms(series: dict, bins: int = 60) -> dict:
    """Histograms for several distributions over the union of their ranges."""
    allv = np.concatenate([np.asarray(v) for v in series.values()])
    lo, hi = allv.min(), allv.max()
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    return {k: energy_histogram(v, edges) for k, v in series.items()}


def _fmt(x, digits=4):
    return "n/a" if x is None else f"{x:.{digits}f}"


def markdown_table(rows, kind: str = "forces") -> str:
    """Markdown comparison table of metric reports.

    ``rows`` are dicts with keys host, initialization, n_train, train_set,
    test_set and a ``report`` (MetricsReport or dict).
    """
    if kind == "forces":
        head = ["Host", "Dataset", "Initialization", "N_train", "E_H2O", "F_mag", "F_ang"]
    else:
        head = ["Host", "Initialization", "Train Set", "Test Set", "MAE", "RMSE"]
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join("---" for _ in head) + "|"]
    for r in rows:
        rep = r["report"]
        rep = rep.to_dict() if hasattr(rep, "to_dict") else rep
        if kind == "forces":
            cells = [r.get("host", ""), rep.get("test_tag", r.get("test_set", "")), r.get("initialization", ""),
                     str(r.get("n_train", "")), _fmt(rep["e_h2o_mae"]), _fmt(rep.get("f_mag_mae"), 2),
                     _fmt(rep.get("f_ang_mean"), 3)]
        else:
            cells = [r.get("host", ""), r.get("initialization", ""), r.get("train_set", ""),
                     r.get("test_set", rep.get("test_tag", "")), _fmt(rep["e_h2o_mae"]), _fmt(rep["e_h2o_rmse"])]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
