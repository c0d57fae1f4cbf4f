"""SchNet-style energy model with exact position and parameter gradients."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import SegmentIndex, Tensor
from .chemdata import Batch, Cluster, batch_clusters


@dataclass(frozen=True)
class ModelConfig:
    n_atom_features: int = 64
    n_interactions: int = 3
    n_rbf: int = 32
    cutoff: float = 6.0
    rbf_width: Optional[float] = None  # defaults to cutoff / n_rbf
    readout_hidden: int = 32
    element_vocabulary: tuple = (1, 8)
    energy_scale: float = 1.0

    def __post_init__(self):
        for name in ("n_atom_features", "n_interactions", "n_rbf", "readout_hidden"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")
        if self.rbf_width is None:
            object.__setattr__(self, "rbf_width", self.cutoff / self.n_rbf)
        if self.rbf_width <= 0:
            raise ValueError("rbf_width must be positive")
        object.__setattr__(self, "element_vocabulary", tuple(sorted(int(z) for z in self.element_vocabulary)))

    @property
    def gamma(self) -> float:
        return 1.0 / (2.0 * self.rbf_width**2)

    @property
    def centers(self) -> np.ndarray:
        return np.linspace(0.0, self.cutoff, self.n_rbf)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["element_vocabulary"] = list(self.element_vocabulary)
        return d

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        d = dict(d)
        d["element_vocabulary"] = tuple(d.get("element_vocabulary", (1, 8)))
        return cls(**d)


@dataclass
class ModelParams:
    """Learnable arrays keyed by name, plus the architecture."""

    config: ModelConfig
    arrays: dict = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def names(self):
        return list(self.arrays)

    def fingerprint(self) -> str:
        h = hashlib.sha256(repr(sorted(self.config.to_dict().items())).encode())
        for name in sorted(self.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.arrays[name], dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def element_index(self, atomic_numbers) -> np.ndarray:
        vocab = np.array(self.config.element_vocabulary)
        pos = np.searchsorted(vocab, atomic_numbers)
        pos = np.clip(pos, 0, len(vocab) - 1)
        bad = vocab[pos] != atomic_numbers
        if np.any(bad):
            missing = sorted(set(np.asarray(atomic_numbers)[bad].tolist()))
            raise ValueError(f"elements {missing} not in model vocabulary {list(vocab)}")
        return pos


def _glorot(rng, fan_in, fan_out, gain=1.0):
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(config: ModelConfig, seed: int = 0, energy_offset=0.0) -> ModelParams:
    """Deterministic initialization.

    ``energy_offset`` seeds the per-element bias: a scalar applies to every
    element, a mapping gives per-element values (kcal/mol per atom).  The last
    readout layer is scaled down so initial energies sit near the offset.
    """
    rng = np.random.default_rng(seed)
    F, K, H = config.n_atom_features, config.n_rbf, config.readout_hidden
    n_el = len(config.element_vocabulary)
    a = {"embedding": rng.standard_normal((n_el, F)) / np.sqrt(F)}
    for t in range(config.n_interactions):
        p = f"interaction{t}."
        a[p + "filter_w1"] = _glorot(rng, K, F)
        a[p + "filter_b1"] = np.zeros(F)
        a[p + "filter_w2"] = _glorot(rng, F, F)
        a[p + "filter_b2"] = np.zeros(F)
        a[p + "in2f"] = _glorot(rng, F, F)
        a[p + "f2out_w"] = _glorot(rng, F, F)
        a[p + "f2out_b"] = np.zeros(F)
        a[p + "dense_w"] = _glorot(rng, F, F)
        a[p + "dense_b"] = np.zeros(F)
    a["readout_w1"] = _glorot(rng, F, H)
    a["readout_b1"] = np.zeros(H)
    a["readout_w2"] = _glorot(rng, H, 1, gain=0.1)
    a["readout_b2"] = np.zeros(1)
    if isinstance(energy_offset, dict):
        a["atom_offset"] = np.array(
            [[float(energy_offset.get(z, 0.0))] for z in config.element_vocabulary]
        )
    else:
        a["atom_offset"] = np.full((n_el, 1), float(energy_offset))
    return ModelParams(config, a)


def mean_energy_per_atom(clusters) -> float:
    e = np.array([c.energy for c in clusters if c.energy is not None])
    n = np.array([c.n_atoms for c in clusters if c.energy is not None])
    if len(e) == 0:
        return 0.0
    return float(e.sum() / n.sum())


# ----------------------------------------------------------------- pieces


def shifted_softplus(x):
    """ln(0.5 e^x + 0.5), evaluated stably."""
    if isinstance(x, Tensor):
        return ad.shifted_softplus(x)
    out = ad.np_shifted_softplus(x)
    return float(out) if np.ndim(out) == 0 else out


def rbf_expand(d, config: ModelConfig) -> np.ndarray:
    """Gaussians exp(-gamma (d - mu_k)^2) on evenly spaced centers in [0, cutoff]."""
    d = np.asarray(d, dtype=np.float64)
    return np.exp(-config.gamma * (d[..., None] - config.centers) ** 2)


def cosine_cutoff(d, cutoff):
    d = np.asarray(d, dtype=np.float64)
    return np.where(d < cutoff, 0.5 * (np.cos(np.pi * d / cutoff) + 1.0), 0.0)


def _dense(x, w, b=None):
    y = ad.matmul(x, w)
    return y if b is None else ad.add(y, b)


# ---------------------------------------------------------------- forward


@dataclass
class Evaluation:
    """Result of a forward pass with the graph kept for reverse passes."""

    energy: Tensor
    positions: Tensor
    params: dict
    batch: Batch
    _dedr: Optional[Tensor] = None

    @property
    def energies(self) -> np.ndarray:
        return self.energy.value

    def position_gradient(self, create_graph=False) -> Tensor:
        if self._dedr is None or (create_graph and not self._dedr.requires_grad):
            (self._dedr,) = ad.grad(self.energy, [self.positions], create_graph=create_graph)
        return self._dedr

    def forces(self) -> np.ndarray:
        return -self.position_gradient().value


def energy_forward(
    params: ModelParams,
    batch: Batch,
    track_positions: bool = False,
    track_params: bool = False,
) -> Evaluation:
    """Per-cluster energies for ``batch``, with the graph retained."""
    cfg = params.config
    el = params.element_index(batch.atomic_numbers)
    n_atoms = batch.n_atoms
    theta = {k: Tensor(v, requires_grad=track_params) for k, v in params.arrays.items()}
    R = Tensor(batch.positions, requires_grad=track_positions)

    # filters depend only on |r_ij|, so evaluate them once per unordered pair
    i, j = batch.pairs(cfg.cutoff)
    half = i < j
    i, j = i[half], j[half]
    first = SegmentIndex(i, n_atoms)
    second = SegmentIndex(j, n_atoms)
    elem = SegmentIndex(el, len(cfg.element_vocabulary))
    member = SegmentIndex(batch.membership, batch.n_clusters)

    vec = ad.sub(ad.gather(R, second), ad.gather(R, first))
    d = ad.sqrt(ad.sum_(ad.mul(vec, vec), axis=1, keepdims=True))  # (P, 1)
    diff = ad.sub(d, cfg.centers[None, :])
    rbf = ad.exp(ad.mul(-cfg.gamma, ad.mul(diff, diff)))
    fcut = ad.mul(0.5, ad.add(ad.cos(ad.mul(np.pi / cfg.cutoff, d)), 1.0))

    h = ad.gather(theta["embedding"], elem)
    for t in range(cfg.n_interactions):
        p = f"interaction{t}."
        w = shifted_softplus(_dense(rbf, theta[p + "filter_w1"], theta[p + "filter_b1"]))
        w = ad.mul(_dense(w, theta[p + "filter_w2"], theta[p + "filter_b2"]), fcut)
        x = _dense(h, theta[p + "in2f"])
        msg = ad.add(
            ad.segment_sum(ad.mul(ad.gather(x, second), w), first),
            ad.segment_sum(ad.mul(ad.gather(x, first), w), second),
        )
        v = shifted_softplus(_dense(msg, theta[p + "f2out_w"], theta[p + "f2out_b"]))
        h = ad.add(h, _dense(v, theta[p + "dense_w"], theta[p + "dense_b"]))

    o = shifted_softplus(_dense(h, theta["readout_w1"], theta["readout_b1"]))
    o = _dense(o, theta["readout_w2"], theta["readout_b2"])
    if cfg.energy_scale != 1.0:
        o = ad.mul(o, cfg.energy_scale)
    atom_e = ad.add(o, ad.gather(theta["atom_offset"], elem))
    energy = ad.reshape(ad.segment_sum(atom_e, member), (batch.n_clusters,))
    return Evaluation(energy, R, theta, batch)


def _as_batch(x) -> Batch:
    if isinstance(x, Batch):
        return x
    if isinstance(x, Cluster):
        return batch_clusters([x])
    return batch_clusters(list(x))


def predict_energy(params: ModelParams, clusters) -> np.ndarray:
    with ad.no_record():
        return energy_forward(params, _as_batch(clusters)).energies.copy()


def forces(params: ModelParams, cluster) -> np.ndarray:
    """-dE/dR for a cluster (or all atoms of a batch)."""
    ev = energy_forward(params, _as_batch(cluster), track_positions=True)
    return ev.forces()


def predict(params: ModelParams, clusters, with_forces=True):
    batch = _as_batch(clusters)
    if not with_forces:
        return predict_energy(params, batch), None
    ev = energy_forward(params, batch, track_positions=True)
    return ev.energies.copy(), ev.forces()


def param_gradients(
    params: ModelParams,
    batch: Batch,
    energy_adjoint,
    force_adjoint=None,
    evaluation: Optional[Evaluation] = None,
) -> dict:
    """Gradient of sum(adjE * E) + sum(adjF * F) with respect to every parameter.

    The force term differentiates through -dE/dR (reverse over reverse).
    """
    energy_adjoint = np.asarray(energy_adjoint, dtype=np.float64)
    if energy_adjoint.shape != (batch.n_clusters,):
        raise ValueError(
            f"energy adjoint shape {energy_adjoint.shape} != ({batch.n_clusters},)"
        )
    use_forces = force_adjoint is not None and np.any(force_adjoint)
    if force_adjoint is not None:
        force_adjoint = np.asarray(force_adjoint, dtype=np.float64)
        if force_adjoint.shape != (batch.n_atoms, 3):
            raise ValueError(f"force adjoint shape {force_adjoint.shape} != ({batch.n_atoms}, 3)")
    if (
        evaluation is None
        or not evaluation.energy.requires_grad
        or (use_forces and not evaluation.positions.requires_grad)
    ):
        evaluation = energy_forward(params, batch, track_positions=use_forces, track_params=True)
    theta = evaluation.params
    names = list(theta)
    scalar = ad.sum_(ad.mul(evaluation.energy, energy_adjoint))
    if use_forces:
        dedr = evaluation.position_gradient(create_graph=True)
        scalar = ad.sub(scalar, ad.sum_(ad.mul(dedr, force_adjoint)))
    grads = ad.grad(scalar, [theta[n] for n in names])
    return {n: g.value for n, g in zip(names, grads)}


class NNPProvider:
    """Force provider backed by model parameters."""

    def __init__(self, params: ModelParams, name: Optional[str] = None):
        self.params = params
        self.name = name or f"nnp:{params.fingerprint()}"

    def energy_forces(self, atomic_numbers, positions):
        pos = np.asarray(positions, dtype=np.float64)
        n = len(pos)
        batch = Batch(np.asarray(atomic_numbers), pos, np.zeros(n, dtype=np.int64),
                   np.array([n]), None, None, np.array([max(n // 3, 1)]))
        ev = energy_forward(self.params, batch, track_positions=True)
        return float(ev.energies[0]), ev.forces()

    def energy_forces_batch(self, atomic_numbers, positions_list):
        """Energies and forces for several copies of one composition at once."""
        z = np.asarray(atomic_numbers)
        n, k = len(z), len(positions_list)
        batch = Batch(np.tile(z, k), np.concatenate(positions_list).astype(np.float64),
                      np.repeat(np.arange(k), n), np.full(k, n), None, None, np.full(k, max(n // 3, 1)))
        ev = energy_forward(self.params, batch, track_positions=True)
        return ev.energies.copy(), list(ev.forces().reshape(k, n, 3))

    def predict(self, clusters):
        return predict(self.params, clusters, with_forces=True)
