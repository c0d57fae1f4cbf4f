"""Velocity Verlet molecular dynamics with a Berendsen thermostat.

Units: Å, fs, amu, kcal/mol, K.  A force provider is any object with
``energy_forces(atomic_numbers, positions) -> (energy, forces)``; the model
and the surrogate surfaces both implement it.  Providers that also expose
``energy_forces_batch(atomic_numbers, positions_list)`` let
:func:`run_ensemble` advance all replicas in lock step.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .chemdata import MASSES, Cluster, parse_xyz

log = logging.getLogger(__name__)

# (kcal/mol/Å) / amu -> Å/fs^2
ACCEL_CONVERSION = 4.184e-4
BOLTZMANN = 0.0019872041  # kcal/mol/K


class UnstableDynamics(RuntimeError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class MDConfig:
    dt: float = 0.25
    n_steps: int = 10000
    temperature: float = 300.0
    tau: float = 50.0
    mode: str = "NVT"
    seed: int = 0
    snapshot_stride: int = 10
    max_force: float = 1000.0  # kcal/mol/Å; larger forces truncate the run
    lambda_clamp: tuple = (0.9, 1.1)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.mode not in ("NVT", "NVE"):
            raise ValueError(f"mode must be NVT or NVE, got {self.mode!r}")
        if self.mode == "NVT" and self.tau < self.dt:
            raise ValueError("tau must be >= dt in NVT mode")
        if self.snapshot_stride < 1:
            raise ValueError("snapshot_stride must be >= 1")
        object.__setattr__(self, "lambda_clamp", tuple(self.lambda_clamp))

    def to_dict(self):
        d = asdict(self)
        d["lambda_clamp"] = list(self.lambda_clamp)
        return d


@dataclass
class MDState:
    positions: np.ndarray
    velocities: np.ndarray
    masses: np.ndarray
    forces: np.ndarray
    potential_energy: float
    step: int = 0

    @property
    def temperature(self) -> float:
        return kinetic_temperature(self.velocities, self.masses)

    @property
    def kinetic_energy(self) -> float:
        return kinetic_energy(self.velocities, self.masses)


@dataclass
class Frame:
    step: int
    positions: np.ndarray
    velocities: np.ndarray
    energy: float
    forces: np.ndarray
    temperature: float
    kinetic_energy: float

    @property
    def total_energy(self) -> float:
        return self.energy + self.kinetic_energy


@dataclass
class Trajectory:
    atomic_numbers: np.ndarray
    frames: list
    config: MDConfig
    provenance: str
    unstable: bool = False
    reason: str = ""

    @property
    def steps(self) -> np.ndarray:
        return np.array([f.step for f in self.frames])

    @property
    def energies(self) -> np.ndarray:
        return np.array([f.energy for f in self.frames])

    @property
    def temperatures(self) -> np.ndarray:
        return np.array([f.temperature for f in self.frames])

    @property
    def total_energies(self) -> np.ndarray:
        return np.array([f.total_energy for f in self.frames])


def masses_for(atomic_numbers) -> np.ndarray:
    return np.array([MASSES[int(z)] for z in atomic_numbers])


def kinetic_energy(velocities, masses) -> float:
    v = np.asarray(velocities)
    return float(0.5 * np.sum(np.asarray(masses)[:, None] * v * v) / ACCEL_CONVERSION)


def kinetic_temperature(velocities, masses) -> float:
    """2 KE / (k_B N_dof) with N_dof = 3N - 3."""
    n = len(masses)
    dof = 3 * n - 3 if n > 1 else 3
    return 2.0 * kinetic_energy(velocities, masses) / (BOLTZMANN * dof)


def init_velocities(cluster, temperature: float, seed: int = 0) -> np.ndarray:
    """Maxwell-Boltzmann draw, COM momentum removed, rescaled to ``temperature``."""
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    z = cluster.atomic_numbers if isinstance(cluster, Cluster) else cluster
    m = masses_for(z)
    n = len(m)
    if temperature == 0:
        return np.zeros((n, 3))
    rng = np.random.default_rng(seed)
    sigma = np.sqrt(BOLTZMANN * temperature * ACCEL_CONVERSION / m)
    v = rng.standard_normal((n, 3)) * sigma[:, None]
    if n > 1:
        v -= (m[:, None] * v).sum(axis=0) / m.sum()
    t = kinetic_temperature(v, m)
    return v * np.sqrt(temperature / t) if t > 0 else v


def berendsen_scale(t_inst, t_target, dt, tau, clamp=(0.9, 1.1)) -> float:
    """Weak-coupling factor sqrt(1 + dt/tau (T0/T - 1)), clamped."""
    if t_inst <= 0:
        return clamp[1] if t_target > 0 else 1.0
    lam = np.sqrt(max(1.0 + (dt / tau) * (t_target / t_inst - 1.0), 0.0))
    return float(min(max(lam, clamp[0]), clamp[1]))


def _check_forces(forces, step, bound, state=None):
    if not np.all(np.isfinite(forces)):
        raise UnstableDynamics(f"non-finite force at step {step}", state)
    if bound is not None and np.abs(forces).max() > bound:
        raise UnstableDynamics(
            f"force {np.abs(forces).max():.3g} exceeds bound {bound} at step {step}", state
        )


def verlet_step(state: MDState, provider, dt: float, atomic_numbers=None, max_force=None) -> MDState:
    """Half kick, drift, force evaluation, half kick."""
    acc = state.forces * (ACCEL_CONVERSION / state.masses)[:, None]
    v_half = state.velocities + 0.5 * dt * acc
    x = state.positions + dt * v_half
    z = atomic_numbers if atomic_numbers is not None else getattr(provider, "atomic_numbers", None)
    e, f = provider.energy_forces(z, x)
    _check_forces(f, state.step + 1, max_force, state)
    v = v_half + 0.5 * dt * f * (ACCEL_CONVERSION / state.masses)[:, None]
    return MDState(x, v, state.masses, f, float(e), state.step + 1)


def _frame(state: MDState) -> Frame:
    return Frame(
        state.step, state.positions.copy(), state.velocities.copy(),
        state.potential_energy, state.forces.copy(), state.temperature, state.kinetic_energy,
    )


def run_md(provider, cluster: Cluster, cfg: MDConfig, velocities=None) -> Trajectory:
    """Integrate from ``cluster``; instability truncates and flags the run."""
    z = cluster.atomic_numbers
    m = masses_for(z)
    v0 = init_velocities(cluster, cfg.temperature, cfg.seed) if velocities is None else np.array(velocities)
    e, f = provider.energy_forces(z, cluster.positions)
    state = MDState(cluster.positions.copy(), v0, m, np.asarray(f), float(e), 0)
    name = getattr(provider, "name", type(provider).__name__)
    traj = Trajectory(z, [_frame(state)], cfg, name)
    try:
        _check_forces(state.forces, 0, cfg.max_force, state)
        for _ in range(cfg.n_steps):
            state = verlet_step(state, provider, cfg.dt, z, cfg.max_force)
            if cfg.mode == "NVT":
                lam = berendsen_scale(state.temperature, cfg.temperature, cfg.dt, cfg.tau, cfg.lambda_clamp)
                state.velocities = state.velocities * lam
            if state.step % cfg.snapshot_stride == 0:
                traj.frames.append(_frame(state))
    except UnstableDynamics as exc:
        log.info("trajectory truncated: %s", exc)
        traj.unstable = True
        traj.reason = str(exc)
    return traj


def run_ensemble(provider, cluster: Cluster, cfg: MDConfig, seeds: Sequence[int]) -> list:
    """One trajectory per seed; replicas advance together when the provider batches."""
    seeds = list(seeds)
    if not hasattr(provider, "energy_forces_batch"):
        return [run_md(provider, cluster, _with_seed(cfg, s)) for s in seeds]

    z = cluster.atomic_numbers
    m = masses_for(z)
    inv_m = (ACCEL_CONVERSION / m)[:, None]
    name = getattr(provider, "name", type(provider).__name__)
    trajs = [Trajectory(z, [], _with_seed(cfg, s), name) for s in seeds]
    x = [cluster.positions.copy() for _ in seeds]
    v = [init_velocities(cluster, cfg.temperature, s) for s in seeds]
    es, fs = provider.energy_forces_batch(z, x)
    live = []
    for k in range(len(seeds)):
        st = MDState(x[k], v[k], m, fs[k], float(es[k]), 0)
        trajs[k].frames.append(_frame(st))
        if not np.all(np.isfinite(fs[k])) or np.abs(fs[k]).max() > cfg.max_force:
            trajs[k].unstable, trajs[k].reason = True, "initial force out of bounds"
        else:
            live.append(k)
    states = {k: MDState(x[k], v[k], m, fs[k], float(es[k]), 0) for k in live}
    for step in range(1, cfg.n_steps + 1):
        if not live:
            break
        v_half = {k: states[k].velocities + 0.5 * cfg.dt * states[k].forces * inv_m for k in live}
        new_x = {k: states[k].positions + cfg.dt * v_half[k] for k in live}
        es, fs = provider.energy_forces_batch(z, [new_x[k] for k in live])
        still = []
        for k, e, f in zip(live, es, fs):
            try:
                _check_forces(f, step, cfg.max_force, states[k])
            except UnstableDynamics as exc:
                trajs[k].unstable, trajs[k].reason = True, str(exc)
                continue
            vel = v_half[k] + 0.5 * cfg.dt * f * inv_m
            st = MDState(new_x[k], vel, m, f, float(e), step)
            if cfg.mode == "NVT":
                lam = berendsen_scale(st.temperature, cfg.temperature, cfg.dt, cfg.tau, cfg.lambda_clamp)
                st.velocities = st.velocities * lam
            states[k] = st
            if step % cfg.snapshot_stride == 0:
                trajs[k].frames.append(_frame(st))
            still.append(k)
        live = still
    return trajs


def _with_seed(cfg: MDConfig, seed: int) -> MDConfig:
    d = cfg.to_dict()
    d["seed"] = int(seed)
    return MDConfig(**d)


def energy_drift(traj: Trajectory, window: float = 0.5) -> float:
    """Relative secular drift of total energy.

    Difference between block means of total energy over the first and last
    ``window`` fraction of frames, divided by |E_total(0)|; bounded
    oscillations of the integrator average out.  The default compares the
    two halves of the run.
    """
    if not 0.0 < window <= 0.5:
        raise ValueError("window must lie in (0, 0.5]")
    e = traj.total_energies
    k = max(1, int(round(window * len(e))))
    return float(abs(e[-k:].mean() - e[:k].mean()) / abs(e[0]))


def max_energy_deviation(traj: Trajectory) -> float:
    e = traj.total_energies
    return float(np.abs(e - e[0]).max() / abs(e[0]))


# ------------------------------------------------------------ validation


@dataclass
class ValidationResult:
    steps: np.ndarray
    model_energies: np.ndarray
    reference_energies: np.ndarray
    verdict: str
    provenance: str = ""
    reference: str = ""

    @property
    def valid(self) -> bool:
        return self.verdict == "valid"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "E_nnp", "E_reference"])
            for s, a, b in zip(self.steps, self.model_energies, self.reference_energies):
                w.writerow([int(s), repr(float(a)), repr(float(b))])


def validate_trajectory(traj: Trajectory, reference) -> ValidationResult:
    """Re-score every frame with ``reference``; valid iff all energies < 0.

    Truncated (unstable) trajectories get the verdict ``unstable``.
    """
    ref = np.array([reference.energy_forces(traj.atomic_numbers, f.positions)[0] for f in traj.frames])
    if traj.unstable:
        verdict = "unstable"
    elif np.all(ref < 0.0):
        verdict = "valid"
    else:
        verdict = "invalid"
    return ValidationResult(
        traj.steps, traj.energies, ref, verdict, traj.provenance, getattr(reference, "name", "")
    )


# -------------------------------------------------------------------- I/O


def trajectory_to_xyz(traj: Trajectory) -> str:
    from .chemdata import ELEMENTS

    lines = []
    for f in traj.frames:
        lines.append(str(len(traj.atomic_numbers)))
        lines.append(f"step={f.step} energy={f.energy!r} temperature={f.temperature!r}")
        for a, z in enumerate(traj.atomic_numbers):
            cols = [ELEMENTS[int(z)]] + [repr(float(c)) for c in f.positions[a]]
            cols += [repr(float(c)) for c in f.forces[a]]
            lines.append(" ".join(cols))
    return "\n".join(lines) + "\n"


def save_trajectory(traj: Trajectory, path, verdict: Optional[str] = None, extra: Optional[dict] = None) -> None:
    path = Path(path)
    path.write_text(trajectory_to_xyz(traj))
    sidecar = {
        "config": traj.config.to_dict(),
        "provenance": traj.provenance,
        "unstable": traj.unstable,
        "reason": traj.reason,
        "verdict": verdict or ("unstable" if traj.unstable else "unvalidated"),
        "n_frames": len(traj.frames),
        "velocities_final": traj.frames[-1].velocities.tolist(),
        **(extra or {}),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_trajectory(path) -> Trajectory:
    """Frames (positions, energies, forces) plus sidecar metadata; velocities are not stored."""
    path = Path(path)
    cs = parse_xyz(path.read_text())
    meta = {}
    side = path.with_suffix(".json")
    if side.exists():
        meta = json.loads(side.read_text())
    cfg = MDConfig(**meta["config"]) if "config" in meta else MDConfig()
    frames = []
    for c in cs:
        frames.append(
            Frame(int(c.info.get("step", 0)), c.positions.copy(), np.zeros_like(c.positions),
                  c.energy, c.forces.copy() if c.forces is not None else np.zeros_like(c.positions),
                  float(c.info.get("temperature", "nan")), float("nan"))
        )
    return Trajectory(cs[0].atomic_numbers, frames, cfg, meta.get("provenance", ""),
                      meta.get("unstable", False), meta.get("reason", ""))
