"""Analytic water-cluster surfaces used as reference potentials.

Surface A is a flexible point-charge water model: harmonic O-H bonds and
H-O-H angle, O-O Lennard-Jones, intermolecular Coulomb, and a short-range
r^-12 wall on intermolecular pairs involving hydrogen (keeps bare charges
from collapsing).  All intermolecular terms of a molecule pair are
multiplied by a cubic switch of the O-O distance, so energies are exactly
zero once molecules are further apart than ``switch_off``.

Surface B is a perturbed copy of A used for transfer experiments:

    E_B = a * E_A + b * sum_m w_m + c * sum_{m<n} s(R_mn) * LJ(R_mn; eps, sigma_b)

where ``w_m`` is a smooth indicator that molecule m has a neighbor.
Energies are kcal/mol, distances Å.
"""

from __future__ import annotations

import logging
from functools import lru_cache
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .chemdata import Cluster, ClusterSet, water_cluster

log = logging.getLogger(__name__)

COULOMB = 332.0637  # kcal Å / (mol e^2)


@dataclass(frozen=True)
class SurrogateSpec:
    k_bond: float = 450.0  # kcal/mol/Å^2, E = k/2 (r - r0)^2
    r0: float = 0.9572
    k_angle: float = 55.0  # kcal/mol/rad^2, E = k/2 (theta - theta0)^2
    theta0_deg: float = 104.52
    lj_epsilon: float = 0.1521
    lj_sigma: float = 3.1507
    q_o: float = -0.8340
    q_h: float = 0.4170
    rep_epsilon: float = 0.1
    rep_sigma: float = 1.6
    switch_on: float = 8.0
    switch_off: float = 9.0
    b_scale: float = 1.05
    b_offset: float = 0.3  # kcal/mol per bound water
    b_coupling: float = 0.1
    b_sigma: float = 3.3

    def __post_init__(self):
        for name in ("k_bond", "k_angle", "lj_epsilon", "lj_sigma", "r0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if abs(self.q_o + 2 * self.q_h) > 1e-12:
            raise ValueError("molecular charges must sum to zero")
        if not 0 < self.switch_on < self.switch_off:
            raise ValueError("need 0 < switch_on < switch_off")

    @property
    def theta0(self) -> float:
        return np.deg2rad(self.theta0_deg)

    @property
    def charges(self) -> np.ndarray:
        return np.array([self.q_o, self.q_h, self.q_h])

    def to_dict(self) -> dict:
        return asdict(self)


def lj_energy(r, epsilon, sigma):
    """4 eps [(sigma/r)^12 - (sigma/r)^6]."""
    sr6 = (sigma / np.asarray(r, dtype=np.float64)) ** 6
    return 4.0 * epsilon * (sr6 * sr6 - sr6)


def _lj_de_dr(r, epsilon, sigma):
    sr6 = (sigma / r) ** 6
    return -24.0 * epsilon * (2.0 * sr6 * sr6 - sr6) / r


def switch(r, r_on, r_off):
    """Cubic switch: 1 below r_on, 0 above r_off; returns (s, ds/dr)."""
    r = np.asarray(r, dtype=np.float64)
    x = np.clip((r - r_on) / (r_off - r_on), 0.0, 1.0)
    s = 1.0 - 3.0 * x**2 + 2.0 * x**3
    ds = (-6.0 * x + 6.0 * x**2) / (r_off - r_on)
    return s, ds


def _molecules(cluster_or_positions):
    if isinstance(cluster_or_positions, Cluster):
        if not cluster_or_positions.is_water:
            raise ValueError("surrogate surfaces need O,H,H-ordered water clusters")
        pos = cluster_or_positions.positions
    else:
        pos = np.asarray(cluster_or_positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or len(pos) % 3:
            raise ValueError("positions must be (3 n_waters, 3)")
    return pos.reshape(-1, 3, 3)


# ------------------------------------------------------------ intramolecular


def _intra(spec: SurrogateSpec, mol):
    o, h1, h2 = mol[:, 0], mol[:, 1], mol[:, 2]
    r1, r2 = h1 - o, h2 - o
    d1 = np.linalg.norm(r1, axis=1)
    d2 = np.linalg.norm(r2, axis=1)
    cos_t = np.einsum("ij,ij->i", r1, r2) / (d1 * d2)
    cos_t = np.clip(cos_t, -1.0, 1.0)
    theta = np.arccos(cos_t)
    e = 0.5 * spec.k_bond * ((d1 - spec.r0) ** 2 + (d2 - spec.r0) ** 2)
    e = e + 0.5 * spec.k_angle * (theta - spec.theta0) ** 2

    g = np.zeros_like(mol)
    gb1 = (spec.k_bond * (d1 - spec.r0) / d1)[:, None] * r1
    gb2 = (spec.k_bond * (d2 - spec.r0) / d2)[:, None] * r2
    # d theta / d cos = -1/sin
    sin_t = np.sqrt(np.maximum(1.0 - cos_t**2, 1e-300))
    de_dcos = -spec.k_angle * (theta - spec.theta0) / sin_t
    dcos_dh1 = r2 / (d1 * d2)[:, None] - (cos_t / d1**2)[:, None] * r1
    dcos_dh2 = r1 / (d1 * d2)[:, None] - (cos_t / d2**2)[:, None] * r2
    ga1 = de_dcos[:, None] * dcos_dh1
    ga2 = de_dcos[:, None] * dcos_dh2
    g[:, 1] = gb1 + ga1
    g[:, 2] = gb2 + ga2
    g[:, 0] = -(g[:, 1] + g[:, 2])
    return e.sum(), g


# ------------------------------------------------------------ intermolecular


def _pair_terms(spec: SurrogateSpec, mol):
    """Unswitched pair energies u_mn and their gradients, for all m < n."""
    n = len(mol)
    m_idx, n_idx = np.triu_indices(n, k=1)
    a = mol[m_idx][:, :, None, :]  # (P, 3, 1, 3)
    b = mol[n_idx][:, None, :, :]  # (P, 1, 3, 3)
    vec = b - a  # (P, 3, 3, 3) from atom a of m to atom b of n
    r = np.linalg.norm(vec, axis=-1)  # (P, 3, 3)
    qq = COULOMB * np.outer(spec.charges, spec.charges)
    u = (qq / r).sum(axis=(1, 2))
    du = -qq / r**2
    r_oo = r[:, 0, 0]
    u += lj_energy(r_oo, spec.lj_epsilon, spec.lj_sigma)
    lj_d = _lj_de_dr(r_oo, spec.lj_epsilon, spec.lj_sigma)
    wall = np.ones((3, 3))
    wall[0, 0] = 0.0
    sr12 = (spec.rep_sigma / r) ** 12
    u += (spec.rep_epsilon * sr12 * wall).sum(axis=(1, 2))
    du = du - 12.0 * spec.rep_epsilon * sr12 / r * wall
    du[:, 0, 0] += lj_d
    # gradient wrt atom b of n is du * unit(vec); wrt atom a of m is the negative
    gvec = (du / r)[..., None] * vec
    return m_idx, n_idx, u, gvec, r_oo, vec[:, 0, 0]


def _inter(spec: SurrogateSpec, mol):
    g = np.zeros_like(mol)
    if len(mol) < 2:
        return 0.0, g
    m_idx, n_idx, u, gvec, r_oo, v_oo = _pair_terms(spec, mol)
    s, ds = switch(r_oo, spec.switch_on, spec.switch_off)
    e = float((s * u).sum())
    gsw = s[:, None, None, None] * gvec
    np.add.at(g, n_idx, gsw.sum(axis=1))
    np.add.at(g, m_idx, -gsw.sum(axis=2))
    go = ((u * ds) / r_oo)[:, None] * v_oo
    np.add.at(g[:, 0], n_idx, go)
    np.add.at(g[:, 0], m_idx, -go)
    return e, g


def _surface_a_numpy(spec, mol):
    e1, g1 = _intra(spec, mol)
    e2, g2 = _inter(spec, mol)
    return float(e1 + e2), g1 + g2


@lru_cache(maxsize=32)
def _kernel_args(spec):
    return (
        spec.k_bond, spec.r0, spec.k_angle, spec.theta0, spec.lj_epsilon, spec.lj_sigma,
        spec.charges, spec.rep_epsilon, spec.rep_sigma, spec.switch_on, spec.switch_off, COULOMB,
    )


def _surface_a_compiled(spec, mol):
    e, g = _kernels.surface_a(np.ascontiguousarray(mol.reshape(-1, 3)), *_kernel_args(spec))
    return float(e), g.reshape(mol.shape)


try:
    from . import _kernels
except ImportError:  # pragma: no cover - numba missing
    _kernels = None

BACKEND = "compiled" if _kernels is not None else "numpy"


def _surface_a(spec, mol):
    if BACKEND == "compiled":
        return _surface_a_compiled(spec, mol)
    return _surface_a_numpy(spec, mol)


def _surface_b_extra(spec, mol):
    """Binding-indicator offset and the shifted O-O term of surface B."""
    n = len(mol)
    g = np.zeros_like(mol)
    if n < 2:
        return 0.0, g
    o = mol[:, 0]
    vec = o[None, :, :] - o[:, None, :]  # vec[m, n] = O_n - O_m
    r = np.linalg.norm(vec, axis=-1)
    np.fill_diagonal(r, np.inf)
    s, ds = switch(r, spec.switch_on, spec.switch_off)
    np.fill_diagonal(s, 0.0)
    np.fill_diagonal(ds, 0.0)

    # w_m = 1 - prod_{n != m} (1 - s_mn); derivative via exclusive products
    one_minus = 1.0 - s
    ones = np.ones((n, 1))
    prefix = np.cumprod(np.hstack([ones, one_minus[:, :-1]]), axis=1)
    suffix = np.cumprod(np.hstack([ones, one_minus[:, ::-1][:, :-1]]), axis=1)[:, ::-1]
    excl = prefix * suffix
    w = 1.0 - prefix[:, -1] * one_minus[:, -1]
    e = spec.b_offset * w.sum()
    # dE/dr_mn from w_m (and symmetrically w_n): b * excl[m, n] * ds_mn
    de_dr = spec.b_offset * (excl * ds + (excl * ds).T)

    iu = np.triu_indices(n, k=1)
    rr = r[iu]
    s_u, ds_u = s[iu], ds[iu]
    lj = lj_energy(rr, spec.lj_epsilon, spec.b_sigma)
    e += spec.b_coupling * float((s_u * lj).sum())
    de_pair = spec.b_coupling * (ds_u * lj + s_u * _lj_de_dr(rr, spec.lj_epsilon, spec.b_sigma))
    full = np.zeros((n, n))
    full[iu] = de_pair
    de_dr = de_dr * np.triu(np.ones((n, n)), k=1) + full
    # r_mn depends on O_n - O_m for m < n
    coeff = np.where(np.isfinite(r), de_dr / np.where(np.isfinite(r), r, 1.0), 0.0)
    gv = coeff[..., None] * vec
    g[:, 0] += gv.sum(axis=0)  # as O_n
    g[:, 0] -= gv.sum(axis=1)  # as O_m
    return float(e), g


def surrogate_energy_forces(spec: SurrogateSpec, cluster, surface: str = "A"):
    """Energy (kcal/mol) and forces (kcal/mol/Å) on surface ``A`` or ``B``."""
    mol = _molecules(cluster)
    e, g = _surface_a(spec, mol)
    if surface == "B":
        eb, gb = _surface_b_extra(spec, mol)
        e = spec.b_scale * e + eb
        g = spec.b_scale * g + gb
    elif surface != "A":
        raise ValueError(f"unknown surface {surface!r}")
    return e, -g.reshape(-1, 3)


def surrogate_energy(spec: SurrogateSpec, cluster) -> float:
    return surrogate_energy_forces(spec, cluster, "A")[0]


def surrogate_forces(spec: SurrogateSpec, cluster) -> np.ndarray:
    return surrogate_energy_forces(spec, cluster, "A")[1]


def pes_b_energy(spec: SurrogateSpec, cluster) -> float:
    return surrogate_energy_forces(spec, cluster, "B")[0]


def pes_b_forces(spec: SurrogateSpec, cluster) -> np.ndarray:
    return surrogate_energy_forces(spec, cluster, "B")[1]


class SurrogateProvider:
    """Force provider for surface A or B."""

    def __init__(self, spec: Optional[SurrogateSpec] = None, surface: str = "A"):
        self.spec = spec or SurrogateSpec()
        self.surface = surface
        self.name = f"surrogate-{surface}"

    def energy_forces(self, atomic_numbers, positions):
        z = np.asarray(atomic_numbers)
        if len(z) % 3 or not np.array_equal(z, np.tile([8, 1, 1], len(z) // 3)):
            raise ValueError("surrogate surfaces need O,H,H-ordered water clusters")
        return surrogate_energy_forces(self.spec, positions, self.surface)

    def predict(self, clusters):
        out = [self.energy_forces(c.atomic_numbers, c.positions) for c in clusters]
        return np.array([e for e, _ in out]), np.concatenate([f for _, f in out])


def relabel(spec: SurrogateSpec, clusters, surface: str = "B", with_forces: bool = False, **tags):
    """Same geometries with energies (and optionally forces) from ``surface``."""
    out = []
    for c in clusters:
        e, f = surrogate_energy_forces(spec, c, surface)
        info = {**c.info, "pes": surface, **tags}
        out.append(c.replace(energy=e, forces=f if with_forces else None, info=info))
    set_tags = dict(getattr(clusters, "tags", {}))
    set_tags.update({"pes": surface, **tags})
    return ClusterSet(out, set_tags)


# --------------------------------------------------------------- minima


def ideal_water(spec: SurrogateSpec, rng) -> np.ndarray:
    half = spec.theta0 / 2
    local = np.array(
        [[0.0, 0.0, 0.0],
         [spec.r0 * np.sin(half), 0.0, spec.r0 * np.cos(half)],
         [-spec.r0 * np.sin(half), 0.0, spec.r0 * np.cos(half)]]
    )
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rot = np.array(
        [[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
         [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
         [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]]
    )
    return local @ rot.T


def random_cluster(spec: SurrogateSpec, n_waters: int, rng, min_oo: float = 2.7) -> np.ndarray:
    """Randomly oriented ideal waters packed in a sphere, O-O >= min_oo."""
    radius = 1.6 * (n_waters * 30.0 * 3 / (4 * np.pi)) ** (1 / 3)
    centers = []
    attempts = 0
    while len(centers) < n_waters:
        attempts += 1
        if attempts > 10000:
            radius *= 1.1
            attempts = 0
        p = rng.uniform(-radius, radius, 3)
        if np.linalg.norm(p) > radius:
            continue
        if all(np.linalg.norm(p - c) >= min_oo for c in centers):
            centers.append(p)
    return np.concatenate([ideal_water(spec, rng) + c for c in centers])


def max_force(spec, positions, surface="A") -> float:
    return float(np.abs(surrogate_energy_forces(spec, positions, surface)[1]).max())


def relax(
    spec: SurrogateSpec,
    positions,
    surface: str = "A",
    fmax: float = 1e-4,
    max_iter: int = 20000,
    method: str = "lbfgs",
):
    """Minimize energy from ``positions``; returns (positions, energy, converged)."""
    x = np.asarray(positions, dtype=np.float64).ravel().copy()

    def fun(v):
        e, f = surrogate_energy_forces(spec, v.reshape(-1, 3), surface)
        return e, -f.ravel()

    if method == "lbfgs" and _kernels is not None and surface == "A":
        x, e, _, _ = _kernels.relax_lbfgs(
            x.reshape(-1, 3), fmax, max_iter, 10, 0.2, *_kernel_args(spec)
        )
        x = x.ravel()
    elif method == "lbfgs":
        for _ in range(3):
            res = minimize(
                fun, x, jac=True, method="L-BFGS-B",
                options={"maxiter": max_iter, "gtol": fmax * 0.1, "ftol": 0.0, "maxcor": 30},
            )
            x = res.x
            if max_force(spec, x.reshape(-1, 3), surface) < fmax:
                break
    elif method != "gd":
        raise ValueError(f"unknown method {method!r}")
    x = _gradient_descent(fun, x, fmax, max_iter if method == "gd" else 2000)
    e, f = surrogate_energy_forces(spec, x.reshape(-1, 3), surface)
    return x.reshape(-1, 3), e, bool(np.abs(f).max() < fmax)


def _gradient_descent(fun, x, fmax, max_iter, c1=1e-4):
    """Steepest descent with Armijo backtracking."""
    e, g = fun(x)
    step = 1e-3
    for _ in range(max_iter):
        if np.abs(g).max() < fmax:
            break
        gg = g @ g
        step *= 2.0
        while True:
            x_new = x - step * g
            e_new, g_new = fun(x_new)
            if e_new <= e - c1 * step * gg or step < 1e-14:
                break
            step *= 0.5
        x, e, g = x_new, e_new, g_new
    return x


def is_connected(positions, cutoff: float = 4.0) -> bool:
    o = np.asarray(positions).reshape(-1, 3, 3)[:, 0]
    n = len(o)
    adj = np.linalg.norm(o[:, None] - o[None], axis=-1) <= cutoff
    seen = {0}
    frontier = [0]
    while frontier:
        k = frontier.pop()
        for m in np.nonzero(adj[k])[0]:
            if m not in seen:
                seen.add(int(m))
                frontier.append(int(m))
    return len(seen) == n


def _minimum_sample(args):
    spec, sizes, seed, index, fmax, method = args
    rng = np.random.default_rng([seed, index])
    n_w = int(sizes[rng.integers(len(sizes))])
    x0 = random_cluster(spec, n_w, rng)
    pos, e, ok = relax(spec, x0, fmax=fmax, method=method)
    if not ok:
        return None, f"sample {index}: no convergence"
    if e >= 0:
        return None, f"sample {index}: unbound (E={e:.3f})"
    if not is_connected(pos):
        return None, f"sample {index}: fragmented"
    return (pos, e, n_w), None


def generate_minima(
    spec: SurrogateSpec,
    sizes: Sequence[int],
    count: int,
    seed: int = 0,
    fmax: float = 1e-4,
    method: str = "lbfgs",
    workers: int = 1,
    max_attempts: Optional[int] = None,
) -> ClusterSet:
    """Relaxed, bound, connected clusters; sample ``k`` uses sub-seed (seed, k)."""
    sizes = [int(s) for s in sizes]
    if not sizes or min(sizes) < 2 or max(sizes) > 25:
        raise ValueError(f"sizes must lie in [2, 25], got {sizes}")
    if count < 1:
        raise ValueError("count must be positive")
    max_attempts = max_attempts or 3 * count + 10
    clusters = []
    index = 0
    pool = None
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        pool = ProcessPoolExecutor(workers)
    try:
        while len(clusters) < count and index < max_attempts:
            chunk = range(index, min(index + max(count - len(clusters), workers), max_attempts))
            jobs = [(spec, sizes, seed, k, fmax, method) for k in chunk]
            results = pool.map(_minimum_sample, jobs) if pool else map(_minimum_sample, jobs)
            for res, msg in results:
                if res is None:
                    log.info("discarded %s", msg)
                    continue
                if len(clusters) < count:
                    pos, e, n_w = res
                    clusters.append(water_cluster(pos, energy=e, tag="minima", pes="A"))
            index = chunk.stop
    finally:
        if pool:
            pool.shutdown()
    if len(clusters) < count:
        raise RuntimeError(f"only {len(clusters)} of {count} minima converged")
    return ClusterSet(clusters, {"tag": "minima", "pes": "A"})


def generate_nonminima(
    spec: SurrogateSpec,
    minima,
    temperature: float = 300.0,
    steps: int = 2000,
    seed: int = 0,
    per_minimum: int = 4,
    dt: float = 0.25,
    tau: float = 50.0,
    surface: str = "A",
) -> ClusterSet:
    """Thermal off-equilibrium samples from short NVT runs started at minima.

    Frames are taken evenly from the second half of each run, so each sample
    carries surface energy and forces.
    """
    from .dynamics import MDConfig, run_md

    provider = SurrogateProvider(spec, surface)
    stride = max(1, steps // (2 * per_minimum))
    out = []
    for k, c in enumerate(minima):
        cfg = MDConfig(
            dt=dt, n_steps=steps, temperature=temperature, tau=tau,
            mode="NVT", seed=int(np.random.default_rng([seed, k]).integers(2**31)),
            snapshot_stride=stride,
        )
        traj = run_md(provider, c, cfg)
        if traj.unstable:
            log.info("minimum %d: unstable run skipped", k)
            continue
        frames = [f for f in traj.frames if f.step > steps // 2][-per_minimum:]
        for f in frames:
            e, frc = surrogate_energy_forces(spec, f.positions, surface)
            if not np.isfinite(e) or e >= 0:
                continue
            out.append(
                water_cluster(
                    f.positions, energy=e, forces=frc, tag="nonminima", pes=surface,
                    temperature=f"{temperature:g}",
                )
            )
    if not out:
        raise RuntimeError("no non-minima produced")
    return ClusterSet(out, {"tag": "nonminima", "pes": surface})
