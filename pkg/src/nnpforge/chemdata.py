"""Cluster data model, extended-XYZ ingestion, splits, pair lists and batches."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SYMBOLS = {"H": 1, "C": 6, "N": 7, "O": 8, "F": 9, "S": 16, "Cl": 17}
ELEMENTS = {z: s for s, z in SYMBOLS.items()}
MASSES = {1: 1.008, 6: 12.011, 7: 14.007, 8: 15.999, 9: 18.998, 16: 32.06, 17: 35.45}


class XYZParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True, eq=False)
class Cluster:
    """One molecular configuration.

    Positions in Å, energy in kcal/mol, forces in kcal/mol/Å.
    """

    atomic_numbers: np.ndarray
    positions: np.ndarray
    energy: Optional[float] = None
    forces: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        z = np.asarray(self.atomic_numbers, dtype=np.int64).reshape(-1)
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(z) == 0:
            raise ValueError("cluster must contain at least one atom")
        if len(pos) != len(z):
            raise ValueError(f"{len(z)} atomic numbers but {len(pos)} positions")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        pos.setflags(write=False)
        z.setflags(write=False)
        object.__setattr__(self, "atomic_numbers", z)
        object.__setattr__(self, "positions", pos)
        if self.forces is not None:
            f = np.array(self.forces, dtype=np.float64)
            if f.shape != pos.shape:
                raise ValueError(f"forces shape {f.shape} != positions shape {pos.shape}")
            f.setflags(write=False)
            object.__setattr__(self, "forces", f)
        if self.energy is not None:
            object.__setattr__(self, "energy", float(self.energy))

    @property
    def n_atoms(self) -> int:
        return len(self.atomic_numbers)

    @property
    def n_waters(self) -> int:
        return self.n_atoms // 3

    @property
    def is_water(self) -> bool:
        z = self.atomic_numbers
        return self.n_atoms % 3 == 0 and np.array_equal(
            z, np.tile([8, 1, 1], self.n_atoms // 3)
        )

    def replace(self, **changes) -> "Cluster":
        fields = dict(
            atomic_numbers=self.atomic_numbers,
            positions=self.positions,
            energy=self.energy,
            forces=self.forces,
            info=dict(self.info),
        )
        fields.update(changes)
        return Cluster(**fields)


@dataclass(frozen=True)
class ClusterSet:
    clusters: tuple
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))
        if not self.clusters:
            raise ValueError("ClusterSet must not be empty")

    def __len__(self):
        return len(self.clusters)

    def __getitem__(self, i):
        return self.clusters[i]

    def __iter__(self):
        return iter(self.clusters)

    def subset(self, indices) -> "ClusterSet":
        return ClusterSet([self.clusters[i] for i in indices], dict(self.tags))

    @property
    def elements(self) -> set:
        return set(int(z) for c in self.clusters for z in np.unique(c.atomic_numbers))


def water_cluster(positions, energy=None, forces=None, **info) -> Cluster:
    """Cluster with O,H,H ordering per molecule."""
    n = len(np.asarray(positions).reshape(-1, 3))
    if n % 3:
        raise ValueError("water cluster needs a multiple of 3 atoms")
    return Cluster(np.tile([8, 1, 1], n // 3), positions, energy, forces, info)


# ----------------------------------------------------------------- XYZ I/O


def _parse_comment(line: str) -> dict:
    out = {}
    for token in line.split():
        if "=" in token:
            key, value = token.split("=", 1)
            out[key] = value.strip('"')
    return out


def parse_xyz(text: str, require_energy: bool = True) -> ClusterSet:
    """Parse extended XYZ frames.

    The comment line holds ``key=value`` pairs; ``energy`` is required unless
    ``require_energy`` is false.  Atom rows are ``Symbol x y z`` with optional
    ``fx fy fz`` force columns.
    """
    lines = text.splitlines()
    clusters = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        header = i + 1
        try:
            n = int(lines[i].strip())
        except ValueError:
            raise XYZParseError(f"expected atom count, got {lines[i]!r}", header) from None
        if n <= 0:
            raise XYZParseError(f"atom count must be positive, got {n}", header)
        if i + 1 >= len(lines):
            raise XYZParseError("missing comment line", header + 1)
        info = _parse_comment(lines[i + 1])
        rows = lines[i + 2 : i + 2 + n]
        if len(rows) < n or any(not r.strip() for r in rows):
            raise XYZParseError(
                f"frame declares {n} atoms but only "
                f"{sum(1 for r in rows if r.strip())} atom rows follow",
                header,
            )
        z = np.empty(n, dtype=np.int64)
        pos = np.empty((n, 3))
        frc = np.empty((n, 3))
        has_forces = None
        for k, row in enumerate(rows):
            lineno = i + 3 + k
            parts = row.split()
            if parts[0] not in SYMBOLS:
                raise XYZParseError(f"unknown element symbol {parts[0]!r}", lineno)
            if len(parts) not in (4, 7):
                raise XYZParseError(f"expected 4 or 7 columns, got {len(parts)}", lineno)
            if has_forces is None:
                has_forces = len(parts) == 7
            elif has_forces != (len(parts) == 7):
                raise XYZParseError("inconsistent force columns within frame", lineno)
            try:
                values = [float(v) for v in parts[1:]]
            except ValueError:
                raise XYZParseError(f"non-numeric coordinate in {row!r}", lineno) from None
            z[k] = SYMBOLS[parts[0]]
            pos[k] = values[:3]
            if has_forces:
                frc[k] = values[3:]
        energy = info.pop("energy", None)
        if energy is None and require_energy:
            raise XYZParseError("missing energy key on comment line", header + 1)
        try:
            energy = None if energy is None else float(energy)
        except ValueError:
            raise XYZParseError(f"non-numeric energy {energy!r}", header + 1) from None
        try:
            clusters.append(Cluster(z, pos, energy, frc if has_forces else None, info))
        except ValueError as exc:
            raise XYZParseError(str(exc), header) from None
        i += 2 + n
    if not clusters:
        raise XYZParseError("no frames found")
    tags = {}
    for key in ("tag", "pes"):
        values = {c.info.get(key) for c in clusters}
        if len(values) == 1 and None not in values:
            tags[key] = values.pop()
    return ClusterSet(clusters, tags)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_xyz(clusters, extra: Optional[dict] = None) -> str:
    """Serialize clusters; every cluster must carry an energy.

    Floats are written with ``repr`` so a parse round trip is exact.
    """
    if isinstance(clusters, ClusterSet):
        set_tags = clusters.tags
        clusters = clusters.clusters
    else:
        set_tags = {}
    if len(clusters) == 0:
        raise ValueError("nothing to serialize: empty cluster sequence")
    out = []
    for k, c in enumerate(clusters):
        if c.energy is None:
            raise ValueError(f"cluster {k} has no energy")
        info = {**set_tags, **c.info, **(extra or {})}
        comment = [f"energy={_fmt(c.energy)}"]
        comment += [f"{key}={value}" for key, value in info.items() if key != "energy"]
        out.append(str(c.n_atoms))
        out.append(" ".join(comment))
        for a in range(c.n_atoms):
            cols = [ELEMENTS[int(c.atomic_numbers[a])]]
            cols += [_fmt(v) for v in c.positions[a]]
            if c.forces is not None:
                cols += [_fmt(v) for v in c.forces[a]]
            out.append(" ".join(cols))
    return "\n".join(out) + "\n"


def read_xyz(path, require_energy: bool = True) -> ClusterSet:
    return parse_xyz(Path(path).read_text(), require_energy=require_energy)


def save_xyz(path, clusters, extra=None) -> None:
    Path(path).write_text(write_xyz(clusters, extra))


# ------------------------------------------------------------------ splits


@dataclass(frozen=True)
class SplitIndices:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int
    fractions: tuple

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("train", "val", "test"):
            idx = getattr(self, name)
            (directory / f"{name}.idx").write_text("".join(f"{i}\n" for i in idx))

    @classmethod
    def load(cls, directory, seed=-1, fractions=()) -> "SplitIndices":
        directory = Path(directory)
        parts = []
        for name in ("train", "val", "test"):
            text = (directory / f"{name}.idx").read_text().split()
            parts.append(np.array([int(t) for t in text], dtype=np.int64))
        return cls(*parts, seed=seed, fractions=tuple(fractions))


def split_dataset(n_or_set, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitIndices:
    """Seeded shuffle then partition; floor sizes, remainder to train."""
    n = n_or_set if isinstance(n_or_set, int) else len(n_or_set)
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0:
        raise ValueError(f"need three positive fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n_val = math.floor(fractions[1] * n)
    n_test = math.floor(fractions[2] * n)
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) == 0:
        raise ValueError(
            f"n={n} too small for fractions {fractions}: "
            f"sizes ({n_train}, {n_val}, {n_test})"
        )
    perm = np.random.default_rng(seed).permutation(n)
    return SplitIndices(
        train=perm[:n_train],
        val=perm[n_train : n_train + n_val],
        test=perm[n_train + n_val :],
        seed=seed,
        fractions=fractions,
    )


# ------------------------------------------------------------ pair lists


@dataclass(frozen=True)
class PairList:
    """Directed pairs (i, j) with ``vectors = r_j - r_i``."""

    i: np.ndarray
    j: np.ndarray
    distances: np.ndarray
    vectors: np.ndarray
    cutoff: float

    def __len__(self):
        return len(self.i)

    @property
    def unit_vectors(self) -> np.ndarray:
        return self.vectors / self.distances[:, None]


def neighbor_pairs(cluster_or_positions, cutoff: float) -> PairList:
    """All ordered pairs i != j with |r_j - r_i| <= cutoff (open boundaries)."""
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    pos = getattr(cluster_or_positions, "positions", cluster_or_positions)
    pos = np.asarray(pos, dtype=np.float64)
    diff = pos[None, :, :] - pos[:, None, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(dist, np.inf)
    i, j = np.nonzero(dist <= cutoff)
    return PairList(i, j, dist[i, j], diff[i, j], float(cutoff))


# ---------------------------------------------------------------- batches


@dataclass(frozen=True)
class Batch:
    atomic_numbers: np.ndarray
    positions: np.ndarray
    membership: np.ndarray
    counts: np.ndarray
    energies: Optional[np.ndarray]
    forces: Optional[np.ndarray]
    n_waters: np.ndarray
    infos: tuple = ()

    @property
    def n_clusters(self) -> int:
        return len(self.counts)

    @property
    def n_atoms(self) -> int:
        return len(self.atomic_numbers)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.counts)])

    def pairs(self, cutoff: float):
        """Concatenated per-cluster pair lists as global atom indices."""
        off = self.offsets
        ii, jj = [], []
        for k in range(self.n_clusters):
            pl = neighbor_pairs(self.positions[off[k] : off[k + 1]], cutoff)
            ii.append(pl.i + off[k])
            jj.append(pl.j + off[k])
        return np.concatenate(ii), np.concatenate(jj)

    def with_positions(self, positions) -> "Batch":
        return Batch(
            self.atomic_numbers,
            np.asarray(positions, dtype=np.float64),
            self.membership,
            self.counts,
            self.energies,
            self.forces,
            self.n_waters,
            self.infos,
        )

    def unbatch(self) -> list:
        off = self.offsets
        out = []
        for k in range(self.n_clusters):
            s = slice(off[k], off[k + 1])
            out.append(
                Cluster(
                    self.atomic_numbers[s],
                    self.positions[s],
                    None if self.energies is None or np.isnan(self.energies[k]) else self.energies[k],
                    None if self.forces is None or np.isnan(self.forces[s]).any() else self.forces[s],
                    dict(self.infos[k]) if self.infos else {},
                )
            )
        return out


def batch_clusters(clusters: Sequence[Cluster]) -> Batch:
    """Concatenate clusters; missing energies/forces become NaN when mixed."""
    clusters = list(clusters)
    if not clusters:
        raise ValueError("cannot batch an empty sequence")
    counts = np.array([c.n_atoms for c in clusters], dtype=np.int64)
    z = np.concatenate([c.atomic_numbers for c in clusters])
    pos = np.concatenate([c.positions for c in clusters])
    membership = np.repeat(np.arange(len(clusters)), counts)
    if any(c.energy is not None for c in clusters):
        energies = np.array([np.nan if c.energy is None else c.energy for c in clusters])
    else:
        energies = None
    if any(c.forces is not None for c in clusters):
        forces = np.concatenate(
            [c.forces if c.forces is not None else np.full((c.n_atoms, 3), np.nan) for c in clusters]
        )
    else:
        forces = None
    n_waters = np.array([max(c.n_waters, 1) for c in clusters], dtype=np.int64)
    return Batch(z, pos, membership, counts, energies, forces, n_waters, tuple(c.info for c in clusters))
