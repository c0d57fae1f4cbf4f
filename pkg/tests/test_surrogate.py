import numpy as np
import pytest

from conftest import random_rotation
from nnpforge import surrogate as S
from nnpforge.chemdata import Cluster, water_cluster
from nnpforge.surrogate import (
    SurrogateProvider,
    SurrogateSpec,
    ideal_water,
    lj_energy,
    pes_b_energy,
    relabel,
    relax,
    surrogate_energy,
    surrogate_energy_forces,
    switch,
)


def monomer(spec):
    t = spec.theta0
    return np.array([[0, 0, 0], [spec.r0, 0, 0], [spec.r0 * np.cos(t), spec.r0 * np.sin(t), 0.0]])


def fd_forces(spec, pos, surface, h=1e-5):
    out = np.zeros_like(pos)
    for idx in np.ndindex(pos.shape):
        p, m = pos.copy(), pos.copy()
        p[idx] += h
        m[idx] -= h
        out[idx] = -(surrogate_energy_forces(spec, p, surface)[0] - surrogate_energy_forces(spec, m, surface)[0]) / (2 * h)
    return out


class TestSpec:
    def test_charges_must_balance(self):
        with pytest.raises(ValueError):
            SurrogateSpec(q_h=0.5)

    def test_positive_constants(self):
        with pytest.raises(ValueError):
            SurrogateSpec(lj_sigma=0.0)


class TestTerms:
    def test_monomer_at_equilibrium(self, spec):
        assert abs(surrogate_energy(spec, water_cluster(monomer(spec)))) < 1e-20

    def test_far_apart_dimer(self, spec):
        w = monomer(spec)
        assert abs(surrogate_energy(spec, water_cluster(np.vstack([w, w + [100.0, 0, 0]])))) < 1e-6

    def test_lj_minimum(self):
        r = 2 ** (1 / 6) * 3.1507
        assert lj_energy(r, 0.1521, 3.1507) == pytest.approx(-0.1521, rel=1e-12)

    def test_switch_ends(self):
        s, ds = switch(np.array([7.0, 8.0, 8.5, 9.0, 10.0]), 8.0, 9.0)
        np.testing.assert_allclose(s, [1, 1, 0.5, 0, 0])
        assert ds[0] == ds[-1] == 0 and ds[1] == 0 and ds[3] == 0

    def test_non_water_rejected(self, spec):
        with pytest.raises(ValueError):
            surrogate_energy(spec, Cluster([8, 1], [[0, 0, 0], [1, 0, 0]]))

    def test_bound_minimum_negative(self, minima):
        assert all(c.energy < 0 for c in minima)


@pytest.mark.parametrize("surface", ["A", "B"])
class TestForces:
    def test_finite_differences(self, spec, minima, surface, rng):
        pos = minima[4].positions + rng.normal(scale=0.05, size=minima[4].positions.shape)
        _, f = surrogate_energy_forces(spec, pos, surface)
        num = fd_forces(spec, pos, surface)
        assert np.linalg.norm(f - num) / np.linalg.norm(num) < 1e-8

    def test_switch_region_finite_differences(self, spec, surface):
        w = monomer(spec)
        pos = np.vstack([w, w + [8.4, 0.3, 0.2], w + [4.0, 2.5, 0.0]])
        _, f = surrogate_energy_forces(spec, pos, surface)
        num = fd_forces(spec, pos, surface)
        assert np.linalg.norm(f - num) / np.linalg.norm(num) < 1e-8

    def test_net_force_and_torque(self, spec, nonminima, surface):
        pos = nonminima[0].positions
        _, f = surrogate_energy_forces(spec, pos, surface)
        assert np.abs(f.sum(axis=0)).max() < 1e-10
        assert np.abs(np.cross(pos, f).sum(axis=0)).max() < 1e-10

    def test_rigid_motion(self, spec, minima, surface, rng):
        pos = minima[6].positions
        rot = random_rotation(rng)
        e, f = surrogate_energy_forces(spec, pos, surface)
        e2, f2 = surrogate_energy_forces(spec, pos @ rot.T + rng.normal(size=3), surface)
        assert abs(e - e2) <= 1e-10 * abs(e)
        np.testing.assert_allclose(f2, f @ rot.T, atol=1e-8)

    def test_molecule_permutation(self, spec, minima, surface):
        mol = minima[6].positions.reshape(-1, 3, 3)
        perm = np.random.default_rng(3).permutation(len(mol))
        e, _ = surrogate_energy_forces(spec, mol.reshape(-1, 3), surface)
        e2, _ = surrogate_energy_forces(spec, mol[perm].reshape(-1, 3), surface)
        assert abs(e - e2) <= 1e-10 * abs(e)


def test_compiled_matches_numpy(spec, nonminima):
    if S._kernels is None:
        pytest.skip("compiled kernel unavailable")
    mol = nonminima[2].positions.reshape(-1, 3, 3)
    e1, g1 = S._surface_a_numpy(spec, mol)
    e2, g2 = S._surface_a_compiled(spec, mol)
    assert e1 == pytest.approx(e2, rel=1e-12)
    np.testing.assert_allclose(g1, g2, atol=1e-10)


class TestSurfaceB:
    def test_differs_from_a(self, spec, minima):
        for c in minima.clusters[:5]:
            assert pes_b_energy(spec, c) != surrogate_energy(spec, c)

    def test_upward_shift_per_water(self, spec, minima):
        shift = [(pes_b_energy(spec, c) - c.energy) / c.n_waters for c in minima]
        assert np.mean(shift) > 0

    def test_dissociated_limit(self, spec):
        w = monomer(spec)
        pos = np.vstack([w, w + [50.0, 0, 0], w + [0, 50.0, 0]])
        assert abs(surrogate_energy_forces(spec, pos, "B")[0]) < 1e-12

    def test_relabel_tags(self, spec, minima):
        b = relabel(spec, minima.subset(range(3)), "B", tag="minima")
        assert b.tags["pes"] == "B" and all(c.info["pes"] == "B" for c in b)
        assert b[0].energy == pytest.approx(pes_b_energy(spec, minima[0]), rel=1e-14)


class TestGenerators:
    def test_minima_converged(self, spec, minima):
        for c in minima:
            assert np.abs(surrogate_energy_forces(spec, c)[1]).max() < 1e-4
            assert c.info["tag"] == "minima" and c.is_water

    def test_relax_fixed_point(self, spec, minima):
        c = minima[0]
        _, e, ok = relax(spec, c.positions)
        assert ok and abs(e - c.energy) < 1e-6

    def test_gradient_descent_path(self, spec, minima):
        c = minima[1]
        _, e, ok = relax(spec, c.positions + 0.01, method="gd")
        assert ok and abs(e - c.energy) < 1e-5

    def test_deterministic(self, spec):
        a = S.generate_minima(spec, [3], 3, seed=21)
        b = S.generate_minima(spec, [3], 3, seed=21)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.positions, y.positions)

    def test_bad_sizes(self, spec):
        with pytest.raises(ValueError):
            S.generate_minima(spec, [1], 2)
        with pytest.raises(ValueError):
            S.generate_minima(spec, [30], 2)

    def test_nonminima_contract(self, spec, nonminima):
        for c in nonminima:
            e, f = surrogate_energy_forces(spec, c)
            assert np.isfinite(c.energy) and c.energy < 0
            assert np.abs(c.forces).max() > 1e-2
            assert e == c.energy
            np.testing.assert_allclose(c.forces, f, rtol=0, atol=1e-12)

    def test_ideal_water_geometry(self, spec, rng):
        w = ideal_water(spec, rng)
        assert abs(surrogate_energy(spec, water_cluster(w))) < 1e-12


def test_provider_predict(spec, minima):
    prov = SurrogateProvider(spec, "A")
    e, f = prov.predict(minima.clusters[:3])
    np.testing.assert_allclose(e, [c.energy for c in minima.clusters[:3]], rtol=1e-12)
    assert f.shape == (sum(c.n_atoms for c in minima.clusters[:3]), 3)
