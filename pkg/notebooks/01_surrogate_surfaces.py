"""
Surrogate water surfaces and datasets
=====================================

Two analytic water-cluster surfaces stand in for expensive reference
calculations.  Surface A is a flexible point-charge model with Lennard-Jones
oxygens.  Surface B rescales A, adds an offset for every bound molecule and
an extra O-O term, which moves per-water energies upward.  This script builds small minima and non-minima
sets and compares per-water energies on both surfaces.
"""

# %%
# Imports
# -------
import numpy as np

from nnpforge.evaluation import comparison_histograms
from nnpforge.surrogate import (
    SurrogateProvider,
    SurrogateSpec,
    generate_minima,
    generate_nonminima,
    relabel,
)

spec = SurrogateSpec()

# %%
# Minima
# ------
# Random packings of rigid ideal waters are relaxed with L-BFGS until the
# largest force component drops below the tolerance.
minima = generate_minima(spec, [3, 4, 5, 6], 40, seed=0)
per_water = np.array([c.energy / c.n_waters for c in minima])
print(f"{len(minima)} minima, E/H2O from {per_water.min():.2f} to {per_water.max():.2f} kcal/mol")

# %%
# Non-minima
# ----------
# Short thermostatted trajectories started at each minimum supply
# off-equilibrium geometries with force labels.
nonmin = generate_nonminima(spec, minima.clusters[:10], temperature=300.0, steps=500, seed=1, per_minimum=3)
fmax = [np.abs(c.forces).max() for c in nonmin]
print(f"{len(nonmin)} non-minima, median max |F| = {np.median(fmax):.1f} kcal/mol/Å")

# %%
# Surface B on the same geometries
# --------------------------------
b = relabel(spec, minima, "B")
shift = np.array([(cb.energy - ca.energy) / ca.n_waters for ca, cb in zip(minima, b)])
print(f"mean per-water shift B - A: {shift.mean():.3f} kcal/mol")

hists = comparison_histograms({"A": per_water, "B": [c.energy / c.n_waters for c in b]}, bins=20)
for name, h in hists.items():
    print(name, "histogram mean", round(h.mean(), 3))

# %%
# Force provider interface
# ------------------------
# Both surfaces answer ``energy_forces(z, positions)``, the same call the
# model and the MD engine use.
provider = SurrogateProvider(spec, "B")
e, f = provider.energy_forces(minima[0].atomic_numbers, minima[0].positions)
print("E_B =", round(e, 4), " net force =", np.abs(f.sum(axis=0)).max())
