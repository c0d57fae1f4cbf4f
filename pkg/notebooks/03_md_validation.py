"""
Dynamics driven by a trained model, checked against the surrogate
=================================================================

A model trained on non-minima drives short thermostatted trajectories of a
water hexamer.  Every stored frame is re-scored on the surrogate surface; a
trajectory is valid when all re-scored energies stay negative, meaning the
cluster neither dissociated nor collapsed.

Set ``NNPFORGE_CHECKPOINT`` to a finetuned checkpoint (for example one
written by ``nnpforge finetune``) to run the ensemble with it.  Otherwise a
deliberately undertrained model is fitted here, and its trajectories
usually come out invalid.
"""

# %%
# Model
# -----
import os

import numpy as np

from nnpforge.chemdata import split_dataset
from nnpforge.dynamics import MDConfig, energy_drift, run_ensemble, run_md, validate_trajectory
from nnpforge.model import ModelConfig, NNPProvider
from nnpforge.surrogate import SurrogateProvider, SurrogateSpec, generate_minima, generate_nonminima
from nnpforge.training import LossConfig, Schedule, load_checkpoint, train

spec = SurrogateSpec()
if os.environ.get("NNPFORGE_CHECKPOINT"):
    model = load_checkpoint(os.environ["NNPFORGE_CHECKPOINT"])
else:
    sources = generate_minima(spec, [5, 6, 7], 60, seed=5)
    data = generate_nonminima(spec, sources, 300.0, 1000, seed=6, per_minimum=4)
    split = split_dataset(data, (0.8, 0.1, 0.1), seed=0)
    config = ModelConfig(n_atom_features=16, n_interactions=2, n_rbf=12, readout_hidden=16)
    model = train(data, split, 0, LossConfig.with_forces(), Schedule(epochs=15, lr=2e-3), config)

# %%
# Reference trajectory on the surrogate itself
# --------------------------------------------
hexamer = generate_minima(spec, [6], 1, seed=0)[0]
reference = SurrogateProvider(spec)
nve = run_md(reference, hexamer, MDConfig(n_steps=2000, mode="NVE"))
print("surrogate NVE drift:", f"{energy_drift(nve):.1e}",
      " verdict:", validate_trajectory(nve, reference).verdict)

# %%
# Model-driven ensemble, re-scored
# --------------------------------
trajs = run_ensemble(NNPProvider(model.params), hexamer, MDConfig(n_steps=2000), seeds=range(4))
for seed, t in enumerate(trajs):
    res = validate_trajectory(t, reference)
    print(f"seed {seed}: {res.verdict:8s} frames={len(t.frames)} "
          f"max E_ref={res.reference_energies.max():.2f} kcal/mol "
          f"mean |E_model - E_ref|={np.abs(res.model_energies - res.reference_energies).mean():.2f}")
