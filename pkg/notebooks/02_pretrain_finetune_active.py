"""
Pretraining, finetuning and active sampling
===========================================

A small graph network is pretrained on energies of surface-A minima, then
finetuned on non-minima with a force-weighted loss.  The finetuning run
starts from a quarter of the non-minima and promotes reserve samples whose
force error is improbably high under the validation error distribution.
Sizes here are tiny so the script finishes in a few minutes.
"""

# %%
# Data
# ----
import numpy as np

from nnpforge.chemdata import split_dataset
from nnpforge.evaluation import evaluate_model, markdown_table
from nnpforge.model import ModelConfig
from nnpforge.sampling import ActiveConfig, SamplingPools, active_training_loop
from nnpforge.surrogate import SurrogateSpec, generate_minima, generate_nonminima
from nnpforge.training import LossConfig, Schedule, train

spec = SurrogateSpec()
minima = generate_minima(spec, [3, 4, 5], 300, seed=2)
nonmin = generate_nonminima(spec, generate_minima(spec, [3, 4, 5], 60, seed=3), 300.0, 1000, seed=4, per_minimum=4)
config = ModelConfig(n_atom_features=16, n_interactions=2, n_rbf=12, readout_hidden=16)

# %%
# Energy-only pretraining
# -----------------------
pre_split = split_dataset(minima, (0.8, 0.1, 0.1), seed=0)
pre = train(minima, pre_split, 0, LossConfig.pretrain(), Schedule(epochs=15, lr=2e-3), config)
print("pretrain best val loss", pre.meta["best_val_loss"])

# %%
# Finetuning with active sampling
# -------------------------------
split = split_dataset(nonmin, (0.8, 0.1, 0.1), seed=1)
pools = SamplingPools.from_indices(split.train, len(split.train) // 4, seed=0)
sched = Schedule(epochs=20, lr=1e-3, seed=3)
ft, final = active_training_loop(pre, nonmin, split, pools, LossConfig.with_forces(), sched,
                                 ActiveConfig(p_tol=0.05, round_period=5, score_count=64))
print(f"{final.rounds} rounds, {len(final.promotions())} promotions, "
      f"training subset {len(pools.train_subset)} -> {len(final.train_subset)}")

# %%
# The same schedule from random weights on the full training split
# ----------------------------------------------------------------
scratch = train(nonmin, split, 0, LossConfig.with_forces(), sched, config)

# %%
# Test-set comparison
# -------------------
# At this size the ordering of the two rows is noisy; the acceptance suite
# runs the comparison at thousands of samples.
test = nonmin.subset(split.test)
rows = []
for name, ck, n in (("pretrain", ft, len(final.train_subset)), ("scratch", scratch, len(split.train))):
    rows.append({"host": "desk", "initialization": name, "n_train": n,
                 "report": evaluate_model(ck.params, test, tag="non-minima")})
print(markdown_table(rows))
