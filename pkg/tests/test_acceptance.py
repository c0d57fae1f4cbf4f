"""End-to-end acceptance checks.

Each test prints one ``criterion N: PASS|FAIL`` line, repeated in the
terminal summary.  The workflow fixtures (pretraining on surrogate minima,
finetuning on non-minima) are shared between criteria 4 to 7 and take
roughly a quarter of an hour on one core.
"""

import json
import time

import numpy as np
import pytest

from conftest import erf_bisect_inverse, erf_oracle, random_rotation
from nnpforge.chemdata import Cluster, ClusterSet, SplitIndices, batch_clusters, split_dataset
from nnpforge.cli import main
from nnpforge.dynamics import (
    ACCEL_CONVERSION,
    MDConfig,
    energy_drift,
    masses_for,
    max_energy_deviation,
    run_ensemble,
    run_md,
    validate_trajectory,
)
from nnpforge.evaluation import comparison_histograms, evaluate_model
from nnpforge.model import ModelConfig, NNPProvider, init_params, predict_energy
from nnpforge.sampling import (
    ActiveConfig,
    SamplingPools,
    active_round,
    erf,
    per_sample_force_error,
    promotion_decision,
    validation_error_stats,
)
from nnpforge.surrogate import (
    SurrogateProvider,
    SurrogateSpec,
    generate_minima,
    generate_nonminima,
    relabel,
    surrogate_energy_forces,
)
from nnpforge.training import LossConfig, Schedule, compute_loss, loss_and_gradients, train

DESK = ModelConfig(n_atom_features=32, n_interactions=2, n_rbf=16, readout_hidden=16)


@pytest.fixture(scope="module")
def surface():
    return SurrogateSpec()


@pytest.fixture(scope="module")
def configurations(surface):
    """Twenty perturbed, randomly oriented clusters of 3 to 6 waters."""
    rng = np.random.default_rng(99)
    base = generate_minima(surface, [3, 4, 5, 6], 20, seed=99)
    out = []
    for c in base:
        pos = c.positions @ random_rotation(rng).T + rng.normal(scale=0.08, size=c.positions.shape)
        e, f = surrogate_energy_forces(surface, pos)
        out.append(c.replace(positions=pos, energy=e, forces=f))
    return out


# ------------------------------------------------------------ criterion 1


def test_gradient_correctness(configurations, criterion):
    t0 = time.perf_counter()
    params = init_params(DESK, seed=5, energy_offset=-3.0)
    prov = NNPProvider(params)
    loss_cfg = LossConfig.with_forces()
    rng = np.random.default_rng(0)
    h = 1e-5
    worst_f, worst_p = 0.0, 0.0
    for c in configurations:
        _, f = prov.energy_forces(c.atomic_numbers, c.positions)
        num = np.zeros_like(f)
        for idx in np.ndindex(f.shape):
            p, m = c.positions.copy(), c.positions.copy()
            p[idx] += h
            m[idx] -= h
            num[idx] = -(prov.energy_forces(c.atomic_numbers, p)[0] - prov.energy_forces(c.atomic_numbers, m)[0]) / (2 * h)
        worst_f = max(worst_f, np.linalg.norm(f - num) / np.linalg.norm(num))

        batch = batch_clusters([c])
        _, grads = loss_and_gradients(params, batch, loss_cfg)
        ana, fd = [], []
        for name, arr in params.arrays.items():
            idx = tuple(rng.integers(s) for s in arr.shape)
            vals = []
            for s in (1, -1):
                q = params.copy()
                q.arrays[name][idx] += s * h
                vals.append(compute_loss(q, batch, loss_cfg).loss)
            ana.append(grads[name][idx])
            fd.append((vals[0] - vals[1]) / (2 * h))
        ana, fd = np.array(ana), np.array(fd)
        worst_p = max(worst_p, np.linalg.norm(ana - fd) / np.linalg.norm(fd))
    elapsed = time.perf_counter() - t0
    ok = worst_f < 1e-5 and worst_p < 1e-4 and elapsed < 60
    criterion(1, ok, f"configs={len(configurations)} force_rel={worst_f:.2e} param_rel={worst_p:.2e} "
                     f"runtime={elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------ criterion 2


def _symmetry_errors(energy_forces, cluster, rng):
    pos, z = cluster.positions, cluster.atomic_numbers
    e, f = energy_forces(z, pos)
    rot = random_rotation(rng)
    shift = rng.normal(scale=3.0, size=3)
    e_rt, f_rt = energy_forces(z, pos @ rot.T + shift)
    perm = rng.permutation(len(pos) // 3)
    atom_perm = (3 * perm[:, None] + np.arange(3)).reshape(-1)
    e_p, f_p = energy_forces(z[atom_perm], pos[atom_perm])
    return {
        "energy": max(abs(e_rt - e), abs(e_p - e)) / abs(e),
        "force": max(np.abs(f_rt - f @ rot.T).max(), np.abs(f_p - f[atom_perm]).max()),
        "net": np.abs(f.sum(axis=0)).max(),
        "torque": np.abs(np.cross(pos - pos.mean(axis=0), f).sum(axis=0)).max(),
    }


def test_symmetry_suite(configurations, surface, criterion):
    rng = np.random.default_rng(7)
    nnp = NNPProvider(init_params(DESK, seed=8, energy_offset=-3.0))
    providers = {"nnp": nnp.energy_forces}
    for s in ("A", "B"):
        providers[f"surrogate-{s}"] = SurrogateProvider(surface, s).energy_forces
    worst = {}
    for name, ef in providers.items():
        errs = [_symmetry_errors(ef, c, rng) for c in configurations[:10]]
        worst[name] = {k: max(e[k] for e in errs) for k in errs[0]}
    ok = all(w["energy"] < 1e-10 and w["force"] < 1e-8 and w["net"] < 1e-8 and w["torque"] < 1e-8
             for w in worst.values())
    detail = " ".join(f"{n}:E={w['energy']:.1e},F={w['force']:.1e},net={w['net']:.1e},torque={w['torque']:.1e}"
                      for n, w in worst.items())
    criterion(2, ok, detail)
    assert ok


# ------------------------------------------------------------ criterion 3


class _Harmonic:
    name = "harmonic"

    def __init__(self, k):
        self.k = k

    def energy_forces(self, z, x):
        x = np.asarray(x)
        return 0.5 * self.k * float(np.sum(x * x)), -self.k * x


def test_integrator(surface, criterion):
    t0 = time.perf_counter()
    k = 50.0
    period = 2 * np.pi / np.sqrt(k * ACCEL_CONVERSION / masses_for([1])[0])
    ho = run_md(_Harmonic(k), Cluster([1], [[0.3, -0.1, 0.2]]),
                MDConfig(dt=period / 100, n_steps=10_000, mode="NVE", snapshot_stride=1),
                velocities=[[0.0, 0.01, 0.0]])
    ho_drift = energy_drift(ho)

    trimer = generate_minima(surface, [3], 1, seed=0)[0]
    ref = SurrogateProvider(surface)
    fwd = run_md(ref, trimer, MDConfig(n_steps=1000, mode="NVE", snapshot_stride=1000))
    last = fwd.frames[-1]
    back = run_md(ref, trimer.replace(positions=last.positions), MDConfig(n_steps=1000, mode="NVE",
                  snapshot_stride=1000), velocities=-last.velocities)
    reversal = np.abs(back.frames[-1].positions - trimer.positions).max()

    nve = run_md(ref, trimer, MDConfig(n_steps=10_000, mode="NVE"))
    water_drift = energy_drift(nve)
    nvt = run_md(ref, trimer, MDConfig(n_steps=10_000, snapshot_stride=5))
    temps = nvt.temperatures
    t_mean = temps[len(temps) // 2 :].mean()
    elapsed = time.perf_counter() - t0
    ok = (ho_drift < 1e-6 and reversal < 1e-8 and water_drift < 1e-5 and abs(t_mean - 300) <= 15
          and elapsed < 300 and not nve.unstable and not nvt.unstable)
    criterion(3, ok, f"oscillator_drift={ho_drift:.1e} reversal={reversal:.1e} water_drift={water_drift:.1e} "
                     f"(pointwise max {max_energy_deviation(nve):.1e}) nvt_mean_T={t_mean:.1f}K "
                     f"runtime={elapsed:.1f}s")
    assert ok


# ------------------------------------------------------ workflow fixtures


@pytest.fixture(scope="module")
def workflow(surface):
    """Pretrain on minima, then finetune and train from scratch on non-minima."""
    timings = {}
    t0 = time.perf_counter()
    minima = generate_minima(surface, range(3, 9), 6300, seed=11)
    sources = generate_minima(surface, range(3, 9), 400, seed=12)
    nonmin = generate_nonminima(surface, sources, 300.0, steps=2000, seed=5, per_minimum=4)
    timings["data"] = time.perf_counter() - t0

    t = time.perf_counter()
    pre_split = split_dataset(minima, (0.8, 0.1, 0.1), seed=0)
    pre = train(minima, pre_split, 0, LossConfig.pretrain(),
                Schedule(epochs=30, batch_size=32, lr=2e-3, lr_patience=5), DESK)
    timings["pretrain"] = time.perf_counter() - t

    data = ClusterSet(nonmin.clusters[:1250], nonmin.tags)
    split = split_dataset(data, (0.8, 0.1, 0.1), seed=1)
    loss = LossConfig.with_forces()
    sched = Schedule(epochs=60, lr=1e-3, lr_patience=5, seed=3)
    t = time.perf_counter()
    ft = train(data, split, pre, loss, sched)
    timings["finetune"] = time.perf_counter() - t
    t = time.perf_counter()
    scratch = train(data, split, 0, loss, sched, DESK)
    timings["scratch"] = time.perf_counter() - t
    return {
        "minima": minima, "pre_split": pre_split, "pre": pre, "nonmin": nonmin, "data": data,
        "split": split, "ft": ft, "scratch": scratch, "timings": timings,
    }


# ------------------------------------------------------------ criterion 4


@pytest.mark.slow
def test_active_sampling(workflow, surface, criterion):
    xs = np.linspace(-6, 6, 2401)
    erf_err = max(abs(erf(float(x)) - erf_oracle(float(x))) for x in xs)

    stats = validation_error_stats(workflow["ft"].params, workflow["data"].subset(workflow["split"].val))
    eps_grid = stats.mu + np.linspace(-3, 6, 181) * stats.sigma
    p_grid = np.linspace(0.001, 0.999, 50)
    table = np.array([[promotion_decision(e, stats, p) for e in eps_grid] for p in p_grid])
    monotone = bool(np.all(np.diff(table.astype(int), axis=0) >= 0) and np.all(np.diff(table.astype(int), axis=1) >= 0))
    z = erf_bisect_inverse(0.95)
    equivalent = all(promotion_decision(e, stats, 0.05) == ((e - stats.mu) / stats.sigma > z)
                     for e in eps_grid if abs((e - stats.mu) / stats.sigma - z) > 1e-9)

    # reserve: 200 unseen non-minima plus 5 with one O-H bond squeezed to 55%
    pool = workflow["nonmin"].clusters
    normal = list(pool[1252:1452])
    planted = []
    for c in pool[1452:1457]:
        pos = c.positions.copy()
        pos[1] = pos[0] + 0.55 * (pos[1] - pos[0])
        planted.append(c.replace(positions=pos))
    planted = list(relabel(surface, planted, "A", with_forces=True))
    reserve = ClusterSet(normal + planted)
    bad = set(range(len(normal), len(reserve)))
    eps = per_sample_force_error(workflow["ft"].params, reserve.clusters)
    planted_z = (eps[len(normal):] - stats.mu) / stats.sigma

    active = ActiveConfig(p_tol=0.05)
    pools = SamplingPools([], np.arange(len(reserve)))
    while not bad <= set(pools.train_subset.tolist()) and len(pools.reserve):
        pools = active_round(workflow["ft"].params, pools, reserve, stats, active.p_tol, active.score_count, active.seed)
    order = [r.sample_id for r in pools.log if r.promoted]
    all_bad = bad <= set(order)
    before = sum(1 for s in order[: max(order.index(b) for b in bad)] if s not in bad) if all_bad else len(normal)
    frac_before = before / len(normal)
    frac_total = sum(1 for s in order if s not in bad) / len(normal)
    ok = erf_err < 1e-7 and monotone and equivalent and all_bad and (planted_z > 3).all() and frac_before <= 0.1
    criterion(4, ok, f"erf_err={erf_err:.1e} monotone={monotone} erfinv_equiv={equivalent} "
                     f"planted_z_min={planted_z.min():.1f} rounds={pools.rounds} "
                     f"normals_before_last_planted={frac_before:.3f} normals_promoted_total={frac_total:.3f}")
    assert ok


# ------------------------------------------------------------ criterion 5


@pytest.mark.slow
def test_data_space_expansion(workflow, criterion):
    test = workflow["data"].subset(workflow["split"].test)
    ft = evaluate_model(workflow["ft"].params, test, tag="nonminima")
    sc = evaluate_model(workflow["scratch"].params, test, tag="nonminima")
    pre = evaluate_model(workflow["pre"].params, test, tag="nonminima")
    total = sum(workflow["timings"].values())
    ok = (ft.f_ang_mean < sc.f_ang_mean and ft.f_mag_mae < sc.f_mag_mae and total < 3600
          and len(workflow["pre_split"].train) >= 5000 and len(workflow["split"].train) >= 1000)
    criterion(5, ok, f"n_pretrain={len(workflow['pre_split'].train)} n_train={len(workflow['split'].train)} "
                     f"F_ang ft={ft.f_ang_mean:.4f} scratch={sc.f_ang_mean:.4f} pre={pre.f_ang_mean:.4f} "
                     f"F_mag ft={ft.f_mag_mae:.3f} scratch={sc.f_mag_mae:.3f} pre={pre.f_mag_mae:.3f} "
                     f"runtime={total:.0f}s")
    assert ok


# ------------------------------------------------------------ criterion 6


@pytest.mark.slow
def test_md_validity(workflow, surface, criterion):
    hexamer = generate_minima(surface, [6], 1, seed=0)[0]
    ref = SurrogateProvider(surface)
    cfg = MDConfig(n_steps=10_000, temperature=300.0)
    verdicts = {}
    for name in ("ft", "pre"):
        trajs = run_ensemble(NNPProvider(workflow[name].params), hexamer, cfg, range(10))
        verdicts[name] = [validate_trajectory(t, ref).verdict for t in trajs]
    n_valid = verdicts["ft"].count("valid")
    n_pre_bad = sum(v != "valid" for v in verdicts["pre"])
    ok = n_valid >= 8 and n_pre_bad > 5
    criterion(6, ok, f"finetuned valid={n_valid}/10 pretrained failed_or_truncated={n_pre_bad}/10 "
                     f"pretrained verdicts={sorted(set(verdicts['pre']))}")
    assert ok


# ------------------------------------------------------------ criterion 7


@pytest.mark.slow
def test_pes_transfer(workflow, surface, criterion):
    t0 = time.perf_counter()
    a_minima = generate_minima(surface, range(3, 9), 700, seed=21)
    b = relabel(surface, a_minima, "B", tag="minima")
    split = split_dataset(b, (500 / 700, 100 / 700, 100 / 700), seed=2)
    test = b.subset(split.test)
    sched = Schedule(epochs=100, lr=1e-3, lr_patience=5, seed=3)
    ft = train(b, split, workflow["pre"], LossConfig(), sched)
    scratch = train(b, split, 0, LossConfig(), sched, DESK)
    r_ft = evaluate_model(ft.params, test, tag="B")
    r_sc = evaluate_model(scratch.params, test, tag="B")
    r_pre = evaluate_model(workflow["pre"].params, test, tag="B")

    a_test = [a_minima.clusters[i] for i in split.test]
    per_water_a = [c.energy / c.n_waters for c in a_test]
    hists = comparison_histograms({"A": per_water_a, "B": r_ft.e_h2o_true, "ft": r_ft.e_h2o_pred})
    shift_ref = hists["B"].mean() - hists["A"].mean()
    shift_ft = hists["ft"].mean() - hists["A"].mean()
    elapsed = time.perf_counter() - t0
    ok = (len(split.train) == 500 and r_ft.e_h2o_mae < r_sc.e_h2o_mae and r_sc.e_h2o_mae < r_pre.e_h2o_mae
          and shift_ref > 0 and shift_ft > 0 and elapsed < 1800)
    criterion(7, ok, f"E_H2O MAE ft={r_ft.e_h2o_mae:.4f} scratch={r_sc.e_h2o_mae:.4f} pretrained={r_pre.e_h2o_mae:.4f} "
                     f"hist_shift B-A={shift_ref:.3f} ft-A={shift_ft:.3f} runtime={elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------ criterion 8


def test_reproducibility(tmp_path, criterion):
    def run(name, *argv):
        assert main([argv[0], "--run-dir", str(tmp_path / name), *argv[1:]]) == 0
        return tmp_path / name

    tiny = ["--features", "8", "--interactions", "1", "--rbf", "8"]
    minima = run("minima", "gen-data", "--pes", "A", "--sizes", "3", "--count", "16", "--seed", "4")
    nonmin = run("nonmin", "gen-data", "--pes", "A", "--sizes", "3", "--count", "20", "--nonminima",
                 "--steps", "200", "--seed", "6", "--split", "0.6,0.2,0.2")
    pre = run("pre", "pretrain", "--data", str(minima / "data.xyz"), "--epochs", "3", "--batch-size", "4", *tiny)
    ck = str(pre / "checkpoint.nnpf")
    runs = [
        minima, nonmin, pre,
        run("ft", "finetune", "--from", ck, "--data", str(nonmin / "data.xyz"), "--active", "--round-period", "1",
            "--score-count", "4", "--p-tol", "0.4", "--epochs", "2", "--batch-size", "4"),
        run("eval", "eval", "--from", ck, "--test", str(nonmin / "data.xyz"), "--hist"),
        run("md", "md", "--from", ck, "--cluster", str(minima / "data.xyz"), "--steps", "200", "--seeds", "2"),
    ]
    results = {}
    for d in runs:
        code = main(["rerun", "--manifest", str(d / "manifest.json"), "--run-dir", str(tmp_path / f"re-{d.name}")])
        rep = json.loads((tmp_path / f"re-{d.name}" / "rerun.json").read_text())
        n_out = len(json.loads((d / "manifest.json").read_text())["outputs"])
        results[d.name] = (code == 0 and rep["identical"] and n_out > 0, n_out)
    ok = all(v for v, _ in results.values())
    criterion(8, ok, " ".join(f"{k}:{'identical' if v else 'DIFFERS'}({n} files)" for k, (v, n) in results.items()))
    assert ok


# ------------------------------------------------------------ criterion 9


def test_overfit(surface, criterion):
    data = generate_minima(surface, [3, 4, 5], 10, seed=31)
    idx = np.arange(10)
    split = SplitIndices(idx, idx, idx, 0, (1.0, 0.0, 0.0))
    ck = train(data, split, 0, LossConfig(),
               Schedule(epochs=2000, batch_size=10, lr=3e-3, lr_patience=50, min_lr=1e-5), DESK)
    mae = float(np.abs(predict_energy(ck.params, data.clusters) - [c.energy for c in data]).mean())
    ok = mae < 0.01
    criterion(9, ok, f"train_energy_mae={mae:.2e} kcal/mol per cluster after {ck.history[-1]['epoch']} epochs")
    assert ok
