"""Command-line entry point: ``nnpforge <command> [flags]``.

Every command writes into its own ``runs/<timestamp>-<command>/`` directory
with a ``manifest.json`` that records the resolved configuration, input and
output hashes, so ``nnpforge rerun --manifest ...`` can repeat it exactly.

Exit codes: 0 success (an unstable trajectory is a result, not a failure),
2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import platform
import socket
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .chemdata import ClusterSet, SplitIndices, read_xyz, save_xyz, split_dataset
from .dynamics import MDConfig, UnstableDynamics, load_trajectory, run_ensemble, save_trajectory, validate_trajectory
from .evaluation import comparison_histograms, evaluate_model, markdown_table
from .model import ModelConfig, NNPProvider
from .sampling import ActiveConfig, SamplingPools, active_training_loop
from .surrogate import SurrogateProvider, SurrogateSpec, generate_minima, generate_nonminima, relabel
from .training import (
    CheckpointError,
    LossConfig,
    Schedule,
    TrainingDiverged,
    load_checkpoint,
    save_checkpoint,
    train,
    write_history_csv,
)

log = logging.getLogger("nnpforge")

EXIT_USAGE = 2
EXIT_NUMERIC = 3
CONFIG_SECTIONS = ("model", "loss", "schedule", "md", "sampling", "surrogate")


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def parse_sizes(text: str) -> list:
    """``"3-8"`` or ``"3,4,6"`` to a list of ints."""
    try:
        out = []
        for part in str(text).split(","):
            if "-" in part:
                lo, hi = part.split("-")
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise UsageError(f"cannot parse sizes {text!r}") from None
    if not out:
        raise UsageError("empty size list")
    return out


def parse_fractions(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"cannot parse fractions {text!r}") from None


def load_config(path) -> dict:
    if path is None:
        return {k: {} for k in CONFIG_SECTIONS}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    unknown = set(doc) - set(CONFIG_SECTIONS)
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return {k: dict(doc.get(k, {})) for k in CONFIG_SECTIONS}


def _override(section: dict, **flags) -> dict:
    out = dict(section)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _build(cls, values: dict, what: str):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {what} configuration: {exc}") from None


def _read_set(path, require_energy=True) -> ClusterSet:
    try:
        return read_xyz(path, require_energy=require_energy)
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise UsageError(f"no such checkpoint: {path}") from None
    except CheckpointError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _split_for(data_path, dataset, seed, fractions):
    """Split files next to the data when present, otherwise a fresh split."""
    stem = Path(data_path)
    for directory in (stem.parent / (stem.stem + "_split"), stem.parent):
        if all((directory / f"{p}.idx").exists() for p in ("train", "val", "test")):
            sp = SplitIndices.load(directory, seed, fractions)
            if max(np.concatenate([sp.train, sp.val, sp.test])) < len(dataset):
                return sp
    return split_dataset(dataset, fractions, seed)


def _provider(args, spec_cfg):
    if getattr(args, "from_", None):
        ckpt = _load_ckpt(args.from_)
        return NNPProvider(ckpt.params), ckpt
    spec = _build(SurrogateSpec, spec_cfg, "surrogate")
    return SurrogateProvider(spec, args.pes), None


class Run:
    """Output directory plus manifest bookkeeping for one command."""

    def __init__(self, args, command: str):
        self.args = args
        self.command = command
        if args.run_dir:
            self.dir = Path(args.run_dir)
        else:
            stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
            self.dir = Path(args.runs_root) / f"{stamp}-{command}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.inputs = {}
        self.outputs = []
        self.resolved = {}
        self.results = {}

    def path(self, name) -> Path:
        p = self.dir / name
        self.outputs.append(name)
        return p

    def input(self, path):
        if path is not None and Path(path).is_file():
            self.inputs[str(path)] = sha256_file(path)

    def write_manifest(self, status="ok"):
        flags = {k: v for k, v in vars(self.args).items() if k not in ("func", "run_dir")}
        doc = {
            "command": self.command,
            "flags": flags,
            "config": self.resolved,
            "inputs": self.inputs,
            "outputs": {n: sha256_file(self.dir / n) for n in sorted(set(self.outputs)) if (self.dir / n).exists()},
            "results": self.results,
            "status": status,
            "version": __version__,
            "host": {"hostname": socket.gethostname(), "platform": platform.platform(),
                     "python": platform.python_version(), "numpy": np.__version__},
            "created": _dt.datetime.now().isoformat(timespec="seconds"),
        }
        (self.dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
        return doc


def _set_threads(n):
    if n is None or n < 1:
        return
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
    except ImportError:  # pragma: no cover
        pass


# ----------------------------------------------------------------- commands


def cmd_gen_data(args, cfg, run: Run):
    sizes = parse_sizes(args.sizes)
    if args.count < 1:
        raise UsageError("--count must be positive")
    spec = _build(SurrogateSpec, cfg["surrogate"], "surrogate")
    run.resolved = {"surrogate": spec.to_dict()}
    try:
        if args.nonminima:
            n_src = -(-args.count // args.per_minimum)
            src = generate_minima(spec, sizes, n_src, seed=args.seed, workers=args.threads or 1)
            data = generate_nonminima(spec, src, args.temp, args.steps, args.seed, args.per_minimum,
                                      surface=args.pes)
            data = ClusterSet(data.clusters[: args.count], data.tags)
        else:
            data = generate_minima(spec, sizes, args.count, seed=args.seed, workers=args.threads or 1)
            if args.pes == "B":
                data = relabel(spec, data, "B", tag="minima")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        split = split_dataset(data, parse_fractions(args.split), args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = run.path(args.output)
    save_xyz(out, data)
    split.save(run.dir)
    run.outputs += ["train.idx", "val.idx", "test.idx"]
    run.results = {"n_clusters": len(data), "n_train": len(split.train)}
    print(f"wrote {len(data)} clusters to {out}")


def _loss_schedule(args, cfg, finetune: bool):
    """Defaults, then config-file sections, then flags."""
    loss = {"energy_weight": 0.01, "force_weight": 0.99} if finetune else {}
    loss.update(cfg["loss"])
    if args.force_weight is not None:
        loss.update(force_weight=args.force_weight, energy_weight=1.0 - args.force_weight)
    sched = {"lr": 1e-4} if finetune else {}
    sched.update(cfg["schedule"])
    sched = _override(sched, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed)
    return _build(LossConfig, loss, "loss"), _build(Schedule, sched, "schedule")


def _finish_training(run: Run, ckpt):
    save_checkpoint(ckpt, run.path("checkpoint.nnpf"))
    write_history_csv(ckpt.history, run.path("history.csv"))
    run.results = {"checkpoint_id": ckpt.id, "best_val_loss": ckpt.meta.get("best_val_loss"),
                   "provenance": ckpt.provenance}
    print(f"checkpoint {ckpt.id} -> {run.dir / 'checkpoint.nnpf'}")


def cmd_pretrain(args, cfg, run: Run):
    data = _read_set(args.data)
    run.input(args.data)
    model_cfg = _build(ModelConfig, _override(
        {"element_vocabulary": tuple(sorted(data.elements))} | cfg["model"],
        n_atom_features=args.features, n_interactions=args.interactions, n_rbf=args.rbf, cutoff=args.cutoff,
    ), "model")
    loss, sched = _loss_schedule(args, cfg, finetune=False)
    split = _split_for(args.data, data, args.seed, parse_fractions(args.split))
    run.resolved = {"model": model_cfg.to_dict(), "loss": asdict(loss), "schedule": asdict(sched)}
    ckpt = train(data, split, args.seed, loss, sched, model_cfg)
    _finish_training(run, ckpt)


def cmd_finetune(args, cfg, run: Run):
    parent = _load_ckpt(args.from_)
    data = _read_set(args.data)
    run.input(args.from_)
    run.input(args.data)
    loss, sched = _loss_schedule(args, cfg, finetune=True)
    split = _split_for(args.data, data, args.seed, parse_fractions(args.split))
    run.resolved = {"model": parent.config.to_dict(), "loss": asdict(loss), "schedule": asdict(sched)}
    try:
        if args.active:
            s = _override(cfg["sampling"], p_tol=args.p_tol, round_period=args.round_period,
                          score_count=args.score_count)
            subset = s.pop("subset_fraction", args.subset_fraction)
            active = _build(ActiveConfig, s | {"seed": args.seed}, "sampling")
            run.resolved["sampling"] = asdict(active) | {"subset_fraction": subset}
            n_sub = max(1, int(round(subset * len(split.train))))
            pools = SamplingPools.from_indices(split.train, n_sub, args.seed)
            ckpt, _ = active_training_loop(parent, data, split, pools, loss, sched, active,
                                           log_path=run.path("promotion_log.csv"))
        else:
            ckpt = train(data, split, parent, loss, sched)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _finish_training(run, ckpt)


def _md_config(args, cfg):
    return _build(MDConfig, _override(
        cfg["md"], dt=args.dt, n_steps=args.steps, temperature=args.temp, tau=args.tau,
        mode=("NVE" if args.nve else None), snapshot_stride=args.stride,
    ), "md")


def cmd_md(args, cfg, run: Run):
    provider, _ = _provider(args, cfg["surrogate"])
    run.input(args.from_)
    run.input(args.cluster)
    cluster = _read_set(args.cluster, require_energy=False).clusters[args.frame]
    md = _md_config(args, cfg)
    seeds = [args.seed + k for k in range(args.seeds)]
    run.resolved = {"md": md.to_dict(), "seeds": seeds}
    if not getattr(args, "from_", None):
        run.resolved["surrogate"] = provider.spec.to_dict()
    trajs = run_ensemble(provider, cluster, md, seeds)
    verdicts = {}
    for s, t in zip(seeds, trajs):
        name = f"traj_seed{s}.xyz"
        save_trajectory(t, run.path(name))
        run.outputs.append(f"traj_seed{s}.json")
        verdicts[name] = "unstable" if t.unstable else "complete"
    run.results = {"trajectories": verdicts}
    print(json.dumps(verdicts, indent=1))


def cmd_validate(args, cfg, run: Run):
    spec = _build(SurrogateSpec, cfg["surrogate"], "surrogate")
    ref = SurrogateProvider(spec, args.pes)
    run.resolved = {"surrogate": spec.to_dict()}
    verdicts = {}
    for p in args.traj:
        run.input(p)
        try:
            traj = load_trajectory(p)
        except FileNotFoundError:
            raise UsageError(f"no such trajectory: {p}") from None
        res = validate_trajectory(traj, ref)
        stem = Path(p).stem
        res.write_csv(run.path(f"{stem}_validation.csv"))
        save_trajectory(traj, run.path(f"{stem}.xyz"), verdict=res.verdict,
                        extra={"reference": f"surrogate-{args.pes}", "max_reference_energy": float(res.reference_energies.max())})
        run.outputs.append(f"{stem}.json")
        verdicts[stem] = res.verdict
        print(f"{p}: verdict={res.verdict}")
    run.results = {"verdicts": verdicts}


def cmd_eval(args, cfg, run: Run):
    provider, ckpt = _provider(args, cfg["surrogate"])
    model = ckpt.params if ckpt is not None else provider
    run.input(args.from_)
    test = _read_set(args.test)
    run.input(args.test)
    rep = evaluate_model(model, test, tag=args.tag or "")
    if args.forces and rep.f_mag_mae is None:
        rep.notes.append("force metrics requested but the test set has no forces")
    run.path("metrics.json").write_text(rep.to_json())
    if args.hist:
        hists = comparison_histograms({"pred": rep.e_h2o_pred, "ref": rep.e_h2o_true}, args.bins)
        for k, h in hists.items():
            h.write_csv(run.path(f"hist_{k}.csv"))
    run.results = rep.to_dict()
    print(rep.to_json())


def cmd_compare(args, cfg, run: Run):
    try:
        rows = json.loads(Path(args.rows).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read rows {args.rows}: {exc}") from None
    run.input(args.rows)
    host = socket.gethostname()
    table_rows = []
    for r in rows:
        if "report" in r and isinstance(r["report"], str):
            rep = json.loads(Path(r["report"]).read_text())
        else:
            ckpt = _load_ckpt(r["checkpoint"])
            test = _read_set(r["test"])
            run.input(r["checkpoint"])
            run.input(r["test"])
            rep = evaluate_model(ckpt.params, test, tag=r.get("test_set", "")).to_dict()
            r.setdefault("initialization", ckpt.provenance.get("init", ""))
            r.setdefault("n_train", ckpt.meta.get("n_train", ""))
        table_rows.append({"host": r.get("host", host), **r, "report": rep})
    md = markdown_table(table_rows, kind=args.kind)
    run.path("table.md").write_text(md)
    print(md)


def cmd_rerun(args) -> int:
    try:
        man = json.loads(Path(args.manifest).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read manifest {args.manifest}: {exc}") from None
    for p, h in man["inputs"].items():
        if not Path(p).is_file() or sha256_file(p) != h:
            log.warning("input %s changed since the original run", p)
    flags = dict(man["flags"])
    ns = argparse.Namespace(**flags)
    ns.run_dir = args.run_dir
    ns.runs_root = args.runs_root
    ns.func = COMMANDS[man["command"]]
    code = _execute(ns, man["command"])
    if code != 0:
        return code
    new_dir = Path(_LAST_RUN_DIR[0])
    new = json.loads((new_dir / "manifest.json").read_text())
    diff = sorted(k for k in man["outputs"] if new["outputs"].get(k) != man["outputs"][k])
    report = {"original": str(Path(args.manifest).parent), "rerun": str(new_dir),
              "identical": not diff, "differing": diff}
    (new_dir / "rerun.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report, indent=2))
    return 0 if not diff else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "md": cmd_md,
    "validate": cmd_validate,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


# ------------------------------------------------------------------ parser


def _threads_default():
    v = os.environ.get("NNPFORGE_THREADS")
    try:
        return int(v) if v else None
    except ValueError:
        return None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nnpforge", description="Neural network potential workflow for water clusters.")
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with model/loss/schedule/md/sampling/surrogate sections")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--runs-root", default="runs")
    common.add_argument("--run-dir", help="explicit output directory")
    common.add_argument("--threads", type=int, default=_threads_default())
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate surrogate datasets")
    g.add_argument("--pes", choices=("A", "B"), required=True)
    g.add_argument("--sizes", default="3-8")
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--nonminima", action="store_true")
    g.add_argument("--temp", type=float, default=300.0)
    g.add_argument("--steps", type=int, default=2000)
    g.add_argument("--per-minimum", type=int, default=4)
    g.add_argument("--split", default="0.8,0.1,0.1")
    g.add_argument("--output", default="data.xyz")

    def training_flags(q):
        q.add_argument("--data", required=True)
        q.add_argument("--epochs", type=int)
        q.add_argument("--lr", type=float)
        q.add_argument("--batch-size", type=int)
        q.add_argument("--force-weight", type=float)
        q.add_argument("--split", default="0.8,0.1,0.1")

    t = sub.add_parser("pretrain", parents=[common], help="train from scratch")
    training_flags(t)
    t.add_argument("--features", type=int)
    t.add_argument("--interactions", type=int)
    t.add_argument("--rbf", type=int)
    t.add_argument("--cutoff", type=float)

    f = sub.add_parser("finetune", parents=[common], help="retrain from a checkpoint")
    f.add_argument("--from", dest="from_", metavar="CKPT", required=True)
    training_flags(f)
    f.add_argument("--active", action="store_true")
    f.add_argument("--p-tol", type=float)
    f.add_argument("--round-period", type=int)
    f.add_argument("--score-count", type=int)
    f.add_argument("--subset-fraction", type=float, default=0.25)

    m = sub.add_parser("md", parents=[common], help="run molecular dynamics")
    src = m.add_mutually_exclusive_group(required=True)
    src.add_argument("--from", dest="from_", metavar="CKPT")
    src.add_argument("--pes", choices=("A", "B"))
    m.add_argument("--cluster", required=True)
    m.add_argument("--frame", type=int, default=0)
    m.add_argument("--temp", type=float)
    m.add_argument("--steps", type=int)
    m.add_argument("--dt", type=float)
    m.add_argument("--tau", type=float)
    m.add_argument("--stride", type=int)
    m.add_argument("--nve", action="store_true")
    m.add_argument("--seeds", type=int, default=1)

    v = sub.add_parser("validate", parents=[common], help="re-score trajectories on a surrogate")
    v.add_argument("--traj", nargs="+", required=True)
    v.add_argument("--pes", choices=("A", "B"), default="A")

    e = sub.add_parser("eval", parents=[common], help="test-set metrics")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--from", dest="from_", metavar="CKPT")
    src.add_argument("--pes", choices=("A", "B"))
    e.add_argument("--test", required=True)
    e.add_argument("--tag")
    e.add_argument("--forces", action="store_true", help="require force metrics")
    e.add_argument("--hist", action="store_true")
    e.add_argument("--bins", type=int, default=60)

    c = sub.add_parser("compare", parents=[common], help="Markdown comparison table")
    c.add_argument("--rows", required=True)
    c.add_argument("--kind", choices=("forces", "energy"), default="forces")

    r = sub.add_parser("rerun", parents=[common], help="repeat a run from its manifest")
    r.add_argument("--manifest", required=True)
    return p


_LAST_RUN_DIR = [None]


def _execute(args, command) -> int:
    run = None
    try:
        cfg = load_config(getattr(args, "config", None))
        run = Run(args, command)
        run.input(getattr(args, "config", None))
        _LAST_RUN_DIR[0] = str(run.dir)
        args.func(args, cfg, run)
        run.write_manifest()
        return 0
    except UsageError as exc:
        print(f"nnpforge {command}: error: {exc}", file=sys.stderr)
        if run is not None:
            run.write_manifest("usage-error")
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError, UnstableDynamics) as exc:
        print(f"nnpforge {command}: numerical failure: {exc}", file=sys.stderr)
        if run is not None:
            run.write_manifest("numerical-failure")
        return EXIT_NUMERIC


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads(args.threads)
    if args.command == "rerun":
        try:
            return cmd_rerun(args)
        except UsageError as exc:
            print(f"nnpforge rerun: error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    args.func = COMMANDS[args.command]
    return _execute(args, args.command)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
