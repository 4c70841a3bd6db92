"""Command line entry points: ``metassm <verb> --config FILE [flags]``.

Verbs
-----
datagen     simulate source and target trajectories
train       meta-train an NSSM on the source trajectories
adapt-eval  adapt a checkpoint to target data and score the rest
ekf         run the EKF with a Case II checkpoint on target systems
report      collect evaluation reports and EKF summaries into one table

Exit codes: 0 success, 1 usage/config/IO error or architecture mismatch,
2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import ekf, experiments, meta, metrics, nssm, systems

log = logging.getLogger("metassm")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    pass


def _parser():
    p = argparse.ArgumentParser(prog="metassm", description="Meta-learned neural state-space models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="config file or preset name")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--jobs", type=int, help="worker processes (datagen)")
        sp.add_argument("--out", help="output directory (default: output_dir of the config)")
        return sp

    common(sub.add_parser("datagen", help="simulate source/target trajectories"))
    tr = common(sub.add_parser("train", help="meta-train on the source dataset"))
    tr.add_argument("--algorithm", choices=meta.ALGORITHMS)
    tr.add_argument("--mask", help="inner-loop layer paths for anil, comma separated (globs allowed)")
    tr.add_argument("--epochs", type=int)
    ae = common(sub.add_parser("adapt-eval", help="adapt a checkpoint to targets and evaluate"))
    ae.add_argument("--checkpoint")
    ae.add_argument("--adapt-fraction", type=float, action="append",
                    help="prefix fraction used for adaptation; repeat for a grid")
    ae.add_argument("--algorithm", choices=meta.ALGORITHMS)
    ae.add_argument("--mask")
    ae.add_argument("--target", help="target trajectory CSV (default: every target in the dataset)")
    ek = common(sub.add_parser("ekf", help="EKF state estimation on target systems"))
    ek.add_argument("--checkpoint")
    ek.add_argument("--adapt-fraction", type=float)
    ek.add_argument("--algorithm", choices=meta.ALGORITHMS)
    ek.add_argument("--mask")
    ek.add_argument("--target")
    ek.add_argument("--no-adapt", action="store_true", help="filter with the unadapted checkpoint")
    ek.add_argument("--project", choices=("on", "off"), help="conic projection of the posterior mean")
    common(sub.add_parser("report", help="summarise results in the output directory"))
    return p


def _load_config(args):
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        over["jobs"] = args.jobs
    m = {}
    if getattr(args, "algorithm", None):
        m["algorithm"] = args.algorithm
    if getattr(args, "mask", None):
        m["inner_mask"] = args.mask
        m.setdefault("algorithm", "anil")
    if getattr(args, "epochs", None) is not None:
        m["epochs"] = args.epochs
    if m:
        over["meta"] = m
    cfg = config_mod.load(args.config, over)
    if (cfg["meta"] or {}).get("algorithm") in ("maml", "fomaml", "reptile"):
        cfg["meta"].pop("inner_mask", None)
    return cfg


def _out_dir(args, cfg) -> Path:
    return Path(args.out or cfg["output_dir"])


def _data_dir(cfg, out: Path) -> Path:
    return Path(cfg["paths"].get("data_dir") or out / "data")


def _checkpoint(args, cfg, out: Path) -> Path:
    return Path(getattr(args, "checkpoint", None) or cfg["paths"].get("checkpoint") or out / "checkpoint")


def _targets(args, cfg, ds):
    target = getattr(args, "target", None) or cfg["paths"].get("target")
    if target:
        if not Path(target).exists():
            raise FileNotFoundError(f"target trajectory {target} not found")
        return [systems.Trajectory.load(target)]
    if not ds.targets:
        raise UsageError("the dataset has no target trajectories")
    return ds.targets


def _load_checkpoint(cfg, ds, path: Path):
    """Load a checkpoint and check it against the configured architecture."""
    if not Path(str(path) + ".json").exists():
        raise FileNotFoundError(f"checkpoint {path} not found; run train first")
    model_saved, ws = nssm.load_model(path)
    problem = experiments.make_problem(cfg, ds.sources)
    nssm.check_compatible(problem.model, ws)
    # the stored normalizer is the one the weights were trained with
    problem.model = problem.model.with_normalizer(model_saved.normalizer)
    return problem, ws


def cmd_datagen(cfg, out: Path) -> Path:
    ds = experiments.generate(cfg)
    manifest = experiments.write_dataset(ds, _data_dir(cfg, out))
    config_mod.dump(cfg, out / "config.yaml")
    log.info("wrote %d source and %d target trajectories to %s", len(ds.sources), len(ds.targets), manifest.parent)
    return manifest


def cmd_train(cfg, out: Path) -> meta.TrainResult:
    ds = experiments.load_dataset(_data_dir(cfg, out))
    problem = experiments.make_problem(cfg, ds.sources)
    mcfg = experiments.meta_config(cfg)
    if mcfg.algorithm == "anil":
        mcfg.mask_paths(problem.model.init(0).paths)
    ws0 = problem.model.init(cfg["seed"])
    res = experiments.train_meta(problem, ws0, ds.sources, mcfg, out)
    config_mod.dump(cfg, out / "config.yaml")
    log.info("best validation loss %.4g at epoch %d (initial %.4g)", res.best_val_loss, res.best_epoch,
             res.initial_val_loss)
    return res


def cmd_adapt_eval(cfg, out: Path, checkpoint: Path, fractions, targets=None) -> list:
    ds = experiments.load_dataset(_data_dir(cfg, out))
    problem, ws = _load_checkpoint(cfg, ds, checkpoint)
    mcfg = experiments.meta_config(cfg)
    targets = ds.targets if targets is None else targets
    reports = []
    for tr in targets:
        for f in fractions:
            rep, _ = experiments.adapt_eval(problem, ws, tr, f, mcfg, model_id=str(checkpoint),
                                            dataset_id=tr.name, seeds={"config": cfg["seed"], **tr.seeds})
            name = f"eval_{tr.name or 'target'}_{int(round(100 * f)):03d}"
            rep.save(out / "reports" / f"{name}.json")
            reports.append(rep)
            log.info("%s adapt %.0f%%: rmse %.4g fit %.2f%%", tr.name, 100 * f, rep.rmse, rep.fit_percent)
    return reports


def cmd_ekf(cfg, out: Path, checkpoint: Path, fraction: float, adapt_on: bool = True, project=None,
            targets=None) -> Path:
    ds = experiments.load_dataset(_data_dir(cfg, out))
    problem, ws = _load_checkpoint(cfg, ds, checkpoint)
    if problem.case != 2:
        raise UsageError("the ekf verb needs a Case II (state-space) checkpoint")
    mcfg = experiments.meta_config(cfg)
    settings = experiments.section(cfg, "ekf")
    if project is not None:
        settings["project"] = project
    targets = ds.targets if targets is None else targets
    rows = []
    for tr in targets:
        start = experiments.context_length(tr, fraction)
        w = experiments.adapt(problem, ws, tr, fraction, mcfg) if adapt_on else ws
        res = experiments.ekf_run(problem, w, tr, start, settings)
        res.to_csv(out / "ekf" / f"{tr.name or 'target'}.csv")
        rows.append({"system": tr.name, "adapted": int(adapt_on), "start": start,
                     "cumulative_error": res.cumulative_error(), "rmse": res.rmse(),
                     "mean_innovation": float(np.mean(res.innovation_norms))})
    path = out / "ekf" / "summary.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path


def cmd_report(out: Path) -> Path:
    """Write ``report.csv`` from saved evaluation reports and print a table."""
    rows = []
    for p in sorted((out / "reports").glob("*.json")):
        d = metrics.load_report(p)
        rows.append({"kind": "eval", "name": p.stem, "dataset": d.get("dataset_id", ""),
                     "adapt_fraction": d.get("extra", {}).get("adapt_fraction", ""),
                     "rmse": d["rmse"], "fit_percent": d["fit_percent"]})
    summary = out / "ekf" / "summary.csv"
    if summary.exists():
        with open(summary) as fh:
            for r in csv.DictReader(fh):
                rows.append({"kind": "ekf", "name": r["system"], "dataset": r["system"], "adapt_fraction": "",
                             "rmse": float(r["rmse"]), "fit_percent": "",
                             "cumulative_error": float(r["cumulative_error"])})
    if not rows:
        raise FileNotFoundError(f"no reports found under {out}")
    fields = ["kind", "name", "dataset", "adapt_fraction", "rmse", "fit_percent", "cumulative_error"]
    path = out / "report.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in fields})
    for r in rows:
        print(f"{r['kind']:5s} {r['name']:40s} rmse={r['rmse']:.4g}")
    return path


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.verb == "report":
            cfg = _load_config(args)
            cmd_report(_out_dir(args, cfg))
            return EXIT_OK
        cfg = _load_config(args)
        out = _out_dir(args, cfg)
        if args.verb == "datagen":
            print(cmd_datagen(cfg, out))
        elif args.verb == "train":
            res = cmd_train(cfg, out)
            print(json.dumps({"best_epoch": res.best_epoch, "initial_val_loss": res.initial_val_loss,
                              "best_val_loss": res.best_val_loss}))
        elif args.verb == "adapt-eval":
            ev = cfg["evaluation"] or {}
            fractions = args.adapt_fraction or [ev.get("adapt_fraction", 0.2)]
            for f in fractions:
                if not 0.0 <= f < 1.0:
                    raise UsageError(f"--adapt-fraction must lie in [0, 1), got {f}")
            ds_targets = _targets(args, cfg, experiments.load_dataset(_data_dir(cfg, out)))
            for rep in cmd_adapt_eval(cfg, out, _checkpoint(args, cfg, out), fractions, ds_targets):
                print(json.dumps({"dataset": rep.dataset_id, "adapt_fraction": rep.extra["adapt_fraction"],
                                  "rmse": rep.rmse, "fit_percent": rep.fit_percent}))
        elif args.verb == "ekf":
            f = args.adapt_fraction if args.adapt_fraction is not None else \
                (cfg["evaluation"] or {}).get("adapt_fraction", 0.2)
            project = None if args.project is None else args.project == "on"
            ds_targets = _targets(args, cfg, experiments.load_dataset(_data_dir(cfg, out)))
            print(cmd_ekf(cfg, out, _checkpoint(args, cfg, out), f, not args.no_adapt, project, ds_targets))
        return EXIT_OK
    except (meta.MetaLearningError, systems.SimulationError, ekf.FilterError, FloatingPointError) as exc:
        print(f"metassm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, config_mod.ConfigError, nssm.ArchitectureMismatch, OSError, ValueError, KeyError) as exc:
        print(f"metassm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
