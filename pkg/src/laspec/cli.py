"""Command-line entry point: ``python -m laspec <subcommand> [--config ...]``.

Exit status: 0 on success, 1 on usage or configuration errors, 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .estimator import TrainConfig, train_estimator
from .harness import (
    ConfigError,
    ExperimentConfig,
    _dataset_for,
    _element_metrics,
    aggregate_reports,
    load_or_train_estimator,
    run_experiment,
    write_json,
)
from .pad import FeasibleDomain, Pad, PadConfig
from .spectral import GasState, SpectralGrid, calibrate_kappa, gen_line_db, save_line_db

log = logging.getLogger("laspec")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(suppress: bool) -> argparse.ArgumentParser:
    # flags are accepted before or after the subcommand; the subcommand copies
    # must not reset values given before it
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="experiment JSON config", **kw)
    p.add_argument("--seed", type=int, help="master seed (overrides the config)", **kw)
    p.add_argument("--out", type=Path, help="output directory", **kw)
    p.add_argument("--threads", type=int, help="worker threads (SPEC_THREADS overrides)", **kw)
    p.add_argument("-v", "--verbose", action="store_true", **kw)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    ap = _Parser(prog="laspec", description=__doc__.splitlines()[0], parents=[_common(suppress=False)])
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    p = sub.add_parser("gen-lines", parents=[common], help="generate a random line database")
    p.add_argument("--n-lines", type=int, default=25)
    p.add_argument("--band", type=float, nargs=2, default=(2375.0, 2395.0))
    p.add_argument("--species", default="CO2")
    p.add_argument("--kappa", type=float, help="fixed scale; default calibrates peak = 1 at 2000 K, C = 0.07")
    sub.add_parser("gen-data", parents=[common], help="generate the dataset CSV")
    sub.add_parser("train-estimator", parents=[common], help="train and save the estimator")
    sub.add_parser("eval-estimator", parents=[common], help="estimator metrics on the test split")
    sub.add_parser("run", parents=[common], help="run the configured experiment")
    sub.add_parser("ablate", parents=[common], help="run the ablation arms")
    sub.add_parser("report", parents=[common], help="aggregate case CSVs under --out")
    return ap


def _load_config(args, kind=None) -> ExperimentConfig:
    if args.config is None:
        if kind is None:
            raise ConfigError("--config is required")
        cfg = ExperimentConfig(kind=kind)
    else:
        cfg = ExperimentConfig.load(args.config)
    if kind is not None and cfg.kind != kind:
        cfg = ExperimentConfig.from_dict({**_as_dict(cfg), "kind": kind})
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.out is not None:
        cfg.out_dir = str(args.out)
    return cfg


def _as_dict(cfg: ExperimentConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def _out(args, cfg=None) -> Path:
    out = args.out or Path(cfg.out_dir if cfg else "results")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_lines(args):
    seed = 42 if args.seed is None else args.seed
    db = gen_line_db(seed, args.n_lines, tuple(args.band), species_label=args.species)
    grid = SpectralGrid.for_band(db.band)
    db = db.with_kappa(args.kappa if args.kappa else calibrate_kappa(db, grid))
    path = _out(args) / "line_db.json"
    save_line_db(db, path)
    print(path)


def cmd_gen_data(args):
    cfg = _load_config(args, kind=None) if args.config else ExperimentConfig(kind="id_test")
    if args.seed is not None:
        cfg.dataset = {**cfg.dataset, "seed": args.seed}
    ds, _, _ = _dataset_for(cfg)
    path = _out(args, cfg) / "dataset.csv"
    ds.save_csv(path)
    print(path)


def cmd_train_estimator(args):
    cfg = _load_config(args) if args.config else ExperimentConfig(kind="id_test")
    ds, _, _ = _dataset_for(cfg)
    tc = dict(cfg.estimator.get("train", {}))
    if args.seed is not None:
        tc["seed"] = args.seed
    model, trace = train_estimator(ds, TrainConfig(**tc))
    out = _out(args, cfg)
    ckpt = cfg.path(cfg.estimator["checkpoint"]) if cfg.estimator.get("checkpoint") and args.out is None \
        else out / "estimator"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    model.save(ckpt)
    with open(out / "train_trace.csv", "w") as f:
        f.write("epoch,train_loss,val_loss\n")
        for e, tr, va in trace:
            f.write(f"{e},{tr:.9g},{va:.9g}\n")
    print(ckpt.with_suffix(".json"))


def cmd_eval_estimator(args):
    cfg = _load_config(args)
    cfg.estimator = {**cfg.estimator, "require_checkpoint": True}
    model = load_or_train_estimator(cfg)
    ds, db, ranges = _dataset_for(cfg)
    states, spectra = ds.split("test")
    pred = model.predict(spectra)
    pad = PadConfig(FeasibleDomain.from_ranges(ranges.t, ranges.c), db=db, grid=ds.grid,
                    epsilon=float(cfg.pad.get("epsilon", 0.05)))
    errs = np.array([Pad(pad, y)(GasState.from_array(p)).e for p, y in zip(pred, spectra)])
    summary = {"n": len(states), "metrics": _element_metrics(pred, states),
               "pad_error_max": float(errs.max()), "accepted_fraction": float(np.mean(errs <= pad.epsilon))}
    write_json(summary, _out(args, cfg) / "estimator_eval.json")
    print(json.dumps(summary, indent=2))


def cmd_run(args):
    cfg = _load_config(args)
    rep = run_experiment(cfg, _out(args, cfg))
    print(f"{cfg.kind}: wrote {_out(args, cfg)} in {rep['elapsed_s']:.1f}s")


def cmd_ablate(args):
    cfg = _load_config(args, kind="ablation")
    rep = run_experiment(cfg, _out(args, cfg))
    for row in rep["summary"]["arms"]:
        print(json.dumps(row))


def cmd_report(args):
    out = args.out or Path("results")
    if not out.is_dir():
        raise ConfigError(f"output directory not found: {out}")
    agg = aggregate_reports(out)
    write_json(agg, out / "report.json")
    print(out / "report.json")


COMMANDS = {
    "gen-lines": cmd_gen_lines,
    "gen-data": cmd_gen_data,
    "train-estimator": cmd_train_estimator,
    "eval-estimator": cmd_eval_estimator,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        if args.command is None:
            ap.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"laspec: error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, FileNotFoundError) as exc:
        print(f"laspec: config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"laspec: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0
