"""
Experiment protocols: in-distribution, out-of-distribution, noisy-measurement,
reconfiguration and ablation runs, with case-level CSV and summary JSON output.

Seeds: every case derives its own seed from ``(master_seed, protocol tag,
case index)`` through :func:`case_seed`, so a case's result does not depend on
which other cases run or in what order.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .correction import CorrectionConfig, run_correction
from .estimator import EstimatorModel, TrainConfig, train_estimator
from .pad import FeasibleDomain, Pad, PadConfig, is_anomaly
from .spectral import (
    OOD_RANGES,
    GasState,
    SpectralGrid,
    Spectrum,
    StateRanges,
    absorbance_values,
    add_multiplicative_noise,
    bundled_db,
    generate_dataset,
    load_line_db,
)

__all__ = [
    "DESK_CORRECTION",
    "ConfigError",
    "ExperimentConfig",
    "CaseRecord",
    "case_seed",
    "compute_metrics",
    "ood_box",
    "load_or_train_estimator",
    "run_id_test",
    "run_ood_test",
    "run_noise_test",
    "run_reconfig_test",
    "run_ablation",
    "run_experiment",
    "write_cases_csv",
    "CASE_COLUMNS",
]

log = logging.getLogger(__name__)

# Surrogate size and learning rate used for experiment runs on a single CPU.
DESK_CORRECTION = {"hidden": [128, 256, 128], "lr_surrogate": 1e-3}

KINDS = ("id_test", "ood_test", "noise_test", "reconfig_test", "ablation")
CASE_COLUMNS = ["case_id", "T_true", "C_true", "T_est", "C_est", "e_est", "corrected",
                "T_final", "C_final", "e_final", "iterations", "pad_queries"]

_TAGS = {"id_test": 1, "ood_test": 2, "noise_test": 3, "reconfig_test": 4, "ablation": 2}


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


def case_seed(master: int, tag: int, case_id: int) -> int:
    """32-bit seed for one case: SeedSequence([master, tag, case_id])."""
    return int(np.random.SeedSequence([int(master), int(tag), int(case_id)]).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    kind: str
    seed: int = 0
    n_cases: int = 100
    out_dir: str = "results"
    threads: int = 1
    dataset: dict = field(default_factory=lambda: {"K": 2000, "t": [600.0, 2000.0], "c": [0.05, 0.07],
                                                   "seed": 0, "line_db": "canonical"})
    estimator: dict = field(default_factory=dict)
    pad: dict = field(default_factory=dict)
    correction: dict = field(default_factory=lambda: dict(DESK_CORRECTION))
    thresholds: list = field(default_factory=lambda: [0.05, 0.075, 0.1])
    ood: dict = field(default_factory=lambda: {"t": [800.0, 4000.0], "c": [0.1, 0.6],
                                               "inner": 0.1, "outer": 0.4})
    noise: dict = field(default_factory=lambda: {"level": 0.1, "checkpoints": [25, 50, 100, 200]})
    reconfig: dict = field(default_factory=dict)
    ablation: dict = field(default_factory=dict)
    base_dir: str = "."

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.n_cases < 1:
            raise ConfigError("n_cases must be >= 1")

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> ExperimentConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "kind" not in d:
            raise ConfigError("config needs a 'kind'")
        d = dict(d)
        corr = dict(DESK_CORRECTION)
        corr.update(d.get("correction", {}))
        d["correction"] = corr
        d.setdefault("base_dir", str(base_dir))
        return cls(**d)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(d, base_dir=path.parent)

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def correction_config(self, **kw) -> CorrectionConfig:
        d = dict(self.correction)
        d.update(kw)
        try:
            return CorrectionConfig.from_dict(d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def pad_config(self, **kw) -> PadConfig:
        d = dict(self.pad)
        d.update(kw)
        try:
            return PadConfig.from_dict(d, base_dir=self.base_dir)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad pad config: {exc}") from exc


@dataclass
class CaseRecord:
    case_id: int
    true_state: GasState
    first_guess: GasState | None
    first_error: object  # ErrorBreakdown or None
    corrected: bool
    final_state: GasState
    final_error: object
    iterations: int
    pad_queries: int
    success: bool
    trace: list = field(default_factory=list)
    # kept in memory for audits; not written to the case CSV
    measured: np.ndarray | None = field(default=None, repr=False)
    pad_config: PadConfig | None = field(default=None, repr=False)

    def row(self) -> list:
        fg = self.first_guess
        return [
            self.case_id,
            _f(self.true_state.temperature), _f(self.true_state.mole_fraction),
            _f(fg.temperature) if fg else "", _f(fg.mole_fraction) if fg else "",
            _f(self.first_error.e) if self.first_error else "",
            int(self.corrected),
            _f(self.final_state.temperature), _f(self.final_state.mole_fraction),
            _f(self.final_error.e), self.iterations, self.pad_queries,
        ]


def _f(v: float) -> str:
    return f"{v:.9g}"


# -- metrics ------------------------------------------------------------------

def compute_metrics(predictions, truths) -> dict:
    """RMSE, MAE, MRE (relative to the truth) and Pearson R of one state element."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("predictions and truths need equal non-zero length")
    if np.any(t == 0):
        raise ValueError("MRE undefined for zero truths")
    d = p - t
    out = {
        "rmse": float(np.sqrt(np.mean(d ** 2))),
        "mae": float(np.mean(np.abs(d))),
        "mre": float(np.mean(np.abs(d) / np.abs(t))),
        "r": None,
    }
    if p.size > 1:
        sp, st = p.std(ddof=1), t.std(ddof=1)
        if sp > 0 and st > 0:
            cov = np.sum((p - p.mean()) * (t - t.mean())) / (p.size - 1)
            out["r"] = float(np.clip(cov / (sp * st), -1.0, 1.0))
    return out


def _element_metrics(pred: np.ndarray, truth: np.ndarray) -> dict:
    return {"temperature": compute_metrics(pred[:, 0], truth[:, 0]),
            "concentration": compute_metrics(pred[:, 1], truth[:, 1])}


def summarize(records: list[CaseRecord], epsilon: float) -> dict:
    truth = np.array([r.true_state.as_array() for r in records])
    final = np.array([r.final_state.as_array() for r in records])
    out = {"n_cases": len(records), "epsilon": epsilon}
    if all(r.first_guess is not None for r in records):
        est = np.array([r.first_guess.as_array() for r in records])
        out["estimation"] = _element_metrics(est, truth)
        out["estimation_error_mean"] = float(np.mean([r.first_error.e for r in records]))
    out["final"] = _element_metrics(final, truth)
    out["final_error_mean"] = float(np.mean([r.final_error.e for r in records]))
    out["failure_times"] = int(sum(not r.success for r in records))
    out["n_corrected"] = int(sum(r.corrected for r in records))
    its = [r.iterations for r in records if r.corrected and r.success]
    out["iterations"] = {"n": len(its), "mean": float(np.mean(its)) if its else None,
                         "std": float(np.std(its)) if its else None}
    q = [r.pad_queries for r in records]
    out["pad_queries"] = {"mean": float(np.mean(q)), "max": int(np.max(q)), "total": int(np.sum(q))}
    return out


# -- I/O ----------------------------------------------------------------------

def write_cases_csv(records: list[CaseRecord], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CASE_COLUMNS)
    for r in records:
        w.writerow(r.row())
    Path(path).write_text(buf.getvalue())


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_traces(tagged: list[tuple[str, CaseRecord]], path) -> None:
    """One JSON line per correction iteration, labelled with the case and its tag."""
    with open(path, "w") as f:
        for tag, r in tagged:
            for rec in r.trace:
                f.write(json.dumps({"tag": tag, "case_id": r.case_id, **rec}, sort_keys=True) + "\n")


def _threads(config: ExperimentConfig) -> int:
    env = os.environ.get("SPEC_THREADS")
    return max(1, int(env)) if env else max(1, int(config.threads))


def _map(fn, items, threads: int) -> list:
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(fn, items))


# -- estimator ------------------------------------------------------------------

class CountingEstimator:
    """Estimator wrapper that tallies calls (the reconfiguration audit needs zero)."""

    def __init__(self, model: EstimatorModel):
        self.model = model
        self.calls = 0

    def __call__(self, spectrum) -> GasState:
        self.calls += 1
        y = spectrum.values if isinstance(spectrum, Spectrum) else np.asarray(spectrum)
        if not np.all(np.isfinite(y)):
            raise ValueError("spectrum contains non-finite values")
        return GasState.from_array(self.model.predict(y[None, :])[0])


def _dataset_for(config: ExperimentConfig):
    d = config.dataset
    db_ref = d.get("line_db", "canonical")
    db = bundled_db(db_ref) if db_ref in ("canonical", "alt_band", "alt_species") else load_line_db(config.path(db_ref))
    ranges = StateRanges(tuple(d.get("t", (600.0, 2000.0))), tuple(d.get("c", (0.05, 0.07))))
    ds = generate_dataset(ranges, int(d.get("K", 2000)), SpectralGrid.for_band(db.band), db, int(d.get("seed", 0)))
    return ds, db, ranges


def load_or_train_estimator(config: ExperimentConfig) -> EstimatorModel:
    """Load the configured checkpoint, training and saving it first if absent."""
    ckpt = config.estimator.get("checkpoint")
    if ckpt and config.path(ckpt).with_suffix(".json").is_file():
        return EstimatorModel.load(config.path(ckpt))
    if ckpt and config.estimator.get("require_checkpoint", False):
        raise ConfigError(f"estimator checkpoint not found: {config.path(ckpt)}")
    ds, _, _ = _dataset_for(config)
    model, _ = train_estimator(ds, TrainConfig(**config.estimator.get("train", {})))
    if ckpt:
        config.path(ckpt).parent.mkdir(parents=True, exist_ok=True)
        model.save(config.path(ckpt))
    return model


def file_digest(path) -> str | None:
    path = Path(path)
    h = hashlib.sha256()
    found = False
    for suffix in (".json", ".bin"):
        p = path.with_suffix(suffix)
        if p.is_file():
            h.update(p.read_bytes())
            found = True
    return h.hexdigest() if found else None


# -- case runner ------------------------------------------------------------------

def solve_case(case_id, true_state, measured, pad_cfg: PadConfig, corr_cfg: CorrectionConfig,
               estimator=None) -> CaseRecord:
    """Estimation, PAD check, correction when needed, independent re-verification."""
    eps = pad_cfg.epsilon
    fg, fe = None, None
    queries = 0
    if estimator is not None:
        fg = estimator(measured)
        fe = Pad(pad_cfg, measured)(fg)  # infinite error outside the forward model's domain
        queries += 1
    if fe is not None and not is_anomaly(fe, eps):
        return CaseRecord(case_id, true_state, fg, fe, False, fg, fe, 0, queries, True,
                          measured=measured, pad_config=pad_cfg)
    res = run_correction(measured, fg, pad_cfg, corr_cfg.replace(epsilon=eps), first_guess_breakdown=fe)
    queries += res.pad_queries
    # acceptance is decided by a fresh PAD evaluation, not the optimiser's bookkeeping
    check = Pad(pad_cfg, measured)(res.state)
    if res.success and check.e > eps:
        log.warning("case %s: optimiser reported success but re-check gives %.4g", case_id, check.e)
    return CaseRecord(case_id, true_state, fg, fe, True, res.state, check, res.iterations, queries,
                      bool(check.e <= eps), res.trace, measured=measured, pad_config=pad_cfg)


def ood_box(x, rng, ranges: StateRanges, inner=0.1, outer=0.4) -> FeasibleDomain:
    """Random box around ``x``: each side lies 10-40 % of the range span away, truncated to the range."""
    span = ranges.upper - ranges.lower
    lo = np.maximum(x - rng.uniform(inner, outer, 2) * span, ranges.lower)
    hi = np.minimum(x + rng.uniform(inner, outer, 2) * span, ranges.upper)
    return FeasibleDomain((float(lo[0]), float(lo[1])), (float(hi[0]), float(hi[1])))


# -- protocols ------------------------------------------------------------------

def _id_cases(config: ExperimentConfig, n: int):
    ds, db, ranges = _dataset_for(config)
    states, spectra = ds.split("test")
    if n > len(states):
        raise ConfigError(f"n_cases={n} exceeds the {len(states)} test records")
    pick = np.sort(np.random.default_rng([config.seed, 11]).choice(len(states), n, replace=False))
    return [(int(i), GasState.from_array(states[j]), spectra[j]) for i, j in enumerate(pick)], db, ranges


def run_id_test(config: ExperimentConfig, estimator=None) -> dict:
    model = estimator or load_or_train_estimator(config)
    est = CountingEstimator(model)
    cases, db, ranges = _id_cases(config, config.n_cases)
    eps = float(config.pad.get("epsilon", 0.05))
    pad_cfg = config.pad_config(domain={"t": list(ranges.t), "c": list(ranges.c)}, epsilon=eps)
    pad_cfg = pad_cfg.replace(db=db, grid=SpectralGrid.for_band(db.band))

    def one(c):
        cid, x, y = c
        corr = config.correction_config(seed=case_seed(config.seed, _TAGS["id_test"], cid))
        return solve_case(cid, x, y, pad_cfg, corr, est)

    records = _map(one, cases, _threads(config))
    summary = summarize(records, eps)
    summary["accepted_without_correction"] = int(sum(not r.corrected and r.success for r in records))
    return {"kind": "id_test", "records": {"": records}, "summary": summary}


def ood_cases(config: ExperimentConfig, db, grid):
    o = config.ood
    ranges = StateRanges(tuple(o.get("t", OOD_RANGES.t)), tuple(o.get("c", OOD_RANGES.c)))
    out = []
    for cid in range(config.n_cases):
        rng = np.random.default_rng([config.seed, _TAGS["ood_test"], cid, 1])
        x = rng.uniform(ranges.lower, ranges.upper)
        box = ood_box(x, rng, ranges, o.get("inner", 0.1), o.get("outer", 0.4))
        state = GasState.from_array(x)
        out.append((cid, state, absorbance_values(state.temperature, state.mole_fraction, grid, db), box))
    return out


def run_ood_test(config: ExperimentConfig, estimator=None, thresholds=None, corr_overrides=None) -> dict:
    model = estimator or load_or_train_estimator(config)
    base_pad = config.pad_config()
    cases = ood_cases(config, base_pad.db, base_pad.grid)
    est = CountingEstimator(model)
    guesses = {cid: est(y) for cid, _, y, _ in cases}
    records, summaries = {}, {}
    for eps in thresholds or config.thresholds:
        def one(c, eps=eps):
            cid, x, y, box = c
            pad_cfg = base_pad.replace(domain=box, epsilon=float(eps))
            corr = config.correction_config(seed=case_seed(config.seed, _TAGS["ood_test"], cid),
                                            **(corr_overrides or {}))
            return solve_case(cid, x, y, pad_cfg, corr, lambda _y, g=guesses[cid]: g)
        recs = _map(one, cases, _threads(config))
        records[f"eps{eps:g}"] = recs
        summaries[f"{eps:g}"] = summarize(recs, float(eps))
    fails = [summaries[f"{e:g}"]["failure_times"] for e in sorted(thresholds or config.thresholds)]
    return {"kind": "ood_test", "records": records,
            "summary": {"by_threshold": summaries,
                        "failure_monotone": all(a >= b for a, b in zip(fails, fails[1:]))}}


def run_noise_test(config: ExperimentConfig, estimator=None) -> dict:
    model = estimator or load_or_train_estimator(config)
    est = CountingEstimator(model)
    cases, db, ranges = _id_cases(config, config.n_cases)
    level = float(config.noise.get("level", 0.1))
    checkpoints = [int(c) for c in config.noise.get("checkpoints", [25, 50, 100, 200])]
    eps = float(config.pad.get("epsilon", 0.05))
    pad_cfg = config.pad_config(domain={"t": list(ranges.t), "c": list(ranges.c)}, epsilon=eps)
    pad_cfg = pad_cfg.replace(db=db, grid=SpectralGrid.for_band(db.band))
    T = max(checkpoints)

    def one(c):
        cid, x, y = c
        s = case_seed(config.seed, _TAGS["noise_test"], cid)
        noisy = add_multiplicative_noise(Spectrum(y, pad_cfg.grid.grid_id), level, s).values
        corr = config.correction_config(seed=s, T=T, stop_on_success=False)
        return solve_case(cid, x, noisy, pad_cfg, corr, est)

    records = _map(one, cases, _threads(config))
    summary = summarize(records, eps)
    curve = {}
    for cp in checkpoints:
        vals = []
        for r in records:
            if not r.corrected:
                vals.append(r.final_error.e)
                continue
            upto = [t["e_best"] for t in r.trace if t["t"] <= cp and t["e_best"] is not None]
            vals.append(upto[-1] if upto else r.first_error.e)
        curve[str(cp)] = float(np.mean(vals))
    summary["mean_best_error_at"] = curve
    summary["noise_level"] = level
    e0 = summary["estimation_error_mean"]
    summary["error_reduction"] = float(1.0 - summary["final_error_mean"] / e0) if e0 > 0 else None
    return {"kind": "noise_test", "records": {"": records}, "summary": summary}


DEFAULT_SCENARIOS = [
    {"name": "alt_band", "line_db": "alt_band", "forward": "absorbance"},
    {"name": "alt_species", "line_db": "alt_species", "forward": "absorbance"},
    {"name": "emission", "line_db": "canonical", "forward": "emission"},
]


def run_reconfig_test(config: ExperimentConfig, estimator_checkpoint=None) -> dict:
    """Correction-only runs with the forward model swapped; the estimator is never called."""
    rc = config.reconfig
    scenarios = rc.get("scenarios", DEFAULT_SCENARIOS)
    ranges = StateRanges(tuple(rc.get("t", (800.0, 3000.0))), tuple(rc.get("c", (0.05, 0.3))))
    eps = float(rc.get("epsilon", 0.1))
    ckpt = estimator_checkpoint or config.estimator.get("checkpoint")
    digest_before = file_digest(config.path(ckpt)) if ckpt else None
    records, summaries = {}, {}
    for k, sc in enumerate(scenarios):
        pad_base = config.pad_config(line_db=sc["line_db"], forward=sc.get("forward", "absorbance"),
                                     epsilon=eps)

        def one(cid, k=k, pad_base=pad_base):
            rng = np.random.default_rng([config.seed, _TAGS["reconfig_test"], k, cid])
            x = rng.uniform(ranges.lower, ranges.upper)
            box = ood_box(x, rng, ranges)
            state = GasState.from_array(x)
            pad_cfg = pad_base.replace(domain=box)
            y = pad_cfg.simulate(state)
            corr = config.correction_config(seed=case_seed(config.seed, _TAGS["reconfig_test"], 1000 * k + cid))
            return solve_case(cid, state, y, pad_cfg, corr, estimator=None)

        recs = _map(one, range(config.n_cases), _threads(config))
        records[sc["name"]] = recs
        summaries[sc["name"]] = summarize(recs, eps)
        summaries[sc["name"]]["successes"] = int(sum(r.success for r in recs))
    digest_after = file_digest(config.path(ckpt)) if ckpt else None
    return {"kind": "reconfig_test", "records": records,
            "summary": {"scenarios": summaries, "estimator_calls": 0,
                        "estimator_unchanged": digest_before == digest_after}}


DEFAULT_ARMS = [
    {"name": "default"},
    {"name": "estimate_overall", "error_mode": "overall"},
    {"name": "estimate_all_elements", "error_mode": "all_elements"},
    {"name": "active_sampling", "sampling_mode": "disagreement"},
    {"name": "no_diversity", "diversity_enabled": False},
]


def run_ablation(config: ExperimentConfig, estimator=None) -> dict:
    """OoD protocol under several correction settings on identical cases and seeds."""
    ab = config.ablation
    arms = ab.get("arms", DEFAULT_ARMS)
    eps = float(ab.get("epsilon", 0.05))
    model = estimator or load_or_train_estimator(config)
    records, rows = {}, []
    for arm in arms:
        over = {k: v for k, v in arm.items() if k != "name"}
        rep = run_ood_test(config, model, thresholds=[eps], corr_overrides=over)
        key = f"eps{eps:g}"
        records[arm["name"]] = rep["records"][key]
        s = rep["summary"]["by_threshold"][f"{eps:g}"]
        cc = config.correction_config(**over)
        rows.append({"arm": arm["name"], "error_mode": cc.error_mode, "sampling_mode": cc.sampling_mode,
                     "diversity_enabled": cc.diversity_enabled, "failure_times": s["failure_times"],
                     "iterations_mean": s["iterations"]["mean"], "iterations_std": s["iterations"]["std"]})
    return {"kind": "ablation", "records": records, "summary": {"epsilon": eps, "arms": rows}}


_RUNNERS = {
    "id_test": run_id_test,
    "ood_test": run_ood_test,
    "noise_test": run_noise_test,
    "reconfig_test": lambda c, estimator=None: run_reconfig_test(c),
    "ablation": run_ablation,
}


def run_experiment(config: ExperimentConfig, out_dir=None, estimator=None) -> dict:
    """Run ``config.kind`` and write ``cases[_<tag>].csv``, ``traces.jsonl`` and ``summary.json``."""
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    report = _RUNNERS[config.kind](config, estimator=estimator)
    elapsed = time.perf_counter() - t0
    tagged = []
    for tag, recs in report["records"].items():
        write_cases_csv(recs, out / (f"cases_{tag}.csv" if tag else "cases.csv"))
        tagged.extend((tag, r) for r in recs)
    write_traces(tagged, out / "traces.jsonl")
    summary = {"kind": config.kind, "seed": config.seed, **report["summary"]}
    write_json(summary, out / "summary.json")
    report["elapsed_s"] = elapsed
    return report


def aggregate_reports(out_dir) -> dict:
    """Summary over every case CSV found under ``out_dir``."""
    out_dir = Path(out_dir)
    files = sorted(out_dir.rglob("cases*.csv"))
    if not files:
        raise ConfigError(f"no case CSVs under {out_dir}")
    result = {}
    for f in files:
        with open(f, newline="") as fh:
            rows = list(csv.DictReader(fh))
        truth = np.array([[float(r["T_true"]), float(r["C_true"])] for r in rows])
        final = np.array([[float(r["T_final"]), float(r["C_final"])] for r in rows])
        entry = {"n_cases": len(rows), "final": _element_metrics(final, truth),
                 "n_corrected": sum(int(r["corrected"]) for r in rows),
                 "final_error_mean": float(np.mean([float(r["e_final"]) for r in rows]))}
        if all(r["T_est"] for r in rows):
            est = np.array([[float(r["T_est"]), float(r["C_est"])] for r in rows])
            entry["estimation"] = _element_metrics(est, truth)
        result[str(f.relative_to(out_dir))] = entry
    return result
