"""``glucocast`` command line: simulate, select, train, evaluate, bench, report.

Exit status is 0 on success, 1 when an evaluation produced error rows and 2
on fatal errors (bad flags, bad configuration, unreadable or empty inputs).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import secrets
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, _seeds
from . import evalbench as eb
from .config import SELECT_VARIABLES, ConfigError, RunConfig, resolve
from .models import fit, parse_spec, save_model
from .series import MissingVariableError, ParseError, SupervisedSet, Variable, read_csv
from .sim import Scenario, default_cohort, export, load_scenario, params_to_dict, simulate_patient
from .sisal import DegenerateInputError, candidate_set, sisal

log = logging.getLogger("glucocast")

# integer tags separating the random streams of each command
_TAG = {"simulate": 1, "select": 2, "train": 3, "evaluate": 4, "bench": 5}


class FatalError(Exception):
    pass


# --------------------------------------------------------------------------- helpers


def _seed(args, cfg: RunConfig) -> tuple[int, str]:
    if args.seed is not None:
        return args.seed, "command line"
    if cfg["seed"]:
        return cfg.get_int("seed"), "config"
    return secrets.randbits(63), "random"


def _workers(args, cfg: RunConfig) -> int:
    if args.workers is not None:
        w = args.workers
    elif cfg["workers"]:
        w = cfg.get_int("workers")
    else:
        w = os.cpu_count() or 1
    if w < 1:
        raise ConfigError("workers must be >= 1")
    return w


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg["out_dir"]
    if not out:
        raise ConfigError("no output directory; pass --out")
    p = Path(out)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise FatalError(f"cannot write to {p}: {exc}") from None
    return p


def _data_dir(args, cfg: RunConfig) -> Path:
    d = getattr(args, "data", None) or cfg["data_dir"]
    if not d:
        raise ConfigError("no data directory; pass --data")
    p = Path(d)
    if not p.is_dir():
        raise FatalError(f"data directory {p} does not exist")
    return p


def _load_cohort(data: Path):
    files = sorted(data.glob("*.csv"))
    if not files:
        raise FatalError(f"no patient CSV files in {data}")
    records = []
    for f in files:
        try:
            records.append(read_csv(f))
        except (ParseError, ValueError) as exc:
            raise FatalError(f"{f}: {exc}") from None
    return records


def _versions() -> dict:
    import numba
    import scipy
    import threadpoolctl
    return {"glucocast": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__, "threadpoolctl": threadpoolctl.__version__}


def _manifest(out: Path, command: str, seed: int, seed_source: str, cfg: RunConfig, extra: dict | None = None):
    files = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    doc = {"command": command, "seed": seed, "seed_source": seed_source, "config": dict(sorted(cfg.values.items())),
           "versions": _versions(), "outputs": files}
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")


# --------------------------------------------------------------------------- commands


def cmd_simulate(args, cfg: RunConfig) -> int:
    seed, src = _seed(args, cfg)
    out = _out_dir(args, cfg)
    n = args.n_patients if args.n_patients is not None else cfg.get_int("simulate.n_patients")
    days = args.days if args.days is not None else cfg.get_int("simulate.days")
    if n < 1 or days < 1:
        raise ConfigError("n_patients and days must be >= 1")
    scen_path = args.scenario or cfg["simulate.scenario"]
    try:
        scenario = load_scenario(scen_path) if scen_path else Scenario()
    except (OSError, ValueError) as exc:
        raise FatalError(f"scenario {scen_path}: {exc}") from None
    scenario = replace(scenario, days=days)
    sim_seed = _seeds.derive_int(seed, _TAG["simulate"])
    params = default_cohort(n, sim_seed)
    cohort = []
    for i, p in enumerate(params):
        pid = f"P{i:03d}"
        rec = simulate_patient(p, scenario, _seeds.seed_sequence(sim_seed, i), patient_id=pid)
        export(rec, out / f"{pid}.csv")
        g = rec[Variable.GLUCOSE]
        cohort.append({"patient_id": pid, "file": f"{pid}.csv", "params": params_to_dict(p),
                       "glucose_samples": int(np.isfinite(g.values).sum())})
    (out / "cohort.json").write_text(json.dumps({"days": days, "patients": cohort}, indent=2) + "\n")
    _manifest(out, "simulate", seed, src, cfg)
    print(f"wrote {n} patient files to {out}")
    return 0


def _select_job(job):
    label, sets, sel_cfg = job
    data = SupervisedSet.concat(sets)
    return label, sisal(data, sel_cfg)


def cmd_select(args, cfg: RunConfig) -> int:
    seed, src = _seed(args, cfg)
    workers = _workers(args, cfg)
    data = _data_dir(args, cfg)
    records = _load_cohort(data)
    out = _out_dir(args, cfg)
    step = cfg.get_int("select.step_s")
    horizon = cfg.get_int("select.horizon_min")
    kernels = cfg.kernels()
    modes = cfg.select_modes()
    per_patient = cfg["select.per_patient"].lower() in ("1", "true", "yes", "on")
    jobs = []
    for m_index, mode in enumerate(modes):
        vars_ = SELECT_VARIABLES[mode]
        sel_cfg = cfg.selection(_seeds.derive_int(seed, _TAG["select"], m_index))
        sets = []
        for r in records:
            try:
                sets.append(candidate_set(r, vars_, step, horizon, sel_cfg.max_lag_steps, kernels))
            except MissingVariableError as exc:
                raise FatalError(str(exc).strip("'\"")) from None
            except ValueError as exc:
                raise FatalError(f"{r.patient_id}: {exc}") from None
        if per_patient:
            jobs += [((mode, r.patient_id), [s], sel_cfg) for r, s in zip(records, sets)]
        jobs.append(((mode, "pooled"), sets, sel_cfg))
    try:
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
                results = list(pool.map(_select_job, jobs))
        else:
            results = [_select_job(j) for j in jobs]
    except DegenerateInputError as exc:
        raise FatalError(f"selection failed: {exc}") from None
    for (mode, label), res in results:
        d = out / mode
        d.mkdir(exist_ok=True)
        res.to_jsonl(d / f"{label}.jsonl")
        res.to_summary_csv(d / f"{label}_summary.csv")
    for (mode, label), res in results:
        if label != "pooled":
            continue
        print(f"pooled ranking ({mode} inputs, step {step} s, horizon {horizon} min)")
        print(f"{'rank':>4}  {'variable':<14} {'influence_minutes':>17}")
        for var, rank, minutes in res.summary_rows():
            print(f"{rank:>4}  {var:<14} {minutes:>17g}")
    _manifest(out, "select", seed, src, cfg)
    return 0


def _train_job(job):
    record, spec, ecfg, step, hist, hor = job
    prep = eb.PreparedRecord(record, ecfg)
    if spec.kind == "arima":
        return record.patient_id, prep.arima(step, spec)
    train, _ = prep.design(step, hist, hor)
    return record.patient_id, fit(spec, train)


def cmd_train(args, cfg: RunConfig) -> int:
    seed, src = _seed(args, cfg)
    workers = _workers(args, cfg)
    records = _load_cohort(_data_dir(args, cfg))
    out = _out_dir(args, cfg)
    specs = _models(args.models or cfg["train.model"])
    if len(specs) != 1:
        raise ConfigError("train takes exactly one model")
    spec = specs[0]
    if spec.kind == "rf":
        spec = replace(spec, seed=_seeds.derive_int(seed, _TAG["train"]))
    step, hist, hor = cfg.get_int("train.step_s"), cfg.get_float("train.history_h"), cfg.get_int("train.horizon_min")
    ecfg = cfg.evaluation(seed, 1, (spec,))
    jobs = [(r, spec, ecfg, step, hist, hor) for r in records]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
            results = list(pool.map(_train_job, jobs))
    else:
        results = [_train_job(j) for j in jobs]
    for pid, model in results:
        save_model(model, out / f"{pid}_{spec.kind}.json")
    _manifest(out, "train", seed, src, cfg)
    print(f"trained {len(results)} {spec.kind} models into {out}")
    return 0


def _models(text: str):
    try:
        return tuple(parse_spec(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_evaluate(args, cfg: RunConfig) -> int:
    seed, src = _seed(args, cfg)
    workers = _workers(args, cfg)
    records = _load_cohort(_data_dir(args, cfg))
    out = _out_dir(args, cfg)
    models = _models(args.models) if args.models else None
    ecfg = cfg.evaluation(_seeds.derive_int(seed, _TAG["evaluate"]), workers, models)
    res = eb.run_grid(records, ecfg)
    eb.write_eval_csv(res.rows, out / "eval.csv")
    eb.write_jsonl(res.rows, out / "eval.jsonl")
    eb.write_eval_csv(res.baseline, out / "baseline.csv")
    eb.write_jsonl(res.baseline, out / "baseline.jsonl")
    errors = [r for r in res.rows + res.baseline if not r.ok]
    for r in errors:
        log.error("error row: %s %s step=%d history=%g horizon=%d: %s", r.patient_id, r.model, r.step_s,
                  r.history_h, r.horizon_min, r.error)
    _manifest(out, "evaluate", seed, src, cfg, {"rows": len(res.rows), "error_rows": len(errors)})
    print(f"{len(res.rows)} evaluation rows ({len(errors)} errors) written to {out}")
    return 1 if errors else 0


def cmd_bench(args, cfg: RunConfig) -> int:
    seed, src = _seed(args, cfg)
    records = _load_cohort(_data_dir(args, cfg))
    out = _out_dir(args, cfg)
    bcfg = cfg.bench()
    specs = _models(args.models or cfg["bench.models"])
    step, hist, hor = cfg.get_int("bench.step_s"), cfg.get_float("bench.history_h"), cfg.get_int("bench.horizon_min")
    ecfg = cfg.evaluation(seed, 1, specs)
    sets = []
    for r in records:
        train, _ = eb.PreparedRecord(r, ecfg).design(step, hist, hor)
        sets.append(train)
    pool_set = SupervisedSet.concat(sets)
    rows = []
    for size in cfg.bench_sizes():
        if size > len(pool_set):
            raise FatalError(f"bench size {size} exceeds the {len(pool_set)} available training rows")
        sub = pool_set.subset_rows(np.arange(size))
        for spec in specs:
            row = eb.bench(spec, sub, bcfg)
            rows.append(row)
            print(f"{row.model:>12} n={row.n:<6} fit {row.fit_ms_median:10.1f} ms (p95 {row.fit_ms_p95:.1f})  "
                  f"predict {row.predict_ms_median:.3f} ms  cv {row.fit_cv:.3f}")
    eb.write_bench_csv(rows, out / "bench.csv")
    eb.write_jsonl(rows, out / "bench.jsonl")
    _manifest(out, "bench", seed, src, cfg, {"thread_cap": bcfg.thread_cap})
    return 0


def cmd_report(args, cfg: RunConfig) -> int:
    seed, src = _seed(args, cfg)
    results = Path(args.results)
    if not (results / "eval.csv").is_file():
        raise FatalError(f"{results} has no eval.csv")
    rows = eb.read_eval_csv(results / "eval.csv")
    base = eb.read_eval_csv(results / "baseline.csv") if (results / "baseline.csv").is_file() else []
    if not rows:
        raise FatalError(f"{results / 'eval.csv'} has no rows")
    out = _out_dir(args, cfg)
    summary = eb.report(rows, base)
    eb.write_summary_csv(summary, out / "summary.csv")
    table = eb.format_table(summary)
    (out / "summary.txt").write_text(table)
    eb.write_long_csv(rows + [r for r in base if r.model not in {x.model for x in rows}], out / "long.csv")
    _manifest(out, "report", seed, src, cfg)
    print(table, end="")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="master seed (random and recorded in manifest.json if omitted)")
    common.add_argument("--workers", type=int, help="cap on parallel workers (default: CPU count)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--log-level", choices=("debug", "info", "warning", "error"))

    p = argparse.ArgumentParser(prog="glucocast", description="Synthetic CGM forecasting pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("simulate", parents=[common], help="simulate a patient cohort to CSV")
    s.add_argument("--n-patients", type=int)
    s.add_argument("--days", type=int)
    s.add_argument("--scenario", help="scenario key = value file")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("select", parents=[common], help="rank inputs with SISAL, per patient and pooled")
    s.add_argument("--data", help="directory of patient CSV files")
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("train", parents=[common], help="fit one model per patient on its training days")
    s.add_argument("--data", help="directory of patient CSV files")
    s.add_argument("--models", help="model spec, e.g. rf or 'svr:C=5'")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="walk-forward evaluation grid")
    s.add_argument("--data", help="directory of patient CSV files")
    s.add_argument("--models", help="comma-separated model specs (default from config)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("bench", parents=[common], help="fit/predict timing benchmark")
    s.add_argument("--data", help="directory of patient CSV files")
    s.add_argument("--models", help="comma-separated model specs")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("report", parents=[common], help="summary tables from an evaluate output directory")
    s.add_argument("results", help="directory containing eval.csv (and baseline.csv)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args.config)
        level = args.log_level or cfg["log_level"]
        logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return args.func(args, cfg)
    except (ConfigError, FatalError) as exc:
        print(f"glucocast {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
