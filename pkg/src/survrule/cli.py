"""Command-line entry point: ``survrule {simulate,fit,evaluate,rate}``.

Every command reads one JSON config (unknown keys are rejected) and writes
into ``--out``.  Reports are byte-identical for a fixed config and seed; wall
clock information lives only in ``run_meta.json``.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import sys
import time
from pathlib import Path
from types import SimpleNamespace
from typing import Mapping

from . import __version__
from .cohort import CohortError, load_schema, read_cohort
from .cvfold import crossfit_transform, make_cohort_folds, superlearner_factory
from .nuisance import make_oracle_nuisance
from .pipeline import ConfigError, PipelineConfig, PipelineError, check_invariants, fit_pipeline, rule_table
from .rules import DecisionFunction, RuleError, constant_rule, estimate_value
from .synth import (
    SynthError, get_dgp, monotone_decreasing, optimal_rule, run_rate_experiment, simulate, true_value,
)
from .transform import dr_terms

COMMON_KEYS = {"seed", "out", "threads"}
SIMULATE_KEYS = COMMON_KEYS | {"dgp", "n", "id_prefix"}
FIT_KEYS = COMMON_KEYS | {"data", "schema", "k_max", "discretize", "pipeline"}
EVALUATE_KEYS = COMMON_KEYS | {"rules", "data", "schema", "k_max", "discretize", "tau", "nuisance", "dgp",
                               "folds", "pipeline"}
RATE_KEYS = COMMON_KEYS | {"dgp", "n_grid", "replications", "oracle_nuisance", "n_mc", "pipeline"}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(message)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise StageError("output", f"cannot write {path}: {exc}") from exc


def _check_keys(cfg: Mapping, allowed: set, command: str) -> None:
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown keys for {command}: {sorted(unknown)}")


def _pipeline_cfg(cfg: Mapping, seed: int, workers: int) -> PipelineConfig:
    p = dict(cfg.get("pipeline") or {})
    p.setdefault("seed", seed)
    p.setdefault("workers", workers)
    return PipelineConfig.from_dict(p)


def _read(cfg: Mapping, base: Path):
    if "data" not in cfg:
        raise ConfigError("config needs 'data'")
    schema = load_schema(_resolve(cfg["schema"], base)) if cfg.get("schema") else None
    try:
        return read_cohort(_resolve(cfg["data"], base), schema, cfg.get("k_max"), cfg.get("discretize"))
    except OSError as exc:
        raise StageError("ingest", str(exc)) from exc


def _resolve(p, base: Path) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


# --- commands ----------------------------------------------------------------


def cmd_simulate(cfg: Mapping, out: Path, seed: int, workers: int, base: Path) -> int:
    _check_keys(cfg, SIMULATE_KEYS, "simulate")
    n = cfg.get("n")
    if not isinstance(n, int) or n < 1:
        raise ConfigError("'n' must be a positive integer")
    dgp = get_dgp(str(cfg.get("dgp", "A")))
    c = simulate(dgp, n, seed, id_prefix=str(cfg.get("id_prefix", "S")))
    out.mkdir(parents=True, exist_ok=True)
    c.to_csv(out / "cohort.csv")
    v0, v0_se = true_value(dgp, optimal_rule(dgp))
    truth = {"dgp": dgp.name, "n": n, "seed": seed, "k_max": dgp.k_max, "tau": dgp.tau,
             "covariates": list(dgp.covariate_names), "margin": dgp.margin,
             "value_optimal": v0, "value_optimal_se": v0_se}
    if dgp.is_discrete:
        W, prob = dgp.support()
        truth["blip_grid"] = [{"w": [float(x) for x in w], "prob": float(p), "theta": float(t)}
                              for w, p, t in zip(W, prob, dgp.true_blip(W))]
    _write(out / "truth.json", _dump(truth))
    return 0


def cmd_fit(cfg: Mapping, out: Path, seed: int, workers: int, base: Path) -> int:
    _check_keys(cfg, FIT_KEYS, "fit")
    pcfg = _pipeline_cfg(cfg, seed, workers)
    c = _read(cfg, base)
    res = fit_pipeline(c, pcfg)
    problems = check_invariants(res)
    report = res.cv_report()
    report["invariant_violations"] = problems
    _write(out / "cv_report.json", _dump(report))
    rows = rule_table(res.rules, res.cv.names)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "weights.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ensemble", "candidate", "weight", "cv_risk_candidate", "cv_risk_ensemble"])
        for ens, cand, a in rows:
            loss = ens.removeprefix("SL-")
            j = res.cv.names.index(cand)
            w.writerow([ens, cand, repr(float(a)), repr(res.candidate_risks[loss][j]),
                        repr(res.ensembles[loss].achieved_risk)])
    res.cv.to_csv(out / "cv_matrix.csv")
    for name, f in sorted(res.rules.items()):
        _write(out / "rules" / f"{name}.json", _dump(f.to_dict()))
    if problems:
        for p in problems:
            print(f"invariant violated: {p}", file=sys.stderr)
        return 1
    return 0


def _load_rules(path: Path) -> list[DecisionFunction]:
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    if not files:
        raise ConfigError(f"no rule files under {path}")
    try:
        return [DecisionFunction.from_dict(json.loads(f.read_text())) for f in files]
    except (OSError, KeyError, ValueError) as exc:
        raise StageError("rules", f"cannot load rules from {path}: {exc}") from exc


def cmd_evaluate(cfg: Mapping, out: Path, seed: int, workers: int, base: Path) -> int:
    _check_keys(cfg, EVALUATE_KEYS, "evaluate")
    if "rules" not in cfg or "tau" not in cfg:
        raise ConfigError("evaluate needs 'rules' and 'tau'")
    tau = int(cfg["tau"])
    rules = _load_rules(_resolve(cfg["rules"], base))
    c = _read(cfg, base)
    mode = cfg.get("nuisance", "superlearner")
    if mode == "oracle":
        if "dgp" not in cfg:
            raise ConfigError("oracle nuisance needs 'dgp'")
        eta = make_oracle_nuisance(get_dgp(cfg["dgp"]))
        d = dr_terms(c, eta, tau).d
        label = "oracle"
    elif mode == "superlearner":
        pcfg = _pipeline_cfg({"pipeline": {"tau": tau, **(cfg.get("pipeline") or {})}}, seed, workers)
        plan = make_cohort_folds(c, int(cfg.get("folds", 5)), seed=seed, stratified=pcfg.stratified)
        factory = superlearner_factory(pcfg.nuisance, tau, inner_k=pcfg.inner_folds, seed=seed, eps=pcfg.eps_clip)
        d = crossfit_transform(c, plan, factory, tau)
        label = "superlearner_crossfit"
    else:
        raise ConfigError("'nuisance' must be 'superlearner' or 'oracle'")

    eta_label = SimpleNamespace(label=label)
    refs = [constant_rule("always_treat", True), constant_rule("never_treat", False)]
    for f in rules + refs:
        est = estimate_value(f, c, eta_label, tau, d=d)
        _write(out / f"value_{f.name}.json", _dump(est.to_dict()))
    return 0


def cmd_rate(cfg: Mapping, out: Path, seed: int, workers: int, base: Path) -> int:
    _check_keys(cfg, RATE_KEYS, "rate")
    reps = cfg.get("replications", 20)
    if not isinstance(reps, int) or reps < 10:
        raise ConfigError("'replications' must be an integer >= 10")
    n_grid = cfg.get("n_grid")
    if not n_grid:
        raise ConfigError("'n_grid' is required")
    name = str(cfg.get("dgp", "step"))
    dgp = get_dgp(name)
    pipeline = dict(cfg.get("pipeline") or {})
    pipeline.setdefault("tau", dgp.tau)
    PipelineConfig.from_dict(pipeline)  # validate before spawning work
    report = run_rate_experiment(name, n_grid, reps, pipeline, seed=seed,
                                 oracle_nuisance=bool(cfg.get("oracle_nuisance", False)),
                                 workers=workers, n_mc=int(cfg.get("n_mc", 100_000)))
    _write(out / "rate_report.json", report.to_json() + "\n")
    _write(out / "rate_table.txt", report.table() + "\n")
    print(report.table())
    for rule in sorted(report.regrets):
        if min(min(r) for r in report.regrets[rule]) < -1e-12:
            print(f"invariant violated: negative regret for {rule}", file=sys.stderr)
            return 1
    trend = monotone_decreasing(report.mean_regret("SL-quadratic"), report.se_regret("SL-quadratic")) \
        if "SL-quadratic" in report.regrets else True
    print(f"SL-quadratic monotone trend: {'yes' if trend else 'no'}")
    return 0


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "evaluate": cmd_evaluate, "rate": cmd_rate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="survrule", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON configuration file")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--out", default=None, help="output directory (overrides the config)")
        sp.add_argument("--threads", type=int, default=None, help="parallel workers")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.time()
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat()
    try:
        cfg_path = Path(args.config)
        try:
            cfg = json.loads(cfg_path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {cfg_path}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        out = Path(args.out if args.out is not None else cfg.get("out", "out"))
        workers = args.threads if args.threads is not None else int(cfg.get("threads", 1))
        if workers < 1:
            raise ConfigError("threads must be at least 1")
        code = COMMANDS[args.command](cfg, out, seed, workers, cfg_path.parent)
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return 2
    except (CohortError, SynthError, RuleError) as exc:
        stage = "ingest" if isinstance(exc, CohortError) else "synth" if isinstance(exc, SynthError) else "rules"
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return 1
    meta = {"command": args.command, "version": __version__, "started_utc": stamp,
            "elapsed_seconds": round(time.time() - started, 3), "exit_code": code,
            "argv": list(argv) if argv is not None else sys.argv[1:]}
    _write(out / "run_meta.json", _dump(meta))
    return code


if __name__ == "__main__":
    sys.exit(main())
