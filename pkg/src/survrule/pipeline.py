"""End-to-end fit: folds, cross-validated matrix, ensembles and full-data rules."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from .cohort import Cohort
from .cvfold import CvMatrix, build_cv_matrix, cv_risk, make_cohort_folds, superlearner_factory
from .ensemble import EnsembleWeights, solve_weights
from .nuisance import DEFAULT_LIBRARY, EPS_CLIP, LearnerSpec, NuisanceSet, make_oracle_nuisance
from .rules import DEFAULT_CANDIDATES, CandidateSpec, DecisionFunction, assemble_rule, fit_candidate
from .transform import dr_terms

LOSSES = ("quadratic", "zeroone", "hinge", "log")
CONTINUOUS_TOL = 1e-9


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


@dataclass(frozen=True)
class PipelineConfig:
    tau: int
    folds: int = 5
    seed: int = 0
    stratified: bool = True
    inner_folds: int = 5
    nuisance: tuple[LearnerSpec, ...] = DEFAULT_LIBRARY
    candidates: tuple[CandidateSpec, ...] = DEFAULT_CANDIDATES
    losses: tuple[str, ...] = LOSSES
    zeroone_restarts: int = 1000
    zeroone_resolution: int = 20
    eps_clip: float = EPS_CLIP
    z_columns: tuple[str, ...] | None = None
    workers: int = 1

    def __post_init__(self):
        if int(self.tau) < 1:
            raise ConfigError("tau must be a positive integer")
        if int(self.folds) < 2:
            raise ConfigError("folds must be at least 2")
        if int(self.inner_folds) < 2:
            raise ConfigError("inner_folds must be at least 2")
        bad = [x for x in self.losses if x not in LOSSES]
        if bad or not self.losses:
            raise ConfigError(f"losses must be a non-empty subset of {LOSSES}, got {list(self.losses)}")
        if not self.candidates:
            raise ConfigError("the candidate library is empty")
        if not self.nuisance:
            raise ConfigError("the nuisance library is empty")
        if int(self.zeroone_restarts) < 1 or int(self.zeroone_resolution) < 1:
            raise ConfigError("zeroone_restarts and zeroone_resolution must be positive")
        if not 0.0 < float(self.eps_clip) < 0.5:
            raise ConfigError("eps_clip must lie in (0, 0.5)")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown pipeline keys {sorted(unknown)}")
        if "tau" not in d:
            raise ConfigError("pipeline config needs tau")
        kw = dict(d)
        try:
            if "nuisance" in kw:
                kw["nuisance"] = tuple(LearnerSpec.from_dict(x) for x in kw["nuisance"])
            if "candidates" in kw:
                kw["candidates"] = tuple(CandidateSpec.from_dict(x) for x in kw["candidates"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid learner specification: {exc}") from exc
        if "losses" in kw:
            kw["losses"] = tuple(kw["losses"])
        if kw.get("z_columns") is not None:
            kw["z_columns"] = tuple(kw["z_columns"])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "folds": self.folds,
            "seed": self.seed,
            "stratified": self.stratified,
            "inner_folds": self.inner_folds,
            "nuisance": [s.to_dict() for s in self.nuisance],
            "candidates": [s.to_dict() for s in self.candidates],
            "losses": list(self.losses),
            "zeroone_restarts": self.zeroone_restarts,
            "zeroone_resolution": self.zeroone_resolution,
            "eps_clip": self.eps_clip,
            "z_columns": list(self.z_columns) if self.z_columns is not None else None,
            "workers": self.workers,
        }


@dataclass
class FitResult:
    cv: CvMatrix
    candidate_risks: dict[str, list[float]]
    ensembles: dict[str, EnsembleWeights]
    candidates: tuple[DecisionFunction, ...]
    rules: dict[str, DecisionFunction]
    nuisance: NuisanceSet
    config: PipelineConfig
    extra: dict = field(default_factory=dict)

    def cv_report(self) -> dict:
        return {
            "n": int(self.cv.n),
            "folds": int(self.config.folds),
            "candidates": list(self.cv.names),
            "candidate_cv_risk": self.candidate_risks,
            "ensembles": {loss: w.to_dict() for loss, w in self.ensembles.items()},
            "nuisance_superlearner": {
                "folds": [r for r in self.cv.reports],
                "full": self.nuisance.weights.get("report"),
            },
            "config": self.config.to_dict(),
        }


def _nuisance_factory(cfg: PipelineConfig, oracle_dgp=None):
    if oracle_dgp is not None:
        eta = make_oracle_nuisance(oracle_dgp)
        return lambda train, fold: eta
    return superlearner_factory(cfg.nuisance, cfg.tau, inner_k=cfg.inner_folds, seed=cfg.seed,
                                eps=cfg.eps_clip, stratified=cfg.stratified)


def fit_pipeline(c: Cohort, cfg: PipelineConfig, oracle_dgp=None) -> FitResult:
    """Cross-validated ensembles plus full-data rules.

    The final rule for each loss refits every candidate on all of ``c`` (with
    nuisances fitted on all of ``c``) and combines them with the
    cross-validated weights.  ``oracle_dgp`` replaces every nuisance fit by the
    DGP's true functions.
    """
    if cfg.tau > c.k_max:
        raise PipelineError("config", f"tau={cfg.tau} exceeds the horizon {c.k_max}")
    factory = _nuisance_factory(cfg, oracle_dgp)
    try:
        plan = make_cohort_folds(c, cfg.folds, seed=cfg.seed, stratified=cfg.stratified)
    except ValueError as exc:
        raise PipelineError("folds", str(exc)) from exc
    try:
        cvm = build_cv_matrix(c, plan, factory, cfg.candidates, cfg.tau, z_columns=cfg.z_columns,
                              workers=cfg.workers)
    except (ValueError, RuntimeError) as exc:
        raise PipelineError("cv_matrix", str(exc)) from exc

    J = cvm.J
    risks = {loss: [cv_risk(cvm, np.eye(J)[j], loss) for j in range(J)] for loss in cfg.losses}
    ensembles = {}
    for loss in cfg.losses:
        kw = {}
        if loss == "zeroone":
            kw = {"restarts": cfg.zeroone_restarts, "grid_resolution": cfg.zeroone_resolution, "seed": cfg.seed}
        ensembles[loss] = solve_weights(cvm, loss, **kw)

    try:
        eta = factory(c, -1)
        d_full = dr_terms(c, eta, cfg.tau).d
        cands = tuple(fit_candidate(s, c, eta, cfg.tau, cfg.z_columns, d=d_full) for s in cfg.candidates)
    except (ValueError, RuntimeError) as exc:
        raise PipelineError("full_fit", str(exc)) from exc
    rules = {f"SL-{loss}": assemble_rule(cands, ensembles[loss], name=f"SL-{loss}") for loss in cfg.losses}
    for f in cands:
        rules[f.name] = f
    return FitResult(cv=cvm, candidate_risks=risks, ensembles=ensembles, candidates=cands, rules=rules,
                     nuisance=eta, config=cfg)


def check_invariants(res: FitResult) -> list[str]:
    """Dominance and feasibility checks on emitted weights; returns the violations."""
    problems = []
    for loss, w in res.ensembles.items():
        alpha = np.asarray(w.alpha)
        if np.any(alpha < 0):
            problems.append(f"{loss}: negative weight")
        if abs(alpha.sum() - 1.0) > 1e-9:
            problems.append(f"{loss}: weights do not sum to one")
        recomputed = cv_risk(res.cv, alpha, loss)
        tol = 0.0 if loss == "zeroone" else CONTINUOUS_TOL
        best = min(res.candidate_risks[loss])
        if recomputed > best + tol:
            problems.append(f"{loss}: ensemble risk {recomputed!r} exceeds best candidate {best!r}")
        if abs(recomputed - w.achieved_risk) > 1e-12 * max(1.0, abs(recomputed)):
            problems.append(f"{loss}: reported risk does not match recomputation")
    return problems


def rule_table(rules: Mapping[str, DecisionFunction], names: Sequence[str]) -> list[list]:
    """Rows ``[ensemble, candidate, weight]`` for every ensemble rule."""
    rows = []
    for key in sorted(rules):
        f = rules[key]
        if f.kind != "ensemble":
            continue
        for name, a in zip(names, f.score.alpha):
            rows.append([key, name, a])
    return rows
