"""Candidate decision functions, ensemble assembly and value estimation.

A decision function ``f`` induces the rule ``d_f(z) = 1{f(z) > 0}``; a score of
exactly zero means "do not treat" everywhere in this package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import learners
from .cohort import Cohort
from .transform import blip_values, dr_terms

REGRESSORS = ("intercept_only", "linear", "stump_boost")
CLASSIFIERS = ("logistic", "stump_boost")
KINDS = ("b_reg", "d_reg", "d_class")


class RuleError(ValueError):
    pass


@dataclass(frozen=True)
class CandidateSpec:
    name: str
    kind: str
    learner: str
    rounds: int = 100
    learning_rate: float = 0.1
    reg_lambda: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise RuleError(f"unknown candidate kind {self.kind!r}; expected one of {KINDS}")
        allowed = CLASSIFIERS if self.kind == "d_class" else REGRESSORS
        if self.learner not in allowed:
            raise RuleError(f"learner {self.learner!r} not available for {self.kind}; expected one of {allowed}")
        if not 1 <= int(self.rounds) <= 10_000:
            raise RuleError("rounds must lie in 1..10000")
        if not 0.0 < float(self.learning_rate) <= 1.0:
            raise RuleError("learning_rate must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: Mapping) -> "CandidateSpec":
        unknown = set(d) - {"name", "kind", "learner", "hyperparameters"}
        if unknown:
            raise RuleError(f"unknown candidate keys {sorted(unknown)}")
        hyper = dict(d.get("hyperparameters") or {})
        if set(hyper) - {"rounds", "learning_rate", "reg_lambda"}:
            raise RuleError(f"unknown hyperparameters {sorted(hyper)}")
        return cls(name=str(d["name"]), kind=str(d["kind"]), learner=str(d["learner"]), **hyper)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "learner": self.learner,
            "hyperparameters": {
                "rounds": self.rounds,
                "learning_rate": self.learning_rate,
                "reg_lambda": self.reg_lambda,
            },
        }


DEFAULT_CANDIDATES = (
    CandidateSpec("B-Reg", "b_reg", "linear"),
    CandidateSpec("B-Reg-Stumps", "b_reg", "stump_boost"),
    CandidateSpec("D-Reg", "d_reg", "linear"),
    CandidateSpec("D-Class-GLM", "d_class", "logistic"),
    CandidateSpec("D-Class-Stumps", "d_class", "stump_boost"),
)


@dataclass(frozen=True)
class EnsembleScore:
    members: tuple["DecisionFunction", ...]
    alpha: tuple[float, ...]

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        out = np.zeros(np.asarray(Z).shape[0])
        for a_j, f in zip(self.alpha, self.members):
            out = out + a_j * f(Z)
        return out


@dataclass(frozen=True)
class DecisionFunction:
    """``f: Z -> R`` with provenance; ``Z`` is the covariate matrix restricted to
    ``z_columns`` (all covariates when None)."""

    name: str
    kind: str
    score: object
    z_columns: tuple[str, ...] | None = None
    train_ids: frozenset = field(default_factory=frozenset)
    meta: Mapping = field(default_factory=dict)

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        return np.asarray(self.score(Z), dtype=float)

    def rule(self, Z: np.ndarray) -> np.ndarray:
        return (self(Z) > 0).astype(np.int64)

    def z_of(self, c: Cohort) -> np.ndarray:
        return c.select_covariates(self.z_columns)

    def to_dict(self) -> dict:
        if isinstance(self.score, EnsembleScore):
            score = {
                "type": "ensemble",
                "alpha": [float(a) for a in self.score.alpha],
                "members": [f.to_dict() for f in self.score.members],
            }
        else:
            score = self.score.to_dict()
        return {
            "name": self.name,
            "kind": self.kind,
            "z_columns": list(self.z_columns) if self.z_columns is not None else None,
            "train_ids": sorted(self.train_ids),
            "meta": dict(self.meta),
            "score": score,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DecisionFunction":
        s = d["score"]
        if s["type"] == "ensemble":
            score = EnsembleScore(
                members=tuple(cls.from_dict(x) for x in s["members"]),
                alpha=tuple(float(a) for a in s["alpha"]),
            )
        else:
            score = learners.score_from_dict(s)
        zc = d.get("z_columns")
        return cls(
            name=d["name"],
            kind=d["kind"],
            score=score,
            z_columns=tuple(zc) if zc is not None else None,
            train_ids=frozenset(d.get("train_ids", ())),
            meta=dict(d.get("meta", {})),
        )


def constant_rule(name: str, treat: bool) -> DecisionFunction:
    """"Always treat" (score +1) or "never treat" (score -1)."""
    return DecisionFunction(name=name, kind="reference", score=learners.ConstantScore(1.0 if treat else -1.0))


def _regress(Z: np.ndarray, y: np.ndarray, spec: CandidateSpec):
    if spec.learner == "intercept_only" or Z.shape[1] == 0:
        return learners.ConstantScore(float(np.mean(y)))
    if spec.learner == "linear":
        X = np.column_stack([np.ones(len(y)), Z])
        beta = learners.fit_least_squares(X, y)
        return learners.LinearScore(float(beta[0]), tuple(float(b) for b in beta[1:]))
    base, stumps = learners.boost_stumps(
        Z, y, loss="squared", rounds=spec.rounds, learning_rate=spec.learning_rate, reg_lambda=spec.reg_lambda,
    )
    return learners.StumpScore(base, stumps)


def _classify(Z: np.ndarray, labels: np.ndarray, weights: np.ndarray, spec: CandidateSpec):
    labels = labels.astype(float)
    wpos = float(weights[labels == 1].sum())
    wneg = float(weights[labels == 0].sum())
    if wpos == 0.0 or wneg == 0.0:
        # single class: constant majority-label function
        return learners.ConstantScore(1.0 if wpos > wneg else -1.0)
    w = weights / weights.mean()
    if spec.learner == "logistic":
        X = np.column_stack([np.ones(len(labels)), Z])
        beta = learners.fit_logistic(X, labels, weights=w, ridge=1e-6)
        return learners.LinearScore(float(beta[0]), tuple(float(b) for b in beta[1:]))
    base, stumps = learners.boost_stumps(
        Z, labels, loss="logistic", rounds=spec.rounds, learning_rate=spec.learning_rate,
        reg_lambda=spec.reg_lambda, weights=w,
    )
    return learners.StumpScore(base, stumps)


def _train_ids(c: Cohort) -> frozenset:
    return frozenset(str(i) for i in c.ids)


def fit_b_reg(train: Cohort, h, tau: int, reg_spec: CandidateSpec, z_columns=None) -> DecisionFunction:
    """Regress the plug-in blip sum_t S(t,1,W) - S(t,0,W) on Z."""
    target = blip_values(h, tau, train.w)
    Z = train.select_covariates(z_columns)
    return DecisionFunction(
        name=reg_spec.name, kind="b_reg", score=_regress(Z, target, reg_spec),
        z_columns=_cols(z_columns), train_ids=_train_ids(train), meta={"learner": reg_spec.learner},
    )


def fit_d_reg(train: Cohort, eta, tau: int, reg_spec: CandidateSpec, z_columns=None, d=None) -> DecisionFunction:
    """Regress the doubly robust transformation on Z (``d`` may be precomputed)."""
    if d is None:
        d = dr_terms(train, eta, tau).d
    Z = train.select_covariates(z_columns)
    return DecisionFunction(
        name=reg_spec.name, kind="d_reg", score=_regress(Z, np.asarray(d, dtype=float), reg_spec),
        z_columns=_cols(z_columns), train_ids=_train_ids(train), meta={"learner": reg_spec.learner},
    )


def fit_d_class(train: Cohort, eta, tau: int, clf_spec: CandidateSpec, z_columns=None, d=None) -> DecisionFunction:
    """Weighted classification of 1{D > 0} with weights |D|; the score is on the
    logit scale so the rule thresholds it at zero."""
    if d is None:
        d = dr_terms(train, eta, tau).d
    d = np.asarray(d, dtype=float)
    Z = train.select_covariates(z_columns)
    score = _classify(Z, (d > 0).astype(int), np.abs(d), clf_spec)
    return DecisionFunction(
        name=clf_spec.name, kind="d_class", score=score,
        z_columns=_cols(z_columns), train_ids=_train_ids(train), meta={"learner": clf_spec.learner},
    )


def fit_candidate(spec: CandidateSpec, train: Cohort, eta, tau: int, z_columns=None, d=None) -> DecisionFunction:
    if spec.kind == "b_reg":
        return fit_b_reg(train, eta.h, tau, spec, z_columns)
    if spec.kind == "d_reg":
        return fit_d_reg(train, eta, tau, spec, z_columns, d)
    return fit_d_class(train, eta, tau, spec, z_columns, d)


def _cols(z_columns):
    return tuple(z_columns) if z_columns is not None else None


def assemble_rule(candidates: Sequence[DecisionFunction], alpha, name: str = "ensemble") -> DecisionFunction:
    """Pointwise ``sum_j alpha_j f_j``.  ``alpha`` is a vector or EnsembleWeights."""
    weights = getattr(alpha, "alpha", alpha)
    weights = np.asarray(weights, dtype=float)
    if len(weights) != len(candidates):
        raise RuleError(f"{len(candidates)} candidates but {len(weights)} weights")
    if np.any(weights < 0):
        raise RuleError("ensemble weights must be non-negative")
    zc = {c.z_columns for c in candidates}
    if len(zc) > 1:
        raise RuleError("candidates disagree on the Z columns")
    train_ids = frozenset().union(*(c.train_ids for c in candidates)) if candidates else frozenset()
    meta = {"loss": getattr(alpha, "loss", None)}
    return DecisionFunction(
        name=name, kind="ensemble",
        score=EnsembleScore(members=tuple(candidates), alpha=tuple(float(a) for a in weights)),
        z_columns=zc.pop() if zc else None, train_ids=train_ids, meta=meta,
    )


@dataclass(frozen=True)
class ValueEstimate:
    v_hat: float
    se_hat: float
    n_eval: int
    rule: str
    nuisance: str

    def to_dict(self) -> dict:
        return {"rule": self.rule, "nuisance": self.nuisance, "v_hat": self.v_hat,
                "se_hat": self.se_hat, "n_eval": self.n_eval}


def estimate_value(rule: DecisionFunction, eval_cohort: Cohort, eta_eval, tau: int, d=None) -> ValueEstimate:
    """Empirical mean of d(Z) D over ``eval_cohort``; ``d`` may be precomputed.

    Raises :class:`RuleError` when the evaluation subjects overlap the rule's
    training subjects.
    """
    overlap = rule.train_ids & _train_ids(eval_cohort)
    if overlap:
        raise RuleError(f"evaluation data overlaps rule training data ({len(overlap)} shared ids)")
    if d is None:
        d = dr_terms(eval_cohort, eta_eval, tau).d
    d = np.asarray(d, dtype=float)
    treat = rule.rule(rule.z_of(eval_cohort)).astype(bool)
    contrib = np.where(treat, d, 0.0)
    n = len(contrib)
    se = float(np.std(contrib, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return ValueEstimate(
        v_hat=float(np.mean(contrib)) if n else 0.0, se_hat=se, n_eval=n,
        rule=rule.name, nuisance=getattr(eta_eval, "label", "eta"),
    )


@dataclass(frozen=True)
class RegretResult:
    regret: float
    se: float
    exact: bool


def regret(rule: DecisionFunction, dgp, n_mc: int = 200_000, seed: int = 12345) -> RegretResult:
    """V0(d0) - V0(rule) = E[theta0(Z) (d0(Z) - d(Z))] under the DGP's covariate law.

    Exact summation for discrete covariate laws, Monte Carlo with a fixed seed
    otherwise (so different rules are compared on common draws).
    """
    if rule.z_columns is not None and tuple(rule.z_columns) != tuple(dgp.covariate_names):
        raise RuleError("regret is only defined for rules that use every covariate")
    if dgp.is_discrete:
        W, prob = dgp.support()
        theta = dgp.true_blip(W)
        d0 = (theta > 0).astype(float)
        loss = theta * (d0 - rule.rule(W))
        return RegretResult(regret=float(prob @ loss), se=0.0, exact=True)
    W = dgp.sample_w(n_mc, np.random.default_rng(seed))
    theta = dgp.true_blip(W)
    loss = theta * ((theta > 0).astype(float) - rule.rule(W))
    return RegretResult(regret=float(loss.mean()), se=float(loss.std(ddof=1) / np.sqrt(n_mc)), exact=False)
