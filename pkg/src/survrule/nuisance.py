"""Nuisance parameters: event hazard h, propensity g_A and censoring hazard g_R.

Hazards are fit on person-period rows with time as a categorical effect.
Both hazards are fit separately within each treatment arm (the
``logistic_arm_interactions`` family is the exception: it is one regression on
both arms with a full set of arm-by-covariate interactions, which yields
arm-specific predictors while sharing the time effects).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from . import learners
from .cohort import Cohort, RiskSetTable, expand_risk_sets

EPS_CLIP = 0.01
FAMILIES = ("intercept_only", "logistic_main_effects", "logistic_arm_interactions", "stump_boost")
RIDGE = 1e-6


class NuisanceError(ValueError):
    pass


@dataclass(frozen=True)
class LearnerSpec:
    name: str
    family: str
    rounds: int = 100
    learning_rate: float = 0.1
    reg_lambda: float = 1.0
    screen: int | None = 50

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise NuisanceError(f"unknown learner family {self.family!r}; expected one of {FAMILIES}")
        if not 1 <= int(self.rounds) <= 10_000:
            raise NuisanceError("rounds must lie in 1..10000")
        if not 0.0 < float(self.learning_rate) <= 1.0:
            raise NuisanceError("learning_rate must lie in (0, 1]")
        if float(self.reg_lambda) < 0:
            raise NuisanceError("reg_lambda must be non-negative")
        if self.screen is not None and int(self.screen) < 1:
            raise NuisanceError("screen must be a positive count")

    @classmethod
    def from_dict(cls, d: Mapping) -> "LearnerSpec":
        unknown = set(d) - {"name", "family", "hyperparameters"}
        if unknown:
            raise NuisanceError(f"unknown learner keys {sorted(unknown)}")
        hyper = dict(d.get("hyperparameters") or {})
        allowed = {"rounds", "learning_rate", "reg_lambda", "screen"}
        if set(hyper) - allowed:
            raise NuisanceError(f"unknown hyperparameters {sorted(set(hyper) - allowed)}")
        return cls(name=str(d["name"]), family=str(d["family"]), **hyper)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "family": self.family,
            "hyperparameters": {
                "rounds": self.rounds,
                "learning_rate": self.learning_rate,
                "reg_lambda": self.reg_lambda,
                "screen": self.screen,
            },
        }


DEFAULT_LIBRARY = (
    LearnerSpec("intercept", "intercept_only"),
    LearnerSpec("glm", "logistic_main_effects"),
    LearnerSpec("glm_interact", "logistic_arm_interactions"),
    LearnerSpec("stumps", "stump_boost"),
)


# --- fitted models ---------------------------------------------------------

ArmPredictor = Callable[[int, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class HazardModel:
    """Arm-specific discrete hazard predictors ``(m, W) -> probability``, clipped."""

    kind: str
    arms: Mapping[int, ArmPredictor]
    times: tuple[int, ...]
    eps: float = EPS_CLIP
    fold: int | None = None

    def predict(self, m: int, a: int, W: np.ndarray) -> np.ndarray:
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return np.clip(self.arms[a](m, W), self.eps, 1.0 - self.eps)

    def matrix(self, a: int, W: np.ndarray, times: Sequence[int]) -> np.ndarray:
        W = np.atleast_2d(np.asarray(W, dtype=float))
        if len(times) == 0:
            return np.zeros((W.shape[0], 0))
        return np.column_stack([self.predict(m, a, W) for m in times])


@dataclass(frozen=True)
class PropensityModel:
    score: Callable[[np.ndarray], np.ndarray]
    eps: float = EPS_CLIP
    fold: int | None = None

    def predict(self, W: np.ndarray) -> np.ndarray:
        """P(A = 1 | W), clipped."""
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return np.clip(self.score(W), self.eps, 1.0 - self.eps)

    def prob(self, a: int, W: np.ndarray) -> np.ndarray:
        p1 = self.predict(W)
        return p1 if a == 1 else 1.0 - p1


@dataclass(frozen=True)
class FunctionHazard:
    """Closed-form hazard ``fn(m, a, W)``; used for true and deliberately wrong nuisances."""

    kind: str
    fn: Callable[[int, int, np.ndarray], np.ndarray]

    def predict(self, m: int, a: int, W: np.ndarray) -> np.ndarray:
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return np.broadcast_to(np.asarray(self.fn(m, a, W), dtype=float), (W.shape[0],)).copy()

    def matrix(self, a: int, W: np.ndarray, times: Sequence[int]) -> np.ndarray:
        W = np.atleast_2d(np.asarray(W, dtype=float))
        if len(times) == 0:
            return np.zeros((W.shape[0], 0))
        return np.column_stack([self.predict(m, a, W) for m in times])


@dataclass(frozen=True)
class FunctionPropensity:
    """Closed-form arm probability ``fn(a, W)``.  Not required to sum to one over arms,
    which lets the g-computation special case set g_A = 1 for both arms."""

    fn: Callable[[int, np.ndarray], np.ndarray]

    def prob(self, a: int, W: np.ndarray) -> np.ndarray:
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return np.broadcast_to(np.asarray(self.fn(a, W), dtype=float), (W.shape[0],)).copy()

    def predict(self, W: np.ndarray) -> np.ndarray:
        return self.prob(1, W)


@dataclass(frozen=True)
class NuisanceSet:
    h: object
    g_a: object
    g_r: object
    label: str = "fitted"
    weights: Mapping[str, dict] = field(default_factory=dict)


# --- screening ---------------------------------------------------------------


def screen_covariates(table: RiskSetTable, keep: int) -> np.ndarray:
    """Indices of the ``keep`` covariates with the largest absolute two-sample
    t statistic between y = 1 and y = 0 rows (ties to the lower index)."""
    p = table.w.shape[1]
    if keep > p:
        raise NuisanceError(f"cannot keep {keep} of {p} covariates")
    if keep == p:
        return np.arange(p)
    return learners.top_k_by_abs(learners.t_statistics(table.w, table.y), keep)


# --- single-learner hazard fits ---------------------------------------------


def _onehot(m: np.ndarray, levels: Sequence[int]) -> np.ndarray:
    return (np.asarray(m)[:, None] == np.asarray(levels)[None, :]).astype(float)


def _shrunken_rates(m: np.ndarray, y: np.ndarray, levels: Sequence[int]) -> dict[int, float]:
    # add-half shrinkage keeps every rate strictly inside (0, 1)
    return {t: (float(y[m == t].sum()) + 0.5) / (float((m == t).sum()) + 1.0) for t in levels}


class _RatePredictor:
    def __init__(self, rates: dict[int, float]):
        self.rates = rates

    def __call__(self, m: int, W: np.ndarray) -> np.ndarray:
        return np.full(W.shape[0], self.rates.get(int(m), 0.5))


class _LogitPredictor:
    def __init__(self, levels, time_coef, cov_idx, cov_coef):
        self.time_coef = dict(zip(levels, time_coef))
        self.cov_idx = np.asarray(cov_idx, dtype=int)
        self.cov_coef = np.asarray(cov_coef, dtype=float)

    def __call__(self, m: int, W: np.ndarray) -> np.ndarray:
        eta = self.time_coef.get(int(m), 0.0) + W[:, self.cov_idx] @ self.cov_coef
        return expit(eta)


class _BoostPredictor:
    def __init__(self, rates: dict[int, float], score: learners.StumpScore):
        self.logit0 = {t: float(np.log(r / (1 - r))) for t, r in rates.items()}
        self.score = score

    def __call__(self, m: int, W: np.ndarray) -> np.ndarray:
        X = np.column_stack([np.full(W.shape[0], float(m)), W])
        return expit(self.logit0.get(int(m), 0.0) + self.score(X))


def _screen_idx(w: np.ndarray, y: np.ndarray, spec: LearnerSpec) -> np.ndarray:
    p = w.shape[1]
    if spec.screen is None or spec.screen >= p:
        return np.arange(p)
    return learners.top_k_by_abs(learners.t_statistics(w, y), int(spec.screen))


def _fit_arm(m, w, y, levels, spec: LearnerSpec) -> ArmPredictor:
    if spec.family == "intercept_only":
        return _RatePredictor(_shrunken_rates(m, y, levels))
    if spec.family in ("logistic_main_effects", "logistic_arm_interactions"):
        idx = _screen_idx(w, y, spec)
        X = np.hstack([_onehot(m, levels), w[:, idx]])
        beta = learners.fit_logistic(X, y, ridge=RIDGE)
        return _LogitPredictor(levels, beta[: len(levels)], idx, beta[len(levels):])
    rates = _shrunken_rates(m, y, levels)
    offset = np.array([np.log(rates[t] / (1 - rates[t])) for t in m]) if len(m) else np.zeros(0)
    X = np.column_stack([m.astype(float), w])
    base, stumps = learners.boost_stumps(
        X, y, loss="logistic", rounds=spec.rounds, learning_rate=spec.learning_rate,
        reg_lambda=spec.reg_lambda, init=offset,
    )
    return _BoostPredictor(rates, learners.StumpScore(base, stumps))


def _fit_joint(table: RiskSetTable, levels, spec: LearnerSpec) -> dict[int, ArmPredictor]:
    idx = _screen_idx(table.w, table.y, spec)
    ws = table.w[:, idx]
    a = table.a.astype(float)[:, None]
    X = np.hstack([_onehot(table.m, levels), ws, a, a * ws])
    beta = learners.fit_logistic(X, table.y, ridge=RIDGE)
    k, q = len(levels), len(idx)
    t_coef, w_coef = beta[:k], beta[k:k + q]
    a_coef, aw_coef = beta[k + q], beta[k + q + 1:]
    return {
        0: _LogitPredictor(levels, t_coef, idx, w_coef),
        1: _LogitPredictor(levels, t_coef + a_coef, idx, w_coef + aw_coef),
    }


def fit_pooled_hazard(
    table: RiskSetTable,
    spec: LearnerSpec,
    times: Sequence[int] | None = None,
    eps: float = EPS_CLIP,
    fold: int | None = None,
) -> HazardModel:
    """Fit one learner to person-period rows, returning arm-specific predictors."""
    levels = tuple(int(t) for t in (times if times is not None else np.unique(table.m)))
    if spec.family == "logistic_arm_interactions":
        arms = _fit_joint(table, levels, spec) if len(table) else {
            a: _RatePredictor({}) for a in (0, 1)
        }
    else:
        arms = {}
        for a in (0, 1):
            part = table.for_arm(a)
            arms[a] = _fit_arm(part.m, part.w, part.y.astype(float), levels, spec)
    return HazardModel(kind=table.kind, arms=arms, times=levels, eps=eps, fold=fold)


def fit_propensity(c: Cohort, spec: LearnerSpec, eps: float = EPS_CLIP, fold: int | None = None) -> PropensityModel:
    a = c.a.astype(float)
    if len(c) == 0 or a.min() == a.max():
        raise NuisanceError("propensity fit needs subjects from both arms")
    if spec.family == "intercept_only":
        score = learners.ConstantScore(float(a.mean()))
    elif spec.family in ("logistic_main_effects", "logistic_arm_interactions"):
        idx = _screen_idx(c.w, c.a, spec)
        X = np.hstack([np.ones((len(c), 1)), c.w[:, idx]])
        beta = learners.fit_logistic(X, a, ridge=RIDGE)
        coef = np.zeros(c.p)
        coef[idx] = beta[1:]
        lin = learners.LinearScore(float(beta[0]), tuple(coef))
        score = _Expit(lin)
    else:
        base, stumps = learners.boost_stumps(
            c.w, a, loss="logistic", rounds=spec.rounds, learning_rate=spec.learning_rate,
            reg_lambda=spec.reg_lambda,
        )
        score = _Expit(learners.StumpScore(base, stumps))
    return PropensityModel(score=score, eps=eps, fold=fold)


class _Expit:
    def __init__(self, inner):
        self.inner = inner

    def __call__(self, W):
        return expit(self.inner(W))


# --- super learner -----------------------------------------------------------


class _MixturePredictor:
    def __init__(self, members: Sequence[Callable], alpha: np.ndarray, eps: float):
        self.members = list(members)
        self.alpha = np.asarray(alpha, dtype=float)
        self.eps = eps

    def __call__(self, *args) -> np.ndarray:
        out = 0.0
        for a_j, f in zip(self.alpha, self.members):
            if a_j > 0:
                out = out + a_j * np.clip(f(*args), self.eps, 1 - self.eps)
        return np.asarray(out, dtype=float)


def bernoulli_nll(p: np.ndarray, y: np.ndarray) -> float:
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def _nll_weights(P: np.ndarray, y: np.ndarray):
    """Simplex weights minimising the Bernoulli NLL of the mixture ``P @ alpha``."""
    from .ensemble import minimize_on_simplex

    y = y.astype(float)

    def f(al):
        return bernoulli_nll(np.clip(P @ al, 1e-300, 1 - 1e-16), y)

    def grad(al):
        q = np.clip(P @ al, 1e-300, 1 - 1e-16)
        return -(P.T @ (y / q - (1 - y) / (1 - q))) / len(y)

    return minimize_on_simplex(f, grad, P.shape[1])


@dataclass(frozen=True)
class SuperLearnerReport:
    """Per-target candidate weights and cross-validated NLL (one row per arm)."""

    names: tuple[str, ...]
    weights: dict[str, list[float]]
    cv_nll: dict[str, list[float]]
    ensemble_nll: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "candidates": list(self.names),
            "weights": self.weights,
            "cv_nll": self.cv_nll,
            "ensemble_cv_nll": self.ensemble_nll,
        }


def _cv_hazard_predictions(table, subject_fold, specs, levels, eps, k) -> np.ndarray:
    P = np.zeros((len(table), len(specs)))
    row_fold = subject_fold[table.subject_index]
    for v in range(k):
        held = row_fold == v
        if not held.any():
            continue
        train = table.subset(~held)
        for j, spec in enumerate(specs):
            model = fit_pooled_hazard(train, spec, times=levels, eps=eps)
            rows = np.flatnonzero(held)
            for a in (0, 1):
                sel = rows[table.a[rows] == a]
                for t in levels:
                    st = sel[table.m[sel] == t]
                    if len(st):
                        P[st, j] = model.predict(t, a, table.w[st])
    return P


def _hazard_superlearner(table, subject_fold, specs, levels, eps, k, label):
    names = tuple(s.name for s in specs)
    if len(table) == 0:
        alpha = {a: np.full(len(specs), 1.0 / len(specs)) for a in (0, 1)}
        report_w = {f"{label}[A={a}]": alpha[a].tolist() for a in (1, 0)}
        report_nll = {f"{label}[A={a}]": [float("nan")] * len(specs) for a in (1, 0)}
        ens = {f"{label}[A={a}]": float("nan") for a in (1, 0)}
    else:
        P = _cv_hazard_predictions(table, subject_fold, specs, levels, eps, k)
        alpha, report_w, report_nll, ens = {}, {}, {}, {}
        for a in (1, 0):
            rows = table.a == a
            key = f"{label}[A={a}]"
            if not rows.any():
                alpha[a] = np.full(len(specs), 1.0 / len(specs))
                report_nll[key] = [float("nan")] * len(specs)
                ens[key] = float("nan")
            else:
                y = table.y[rows].astype(float)
                Pa = P[rows]
                res = _nll_weights(Pa, y)
                alpha[a] = res.alpha
                report_nll[key] = [bernoulli_nll(Pa[:, j], y) for j in range(len(specs))]
                ens[key] = res.risk
            report_w[key] = alpha[a].tolist()
    fits = [fit_pooled_hazard(table, s, times=levels, eps=eps) for s in specs]
    arms = {a: _MixturePredictor([f.arms[a] for f in fits], alpha[a], eps) for a in (0, 1)}
    model = HazardModel(kind=table.kind, arms=arms, times=tuple(levels), eps=eps)
    return model, names, report_w, report_nll, ens


def fit_nuisance_superlearner(
    c: Cohort,
    specs: Sequence[LearnerSpec],
    folds,
    tau: int,
    eps: float = EPS_CLIP,
    fold_id: int | None = None,
) -> NuisanceSet:
    """Per-arm super learners for h and g_R plus a super learner for g_A.

    ``folds`` partitions the subjects of ``c`` (anything exposing ``k`` and
    ``assignment``).  Weights minimise the cross-validated Bernoulli negative
    log-likelihood over the simplex; the weight table is attached to the
    returned :class:`NuisanceSet`.
    """
    if not specs:
        raise NuisanceError("the learner library is empty")
    if len(c) and c.a.min() == c.a.max():
        raise NuisanceError("nuisance fit needs subjects from both arms")
    subject_fold = np.asarray(folds.assignment)
    if len(subject_fold) != len(c):
        raise NuisanceError("fold plan does not match the cohort size")
    event, cens = expand_risk_sets(c, tau)
    h, names, w_h, nll_h, ens_h = _hazard_superlearner(
        event, subject_fold, specs, list(range(1, tau)), eps, folds.k, "h")
    g_r, _, w_r, nll_r, ens_r = _hazard_superlearner(
        cens, subject_fold, specs, list(range(0, tau - 1)), eps, folds.k, "g_R")

    # propensity: subject level, both arms together
    P = np.zeros((len(c), len(specs)))
    for v in range(folds.k):
        held = subject_fold == v
        if not held.any():
            continue
        train = c.take(np.flatnonzero(~held))
        for j, spec in enumerate(specs):
            P[held, j] = fit_propensity(train, spec, eps).predict(c.w[held])
    y = c.a.astype(float)
    res = _nll_weights(P, y)
    fits = [fit_propensity(c, s, eps) for s in specs]
    g_a = PropensityModel(score=_MixturePredictor([f.predict for f in fits], res.alpha, eps), eps=eps, fold=fold_id)

    report = SuperLearnerReport(
        names=names,
        weights={**w_r, **w_h, "g_A": res.alpha.tolist()},
        cv_nll={**nll_r, **nll_h, "g_A": [bernoulli_nll(P[:, j], y) for j in range(len(specs))]},
        ensemble_nll={**ens_r, **ens_h, "g_A": res.risk},
    )
    h = HazardModel(kind="event", arms=h.arms, times=h.times, eps=eps, fold=fold_id)
    g_r = HazardModel(kind="censoring", arms=g_r.arms, times=g_r.times, eps=eps, fold=fold_id)
    return NuisanceSet(h=h, g_a=g_a, g_r=g_r, label="superlearner", weights={"report": report.to_dict()})


def fit_nuisance_single(c: Cohort, spec: LearnerSpec, tau: int, eps: float = EPS_CLIP) -> NuisanceSet:
    """All three nuisance components from one learner, without cross-validation."""
    event, cens = expand_risk_sets(c, tau)
    h = fit_pooled_hazard(event, spec, times=range(1, tau), eps=eps)
    g_r = fit_pooled_hazard(cens, spec, times=range(0, tau - 1), eps=eps)
    return NuisanceSet(h=h, g_a=fit_propensity(c, spec, eps), g_r=g_r, label=spec.name)


# --- true and corrupted nuisances --------------------------------------------


def make_oracle_nuisance(dgp) -> NuisanceSet:
    """Exact (h0, g_A0, g_R0) of a synthetic data-generating process."""
    return NuisanceSet(
        h=FunctionHazard("event", dgp.h0),
        g_a=FunctionPropensity(lambda a, W: dgp.g_a0(W) if a == 1 else 1.0 - dgp.g_a0(W)),
        g_r=FunctionHazard("censoring", dgp.g_r0),
        label="oracle",
    )


CORRUPT_H = 0.5
CORRUPT_G_A = 0.5
CORRUPT_G_R = 0.1


def make_corrupted_nuisance(dgp, which: str) -> NuisanceSet:
    """Replace one component by a fixed wrong-but-valid function.

    ``which="h"``: h ≡ 0.5, g exact.  ``which="g"``: g_A ≡ 0.5 and g_R ≡ 0.1,
    h exact.  ``which="both"`` corrupts everything.
    """
    if which not in ("h", "g", "both"):
        raise NuisanceError(f"which must be 'h', 'g' or 'both', got {which!r}")
    oracle = make_oracle_nuisance(dgp)
    h = FunctionHazard("event", lambda m, a, W: np.full(len(W), CORRUPT_H)) if which in ("h", "both") else oracle.h
    if which in ("g", "both"):
        g_a = FunctionPropensity(lambda a, W: np.full(len(W), CORRUPT_G_A))
        g_r = FunctionHazard("censoring", lambda m, a, W: np.full(len(W), CORRUPT_G_R))
    else:
        g_a, g_r = oracle.g_a, oracle.g_r
    return NuisanceSet(h=h, g_a=g_a, g_r=g_r, label=f"corrupt_{which}")


def ipw_nuisance(g_a, g_r) -> NuisanceSet:
    """Inverse-weighting special case: the outcome hazard is the constant 1."""
    return NuisanceSet(h=FunctionHazard("event", lambda m, a, W: np.ones(len(W))), g_a=g_a, g_r=g_r, label="ipw")


def gcomp_nuisance(h) -> NuisanceSet:
    """Plug-in special case: g_A ≡ 1 for both arms and g_R ≡ 0."""
    return NuisanceSet(
        h=h,
        g_a=FunctionPropensity(lambda a, W: np.ones(len(W))),
        g_r=FunctionHazard("censoring", lambda m, a, W: np.zeros(len(W))),
        label="gcomp",
    )

