"""Fold planning, out-of-fold candidate predictions and cross-validated risks.

Risks are plain means over all subjects; with equal fold sizes this is the same
as averaging per-fold means.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .cohort import Cohort
from .nuisance import NuisanceSet, fit_nuisance_superlearner
from .rules import CandidateSpec, DecisionFunction, fit_candidate
from .transform import dr_terms


class FoldError(ValueError):
    pass


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: np.ndarray
    seed: int
    stratified: bool = False

    def validation(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def training(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)


def make_folds(n: int, k: int, seed: int = 0, strata: np.ndarray | None = None) -> FoldPlan:
    """Random partition of ``range(n)`` into ``k`` folds whose sizes differ by at most one.

    With ``strata`` each stratum is shuffled and the strata are dealt
    round-robin in turn, so every fold gets a near-equal share of each stratum
    and the overall sizes still differ by at most one.
    """
    if k < 2:
        raise FoldError(f"fold count must be at least 2, got {k}")
    if k > n:
        raise FoldError(f"fold count {k} exceeds the number of subjects {n}")
    rng = np.random.default_rng(seed)
    if strata is None:
        order = rng.permutation(n)
    else:
        strata = np.asarray(strata)
        if len(strata) != n:
            raise FoldError("strata length does not match n")
        order = np.concatenate([rng.permutation(np.flatnonzero(strata == s)) for s in np.unique(strata)])
    assignment = np.empty(n, dtype=np.int64)
    assignment[order] = np.arange(n) % k
    return FoldPlan(k=k, assignment=assignment, seed=seed, stratified=strata is not None)


def cohort_strata(c: Cohort) -> np.ndarray:
    """Stratum label ``2 A + Delta``."""
    return 2 * c.a + c.delta


def make_cohort_folds(c: Cohort, k: int, seed: int = 0, stratified: bool = True) -> FoldPlan:
    return make_folds(len(c), k, seed, cohort_strata(c) if stratified else None)


# --- risk functions on arrays -----------------------------------------------


def _combine(F: np.ndarray, alpha) -> np.ndarray:
    return np.asarray(F, dtype=float) @ np.asarray(alpha, dtype=float)


def quadratic_risk(F, y, alpha) -> float:
    r = np.asarray(y, dtype=float) - _combine(F, alpha)
    return float(np.mean(r * r))


def zeroone_risk(F, D, alpha) -> float:
    D = np.asarray(D, dtype=float)
    wrong = (_combine(F, alpha) > 0) != (D > 0)
    return float(np.abs(D) @ wrong.astype(float) / len(D))


def zeroone_risk_batch(F, D, A) -> np.ndarray:
    """0-1 risk for every column of ``A`` (J x R)."""
    D = np.asarray(D, dtype=float)
    wrong = (np.asarray(F, dtype=float) @ A > 0) != (D > 0)[:, None]
    return np.abs(D) @ wrong.astype(float) / len(D)


def phi_hinge(x):
    return np.maximum(1.0 - x, 0.0)


def phi_log(x):
    return np.logaddexp(0.0, -x)


PHI = {"hinge": phi_hinge, "log": phi_log}


def surrogate_risk(F, D, alpha, phi: str) -> float:
    if phi not in PHI:
        raise ValueError(f"phi must be 'hinge' or 'log', got {phi!r}")
    D = np.asarray(D, dtype=float)
    margin = _combine(F, alpha) * np.where(D > 0, 1.0, -1.0)
    return float(np.mean(np.abs(D) * PHI[phi](margin)))


# --- cross-validated matrix --------------------------------------------------


@dataclass(frozen=True)
class CvMatrix:
    """Out-of-fold candidate predictions (n x J) with fold-specific targets."""

    ids: np.ndarray
    fold: np.ndarray
    z_matrix: np.ndarray
    targets: np.ndarray
    names: tuple[str, ...]
    reports: tuple = field(default=())

    @property
    def weights(self) -> np.ndarray:
        return np.abs(self.targets)

    @property
    def labels(self) -> np.ndarray:
        return (self.targets > 0).astype(np.int64)

    @property
    def n(self) -> int:
        return len(self.targets)

    @property
    def J(self) -> int:
        return self.z_matrix.shape[1]

    def column(self, j: int) -> np.ndarray:
        e = np.zeros(self.J)
        e[j] = 1.0
        return e

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["id", "fold", "target", "weight", "label"] + [f"f_{j + 1}" for j in range(self.J)])
            for i in range(self.n):
                out.writerow(
                    [self.ids[i], int(self.fold[i]), repr(float(self.targets[i])), repr(float(self.weights[i])),
                     int(self.labels[i])] + [repr(float(x)) for x in self.z_matrix[i]]
                )


def _check_alpha(m: CvMatrix, alpha, simplex: bool) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (m.J,):
        raise FoldError(f"alpha must have length {m.J}")
    if np.any(alpha < 0):
        raise FoldError("alpha entries must be non-negative")
    if simplex and abs(alpha.sum() - 1.0) > 1e-9:
        raise FoldError("quadratic risk requires alpha on the simplex")
    return alpha


def cv_quadratic_risk(m: CvMatrix, alpha) -> float:
    return quadratic_risk(m.z_matrix, m.targets, _check_alpha(m, alpha, True))


def cv_zeroone_risk(m: CvMatrix, alpha) -> float:
    return zeroone_risk(m.z_matrix, m.targets, _check_alpha(m, alpha, False))


def cv_surrogate_risk(m: CvMatrix, alpha, phi: str) -> float:
    return surrogate_risk(m.z_matrix, m.targets, _check_alpha(m, alpha, False), phi)


def cv_risk(m: CvMatrix, alpha, loss: str) -> float:
    if loss == "quadratic":
        return cv_quadratic_risk(m, alpha)
    if loss == "zeroone":
        return cv_zeroone_risk(m, alpha)
    return cv_surrogate_risk(m, alpha, loss)


NuisanceFactory = Callable[[Cohort, int], NuisanceSet]


def superlearner_factory(specs, tau: int, inner_k: int = 5, seed: int = 0, eps: float = 0.01,
                         stratified: bool = True) -> NuisanceFactory:
    """Nuisance fitter for one training sample, with its own inner fold plan."""

    def fit(train: Cohort, fold: int) -> NuisanceSet:
        inner = make_cohort_folds(train, min(inner_k, len(train)), seed=seed + 1000 * (fold + 1),
                                  stratified=stratified)
        return fit_nuisance_superlearner(train, specs, inner, tau, eps=eps, fold_id=fold)

    return fit


@dataclass(frozen=True)
class FoldFit:
    fold: int
    rows: np.ndarray
    predictions: np.ndarray
    targets: np.ndarray
    nuisance: NuisanceSet
    candidates: tuple[DecisionFunction, ...]


def fit_fold(c: Cohort, plan: FoldPlan, fold: int, nuisance: NuisanceFactory,
             candidate_specs: Sequence[CandidateSpec], tau: int, z_columns=None) -> FoldFit:
    """Train nuisances and candidates on the training part of ``fold``; predict on its validation part."""
    train_idx, valid_idx = plan.training(fold), plan.validation(fold)
    train, valid = c.take(train_idx), c.take(valid_idx)
    if len(train) == 0 or train.a.min() == train.a.max():
        raise FoldError(f"training sample for fold {fold} contains a single arm; use stratified folds")
    eta = nuisance(train, fold)
    d_train = dr_terms(train, eta, tau).d
    cands = tuple(fit_candidate(s, train, eta, tau, z_columns, d=d_train) for s in candidate_specs)
    Zv = valid.select_covariates(z_columns)
    preds = np.column_stack([f(Zv) for f in cands]) if cands else np.zeros((len(valid), 0))
    return FoldFit(
        fold=fold, rows=valid_idx, predictions=preds, targets=dr_terms(valid, eta, tau).d,
        nuisance=eta, candidates=cands,
    )


def build_cv_matrix(
    c: Cohort,
    plan: FoldPlan,
    nuisance_specs,
    candidate_specs: Sequence[CandidateSpec],
    tau: int,
    z_columns=None,
    inner_k: int = 5,
    eps: float = 0.01,
    workers: int = 1,
) -> CvMatrix:
    """Cross-validated candidate predictions and targets.

    ``nuisance_specs`` is either a learner library (fit by super learner inside
    each training sample) or a callable ``(train_cohort, fold) -> NuisanceSet``.
    """
    if len(plan.assignment) != len(c):
        raise FoldError("fold plan does not match the cohort size")
    if not candidate_specs:
        raise FoldError("the candidate library is empty")
    names = [s.name for s in candidate_specs]
    if len(set(names)) != len(names):
        raise FoldError("candidate names must be unique")
    factory = nuisance_specs if callable(nuisance_specs) else superlearner_factory(
        nuisance_specs, tau, inner_k=inner_k, seed=plan.seed, eps=eps, stratified=plan.stratified)

    def run(fold):
        return fit_fold(c, plan, fold, factory, candidate_specs, tau, z_columns)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fits = list(pool.map(run, range(plan.k)))
    else:
        fits = [run(k) for k in range(plan.k)]

    F = np.zeros((len(c), len(candidate_specs)))
    targets = np.zeros(len(c))
    for ff in fits:
        F[ff.rows] = ff.predictions
        targets[ff.rows] = ff.targets
    reports = tuple(ff.nuisance.weights.get("report") for ff in fits)
    return CvMatrix(
        ids=c.ids, fold=plan.assignment.copy(), z_matrix=F, targets=targets,
        names=tuple(names), reports=reports,
    )


def crossfit_transform(c: Cohort, plan: FoldPlan, nuisance: NuisanceFactory, tau: int) -> np.ndarray:
    """D for every subject using nuisances trained without the subject's fold."""
    d = np.zeros(len(c))
    for k in range(plan.k):
        train_idx, valid_idx = plan.training(k), plan.validation(k)
        train = c.take(train_idx)
        if train.a.min() == train.a.max():
            raise FoldError(f"training sample for fold {k} contains a single arm; use stratified folds")
        d[valid_idx] = dr_terms(c.take(valid_idx), nuisance(train, k), tau).d
    return d
