"""Product-limit curves, the blip function and the doubly robust censoring
unbiased transformation ``D``.

For a subject with arm ``A`` and covariates ``W``::

    D = sum_{m=1}^{tau-1} [ I_m Z(m, A, W) (L_m - h(m, A, W)) + S(m, 1, W) - S(m, 0, W) ]

    Z_a(m, A, W) = -1{A = a} / (g_A(a, W) G(m, a, W)) * sum_{t=m}^{tau-1} S(t, a, W) / S(m, a, W)

with ``S(t) = prod_{k=1}^{t} (1 - h(k))`` and ``G(t) = prod_{k=0}^{t-1} (1 - g_R(k))``.
The ratio ``S(t)/S(m)`` is formed as ``prod_{k=m+1}^{t} (1 - h(k))`` so it is
exactly 1 at ``t = m`` and never divides by a vanishing survival probability.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cohort import Cohort, Subject


class TransformError(ValueError):
    pass


@dataclass(frozen=True)
class SurvivalCurves:
    """``s[t]`` = S(t) and ``g_cum[t]`` = G(t) for t = 0..tau-1."""

    s: np.ndarray
    g_cum: np.ndarray


def _check_tau(tau: int) -> None:
    if int(tau) != tau or tau < 1:
        raise TransformError(f"tau must be a positive integer, got {tau!r}")


def _check_prob(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x)) or np.any(x < 0) or np.any(x > 1):
        raise TransformError(f"{what} outside [0, 1]")
    return x


def survival_product(hazards: np.ndarray) -> np.ndarray:
    """``[1, (1-h_1), (1-h_1)(1-h_2), ...]`` along the last axis."""
    hazards = _check_prob(hazards, "hazard")
    lead = np.ones(hazards.shape[:-1] + (1,))
    return np.concatenate([lead, np.cumprod(1.0 - hazards, axis=-1)], axis=-1)


def survival_from_hazard(h, tau: int, a: int, w) -> SurvivalCurves:
    """Event survival S(t, a, w) for t = 0..tau-1 (the ``g_cum`` part is left as ones)."""
    _check_tau(tau)
    W = np.atleast_2d(np.asarray(w, dtype=float))
    hz = h.matrix(a, W, list(range(1, tau)))[0]
    s = survival_product(hz)
    return SurvivalCurves(s=s, g_cum=np.ones(tau))


def censoring_survivor(g_r, tau: int, a: int, w) -> SurvivalCurves:
    """Censoring survivor G(t, a, w) for t = 0..tau-1 (the ``s`` part is left as ones)."""
    _check_tau(tau)
    W = np.atleast_2d(np.asarray(w, dtype=float))
    gr = g_r.matrix(a, W, list(range(0, tau - 1)))[0]
    return SurvivalCurves(s=np.ones(tau), g_cum=survival_product(gr))


def blip_values(h, tau: int, W: np.ndarray) -> np.ndarray:
    """sum_{t=1}^{tau-1} S(t, 1, w) - S(t, 0, w) for every row of ``W``."""
    _check_tau(tau)
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if tau == 1:
        return np.zeros(W.shape[0])
    times = list(range(1, tau))
    s1 = survival_product(h.matrix(1, W, times))[:, 1:]
    s0 = survival_product(h.matrix(0, W, times))[:, 1:]
    return (s1 - s0).sum(axis=1)


def blip(h, tau: int, w) -> float:
    return float(blip_values(h, tau, np.atleast_2d(np.asarray(w, dtype=float)))[0])


@dataclass(frozen=True)
class DrValue:
    """One subject's transformation with its per-time terms.

    ``augmentation[m-1]`` is I_m Z(m) (L_m - h(m)) and ``plugin[m-1]`` is
    S(m, 1) - S(m, 0), for m = 1..tau-1.
    """

    subject_id: str
    d: float
    augmentation: tuple[float, ...]
    plugin: tuple[float, ...]

    def recompose(self) -> float:
        acc = 0.0
        for x in self.augmentation:
            acc += x
        for x in self.plugin:
            acc += x
        return acc


@dataclass(frozen=True)
class DrTerms:
    """Vectorised transformation for a cohort: ``d`` plus (n, tau-1) term arrays."""

    ids: np.ndarray
    d: np.ndarray
    augmentation: np.ndarray
    plugin: np.ndarray

    def values(self) -> list[DrValue]:
        return [
            DrValue(
                subject_id=str(self.ids[i]),
                d=float(self.d[i]),
                augmentation=tuple(float(x) for x in self.augmentation[i]),
                plugin=tuple(float(x) for x in self.plugin[i]),
            )
            for i in range(len(self.d))
        ]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["subject_id", "m", "augmentation_m", "plugin_m", "d"])
            for i in range(len(self.d)):
                for m in range(self.augmentation.shape[1]):
                    out.writerow([self.ids[i], m + 1, repr(float(self.augmentation[i, m])),
                                  repr(float(self.plugin[i, m])), repr(float(self.d[i]))])


def _arrays(W, a, delta, time, eta, tau):
    n = W.shape[0]
    steps = tau - 1
    if steps == 0:
        return np.zeros((n, 0)), np.zeros((n, 0))
    times_h = list(range(1, tau))
    times_g = list(range(0, tau - 1))
    aug = np.zeros((n, steps))
    plug = np.zeros((n, steps))
    s_arm = {}
    for arm in (0, 1):
        hz = _check_prob(eta.h.matrix(arm, W, times_h), "hazard")
        gr = _check_prob(eta.g_r.matrix(arm, W, times_g), "censoring hazard")
        ga = np.asarray(eta.g_a.prob(arm, W), dtype=float)
        s_arm[arm] = survival_product(hz)[:, 1:]          # S(1..tau-1)
        g_cum = survival_product(gr)[:, 1:]               # G(1..tau-1)
        # tail[m-1] = sum_{t=m}^{tau-1} prod_{k=m+1}^{t} (1 - h(k))
        tail = np.ones((n, steps))
        for m in range(steps - 2, -1, -1):
            tail[:, m] = 1.0 + (1.0 - hz[:, m + 1]) * tail[:, m + 1]
        on_arm = a == arm
        if not on_arm.any():
            continue
        sign = 1.0 if arm == 1 else -1.0
        rows = np.flatnonzero(on_arm)
        z = -sign * tail[rows] / (ga[rows, None] * g_cum[rows])
        ms = np.arange(1, tau)
        at_risk = time[rows, None] >= ms[None, :]
        event = (delta[rows, None] == 1) & (time[rows, None] == ms[None, :])
        aug[rows] = np.where(at_risk, z * (event - hz[rows]), 0.0)
    plug[:] = s_arm[1] - s_arm[0]
    return aug, plug


def dr_terms(c: Cohort, eta, tau: int, W: np.ndarray | None = None) -> DrTerms:
    """Transformation for every subject of ``c``.  ``W`` overrides the covariates
    passed to the nuisance models (defaults to ``c.w``)."""
    _check_tau(tau)
    if tau > c.k_max and len(c):
        raise TransformError(f"tau={tau} exceeds the horizon {c.k_max}")
    W = c.w if W is None else np.atleast_2d(np.asarray(W, dtype=float))
    aug, plug = _arrays(W, c.a, c.delta, c.time, eta, tau)
    # fixed summation order so DrValue.recompose reproduces d bit for bit
    d = np.zeros(len(c))
    for m in range(aug.shape[1]):
        d = d + aug[:, m]
    for m in range(plug.shape[1]):
        d = d + plug[:, m]
    return DrTerms(ids=c.ids, d=d, augmentation=aug, plugin=plug)


def dr_transform(s: Subject, eta, tau: int) -> DrValue:
    c = Cohort.from_subjects([s], k_max=max(tau, s.t_tilde, 1))
    return dr_terms(c, eta, tau).values()[0]


def dr_transform_all(c: Cohort, eta, tau: int) -> list[DrValue]:
    try:
        return dr_terms(c, eta, tau).values()
    except TransformError as exc:
        raise TransformError(f"{exc} (cohort of {len(c)} subjects)") from exc


def telescoping_check(a, b) -> float:
    """Residual of prod(1-a) - prod(1-b) = sum_t prod_{k<t}(1-a_k)(b_t-a_t)prod_{k>t}(1-b_k)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise TransformError("sequences must have equal length")
    lhs = np.prod(1 - a) - np.prod(1 - b)
    rhs = 0.0
    for t in range(len(a)):
        rhs += np.prod(1 - a[:t]) * (b[t] - a[t]) * np.prod(1 - b[t + 1:])
    return float(abs(lhs - rhs))
