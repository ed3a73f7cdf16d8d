"""Ensemble weights over a candidate library.

Three problems share one cross-validated prediction matrix ``F`` (n x J) and
the transformation values ``D``:

* quadratic: minimise mean (D - F a)^2 over the simplex;
* weighted 0-1: minimise mean |D| 1[1{D > 0} != 1{F a > 0}] over a >= 0,
  searched on a simplex grid plus multi-start coordinate search (the risk only
  depends on the direction of ``a``, so the scale is fixed by sum(a) = 1);
* surrogate: mean |D| phi(F a (2 1{D > 0} - 1)) over the simplex, phi hinge or log.

Every solver compares its answer against the J vertices with the same risk
function, so the ensemble never does worse than the best single candidate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cvfold import (
    quadratic_risk,
    surrogate_risk,
    zeroone_risk,
    zeroone_risk_batch,
)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum x = 1} by sort and threshold."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("expected a non-empty vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / k > 0)[-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


@dataclass(frozen=True)
class SimplexResult:
    alpha: np.ndarray
    risk: float
    iterations: int
    converged: bool


def minimize_on_simplex(
    f: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    J: int,
    x0: np.ndarray | None = None,
    tol: float = 1e-9,
    max_iter: int = 10_000,
) -> SimplexResult:
    """Projected gradient with Armijo backtracking for a smooth convex objective.

    Stops when the projected-gradient norm ``||x - P(x - grad f(x))||`` drops
    below ``tol``.  The returned point is never worse than the best vertex.
    """
    x = np.full(J, 1.0 / J) if x0 is None else project_simplex(x0)
    fx = f(x)
    step = 1.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = grad(x)
        if np.linalg.norm(x - project_simplex(x - g)) < tol:
            converged = True
            break
        step *= 2.0
        while True:
            xn = project_simplex(x - step * g)
            diff = xn - x
            fn = f(xn)
            if fn <= fx + g @ diff + (diff @ diff) / (2.0 * step) or step < 1e-20:
                break
            step *= 0.5
        if np.array_equal(xn, x):
            converged = True
            break
        x, fx = xn, fn
    x, fx = _vertex_guard(f, x, fx, J)
    return SimplexResult(alpha=x, risk=float(fx), iterations=it, converged=converged)


def _vertex_guard(f, x, fx, J):
    for j in range(J):
        e = np.zeros(J)
        e[j] = 1.0
        fe = f(e)
        if fe < fx:
            x, fx = e, fe
    return x, fx


@dataclass(frozen=True)
class EnsembleWeights:
    alpha: np.ndarray
    loss: str
    normalization: str
    achieved_risk: float
    names: tuple[str, ...] = ()
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "loss": self.loss,
            "normalization": self.normalization,
            "alpha": [float(a) for a in self.alpha],
            "candidates": list(self.names),
            "achieved_risk": float(self.achieved_risk),
            "diagnostics": self.diagnostics,
        }


def _names(m) -> tuple[str, ...]:
    return tuple(getattr(m, "names", ()) or ())


def solve_quadratic_weights(m, tol: float = 1e-9, max_iter: int = 10_000) -> EnsembleWeights:
    F = np.asarray(m.z_matrix, dtype=float)
    y = np.asarray(m.targets, dtype=float)
    n, J = F.shape
    Q = F.T @ F / n
    b = F.T @ y / n
    c = float(y @ y) / n

    def fq(al):
        return float(al @ Q @ al - 2.0 * b @ al + c)

    def gq(al):
        return 2.0 * (Q @ al - b)

    res = minimize_on_simplex(fq, gq, J, tol=tol, max_iter=max_iter)
    alpha, risk = _vertex_guard(lambda al: quadratic_risk(F, y, al), res.alpha, quadratic_risk(F, y, res.alpha), J)
    return EnsembleWeights(
        alpha=alpha,
        loss="quadratic",
        normalization="simplex",
        achieved_risk=risk,
        names=_names(m),
        diagnostics={"iterations": res.iterations, "converged": res.converged},
    )


def simplex_grid(J: int, resolution: int) -> np.ndarray:
    """All points of the simplex with coordinates in multiples of 1/resolution,
    as rows in ascending lexicographic order."""
    if J == 1:
        return np.ones((1, 1))
    rows = []

    def rec(prefix, remaining, depth):
        if depth == J - 1:
            rows.append(prefix + [remaining])
            return
        for k in range(remaining + 1):
            rec(prefix + [k], remaining - k, depth + 1)

    if J <= 3:
        # vectorised for the common small cases
        if J == 2:
            k = np.arange(resolution + 1)
            pts = np.column_stack([k, resolution - k])
        else:
            i, j = np.meshgrid(np.arange(resolution + 1), np.arange(resolution + 1), indexing="ij")
            keep = i + j <= resolution
            i, j = i[keep], j[keep]
            pts = np.column_stack([i, j, resolution - i - j])
        return pts / resolution
    rec([], resolution, 0)
    return np.array(rows, dtype=float) / resolution


def _coordinate_search(F, D, X, resolution, max_passes=50):
    """Batch cyclic coordinate search; columns of ``X`` are starting points."""
    J, R = X.shape
    risk = zeroone_risk_batch(F, D, X)
    step = 0.5
    floor = 1.0 / resolution
    passes = 0
    while step >= floor:
        for _ in range(max_passes):
            improved = False
            for j in range(J):
                for sgn in (1.0, -1.0):
                    Y = X.copy()
                    Y[j] = np.maximum(Y[j] + sgn * step, 0.0)
                    tot = Y.sum(axis=0)
                    ok = tot > 0
                    Y[:, ok] /= tot[ok]
                    r = zeroone_risk_batch(F, D, Y)
                    better = ok & (r < risk)
                    if better.any():
                        X[:, better] = Y[:, better]
                        risk[better] = r[better]
                        improved = True
            passes += 1
            if not improved:
                break
        step *= 0.5
    return X, risk, passes


def solve_zeroone_weights(
    m,
    restarts: int = 1000,
    grid_resolution: int = 20,
    seed: int = 0,
    full_grid: bool | None = None,
    chunk: int = 4096,
) -> EnsembleWeights:
    """Weighted 0-1 ensemble weights.

    Candidates, in tie-break order: the full simplex grid at
    ``grid_resolution`` (lexicographic; used when ``full_grid`` or, by default,
    J <= 3) or else the J vertices, then ``restarts`` Dirichlet(1) starts
    refined by coordinate search down to step ``1/grid_resolution``.
    """
    F = np.asarray(m.z_matrix, dtype=float)
    D = np.asarray(m.targets, dtype=float)
    n, J = F.shape
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    if full_grid is None:
        full_grid = J <= 3
    base = simplex_grid(J, grid_resolution) if full_grid else np.eye(J)
    base_risk = np.concatenate([zeroone_risk_batch(F, D, base[i:i + chunk].T) for i in range(0, len(base), chunk)])
    rng = np.random.default_rng(seed)
    starts = rng.dirichlet(np.ones(J), size=restarts).T if J > 1 else np.ones((1, restarts))
    refined, refined_risk, passes = _coordinate_search(F, D, starts, grid_resolution)
    points = np.vstack([base, refined.T])
    risks = np.concatenate([base_risk, refined_risk])
    best = int(np.argmin(risks))
    alpha = points[best] / points[best].sum()
    risk = zeroone_risk(F, D, alpha)
    alpha, risk = _vertex_guard(lambda al: zeroone_risk(F, D, al), alpha, risk, J)
    order = np.sort(np.unique(risks))
    gap = float(order[1] - order[0]) if len(order) > 1 else 0.0
    return EnsembleWeights(
        alpha=alpha,
        loss="zeroone",
        normalization="cone_normalized",
        achieved_risk=risk,
        names=_names(m),
        diagnostics={
            "restarts": restarts,
            "grid_resolution": grid_resolution,
            "full_grid": bool(full_grid),
            "grid_points": int(len(base)),
            "search_passes": passes,
            "best_second_gap": gap,
            "seed": seed,
        },
    )


def _surrogate_subgradient(F, D, al, phi):
    y = np.where(D > 0, 1.0, -1.0)
    margin = (F @ al) * y
    if phi == "hinge":
        dphi = np.where(margin < 1.0, -1.0, 0.0)
    else:
        dphi = -0.5 * (1.0 - np.tanh(0.5 * margin))  # -1 / (1 + e^margin)
    return F.T @ (np.abs(D) * dphi * y) / len(D)


def solve_surrogate_weights(m, phi: str = "hinge", iterations: int = 5000, step_scale: float | None = None) -> EnsembleWeights:
    """Surrogate-loss weights on the simplex by projected subgradient.

    Steps are ``c / sqrt(t)`` with ``c = sqrt(2) / ||g_1||`` by default (the
    simplex diameter over the first subgradient norm); the best iterate is
    kept.  The smooth log loss is then polished with Armijo projected gradient.
    """
    if phi not in ("hinge", "log"):
        raise ValueError(f"phi must be 'hinge' or 'log', got {phi!r}")
    F = np.asarray(m.z_matrix, dtype=float)
    D = np.asarray(m.targets, dtype=float)
    n, J = F.shape

    def f(al):
        return surrogate_risk(F, D, al, phi)

    x = np.full(J, 1.0 / J)
    best_x, best_f = x, f(x)
    g = _surrogate_subgradient(F, D, x, phi)
    gnorm = float(np.linalg.norm(g))
    c = step_scale if step_scale is not None else (np.sqrt(2.0) / gnorm if gnorm > 0 else 0.0)
    for t in range(1, iterations + 1):
        if c == 0.0:
            break
        x = project_simplex(x - (c / np.sqrt(t)) * g)
        fx = f(x)
        if fx < best_f:
            best_x, best_f = x, fx
        g = _surrogate_subgradient(F, D, x, phi)
    polished = False
    if phi == "log":
        res = minimize_on_simplex(f, lambda al: _surrogate_subgradient(F, D, al, phi), J, x0=best_x)
        if res.risk < best_f:
            best_x, best_f = res.alpha, res.risk
            polished = True
    alpha = best_x / best_x.sum()
    risk = f(alpha)
    alpha, risk = _vertex_guard(f, alpha, risk, J)
    return EnsembleWeights(
        alpha=alpha,
        loss=phi,
        normalization="simplex",
        achieved_risk=risk,
        names=_names(m),
        diagnostics={"iterations": iterations, "step_scale": float(c), "polished": polished},
    )


def solve_weights(m, loss: str, **kwargs) -> EnsembleWeights:
    if loss == "quadratic":
        return solve_quadratic_weights(m)
    if loss == "zeroone":
        return solve_zeroone_weights(m, **kwargs)
    if loss in ("hinge", "log"):
        return solve_surrogate_weights(m, phi=loss)
    raise ValueError(f"unknown ensemble loss {loss!r}")
