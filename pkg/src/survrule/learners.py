"""Self-contained fitting primitives shared by the nuisance and rule learners.

Every fitted predictor is a small score object that can be serialised to a
plain dict and rebuilt bit-identically (floats round-trip through ``repr``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, deviance: float):
        self.deviance = deviance
        super().__init__(f"{message} (last deviance {deviance:.10g})")


def _objective(X, y, w, beta, ridge, offset):
    eta = X @ beta + offset
    # log(1 + e^eta) - y * eta, computed stably
    nll = np.logaddexp(0.0, eta) - y * eta
    return 2.0 * float(np.sum(w * nll)), 0.5 * ridge * float(beta @ beta)


def fit_logistic(
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None = None,
    ridge: float = 1e-6,
    max_iter: int = 100,
    tol: float = 1e-8,
    offset: np.ndarray | None = None,
) -> np.ndarray:
    """Ridge-penalised (weighted) logistic regression by IRLS with step halving.

    Convergence uses the relative deviance change
    ``|dev - dev_old| / (|dev| + 0.1) < tol``.  Raises :class:`ConvergenceError`
    after ``max_iter`` iterations.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    beta = np.zeros(k)
    if k == 0:
        return beta
    dev, pen = _objective(X, y, w, beta, ridge, off)
    obj = dev + 2.0 * pen
    eye = np.eye(k)
    for _ in range(max_iter):
        p = expit(X @ beta + off)
        score = X.T @ (w * (y - p)) - ridge * beta
        hess = X.T @ (X * (w * p * (1.0 - p))[:, None]) + ridge * eye
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, score, rcond=None)[0]
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            cdev, cpen = _objective(X, y, w, cand, ridge, off)
            cobj = cdev + 2.0 * cpen
            if cobj <= obj + 1e-12 * abs(obj):
                break
            t *= 0.5
        else:
            cand, cdev, cobj = beta, dev, obj
        converged = abs(cobj - obj) / (abs(cobj) + 0.1) < tol
        beta, dev, obj = cand, cdev, cobj
        if converged:
            return beta
    raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations", dev)


def fit_least_squares(X: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Weighted least squares; minimum-norm solution when rank deficient."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if weights is not None:
        sw = np.sqrt(np.asarray(weights, dtype=float))
        X, y = X * sw[:, None], y * sw
    return np.linalg.lstsq(X, y, rcond=None)[0]


# --- score objects ---------------------------------------------------------


@dataclass(frozen=True)
class ConstantScore:
    value: float

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return np.full(np.asarray(X).shape[0], self.value, dtype=float)

    def to_dict(self) -> dict:
        return {"type": "constant", "value": float(self.value)}


@dataclass(frozen=True)
class LinearScore:
    intercept: float
    coef: tuple[float, ...]

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return self.intercept + X @ np.asarray(self.coef, dtype=float)

    def to_dict(self) -> dict:
        return {"type": "linear", "intercept": float(self.intercept), "coef": [float(c) for c in self.coef]}


@dataclass(frozen=True)
class Stump:
    feature: int
    threshold: float
    left: float
    right: float


@dataclass(frozen=True)
class StumpScore:
    """Additive score ``init + sum_k stump_k(x)``; ``x[feature] <= threshold`` goes left."""

    init: float
    stumps: tuple[Stump, ...] = field(default=())

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.full(X.shape[0], self.init, dtype=float)
        for s in self.stumps:
            out += np.where(X[:, s.feature] <= s.threshold, s.left, s.right)
        return out

    def to_dict(self) -> dict:
        return {
            "type": "stumps",
            "init": float(self.init),
            "stumps": [[s.feature, float(s.threshold), float(s.left), float(s.right)] for s in self.stumps],
        }


def score_from_dict(d: dict):
    kind = d["type"]
    if kind == "constant":
        return ConstantScore(float(d["value"]))
    if kind == "linear":
        return LinearScore(float(d["intercept"]), tuple(float(c) for c in d["coef"]))
    if kind == "stumps":
        return StumpScore(
            float(d["init"]),
            tuple(Stump(int(f), float(t), float(lv), float(rv)) for f, t, lv, rv in d["stumps"]),
        )
    raise ValueError(f"unknown score type {kind!r}")


def boost_stumps(
    X: np.ndarray,
    y: np.ndarray,
    loss: str = "logistic",
    rounds: int = 100,
    learning_rate: float = 0.1,
    reg_lambda: float = 1.0,
    weights: np.ndarray | None = None,
    init: np.ndarray | float | None = None,
) -> tuple[float, tuple[Stump, ...]]:
    """Gradient boosting of depth-1 trees with Newton leaf values.

    ``loss="logistic"`` works on the logit scale with Bernoulli deviance,
    ``loss="squared"`` is L2 boosting.  ``init`` may be a per-row offset (it is
    not stored in the returned stumps) or a scalar; when None the optimal
    constant is used and returned as the first element.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if loss not in ("logistic", "squared"):
        raise ValueError(f"unknown loss {loss!r}")
    if init is None:
        wsum = w.sum()
        mean = float(np.sum(w * y) / wsum) if wsum > 0 else 0.5
        if loss == "logistic":
            mean = min(max(mean, 1e-6), 1 - 1e-6)
            base = float(np.log(mean / (1 - mean)))
        else:
            base = mean
        F = np.full(n, base)
    elif np.ndim(init) == 0:
        base = float(init)
        F = np.full(n, base)
    else:
        base = 0.0
        F = np.asarray(init, dtype=float).copy()

    orders = [np.argsort(X[:, j], kind="stable") for j in range(p)]
    sorted_x = [X[o, j] for j, o in enumerate(orders)]
    split_pos = [np.flatnonzero(xs[:-1] < xs[1:]) for xs in sorted_x]

    stumps = []
    for _ in range(rounds):
        if loss == "logistic":
            prob = expit(F)
            g = w * (y - prob)
            h = w * prob * (1.0 - prob)
        else:
            g = w * (y - F)
            h = w
        g_tot, h_tot = g.sum(), h.sum()
        best = (-np.inf, -1, 0.0, 0.0, 0.0)
        for j in range(p):
            pos = split_pos[j]
            if len(pos) == 0:
                continue
            cg = np.cumsum(g[orders[j]])[pos]
            ch = np.cumsum(h[orders[j]])[pos]
            gain = cg**2 / (ch + reg_lambda) + (g_tot - cg) ** 2 / (h_tot - ch + reg_lambda)
            k = int(np.argmax(gain))
            if gain[k] > best[0]:
                xs = sorted_x[j]
                thr = 0.5 * (xs[pos[k]] + xs[pos[k] + 1])
                best = (gain[k], j, thr, cg[k], ch[k])
        _, j, thr, gl, hl = best
        if j < 0:
            value = learning_rate * g_tot / (h_tot + reg_lambda)
            stump = Stump(0, np.inf, value, value)
        else:
            stump = Stump(
                j,
                float(thr),
                learning_rate * gl / (hl + reg_lambda),
                learning_rate * (g_tot - gl) / (h_tot - hl + reg_lambda),
            )
        stumps.append(stump)
        if j < 0:
            F += stump.left
        else:
            F += np.where(X[:, j] <= stump.threshold, stump.left, stump.right)
    return base, tuple(stumps)


def t_statistics(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pooled-variance two-sample t statistic of each column, y == 1 versus y == 0.

    A constant column (or an empty class) gets 0; a column that separates the
    classes with zero within-class variance gets +-inf.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(bool)
    n1, n0 = int(y.sum()), int((~y).sum())
    out = np.zeros(X.shape[1])
    if n1 == 0 or n0 == 0 or n1 + n0 < 3:
        return out
    x1, x0 = X[y], X[~y]
    m1, m0 = x1.mean(axis=0), x0.mean(axis=0)
    ss = ((x1 - m1) ** 2).sum(axis=0) + ((x0 - m0) ** 2).sum(axis=0)
    sp2 = ss / (n1 + n0 - 2)
    se = np.sqrt(sp2 * (1.0 / n1 + 1.0 / n0))
    diff = m1 - m0
    ok = se > 0
    out[ok] = diff[ok] / se[ok]
    split = ~ok & (diff != 0)
    out[split] = np.sign(diff[split]) * np.inf
    return out


def top_k_by_abs(stats: np.ndarray, keep: int) -> np.ndarray:
    """Indices of the ``keep`` largest |stat|, ties to the lower index, returned sorted."""
    order = np.lexsort((np.arange(len(stats)), -np.abs(stats)))
    return np.sort(order[:keep])
