"""Synthetic data-generating processes with closed-form truth, exhaustive
small-horizon oracles and the regret-rate experiment.

Reference designs
-----------------
A : K = tau = 2, W uniform on {-1, +1}^2, no censoring.
    h0(m, a, w) = expit(-log 2 + log 2 (1 - 2a) w1), so at w1 = +1 the treated
    hazard is 0.2 and the control hazard 0.5; theta0(w) = 0.3 sign(w1) and
    V0(d0) = 0.3 P(w1 = +1) = 0.15.  g_A0(w) = expit(0.5 w2).
B : A with censoring g_R0(m, a, w) = expit(-2 + 0.5 w2).
C : K = tau = 3 on the same grid with time-varying hazards and censoring that
    depends on arm and covariates; used by the exhaustive checks.
step : K = tau = 3, W ~ U[-1, 1]^3, effect 0.6 sign(w1) on the logit scale, so
    |theta0| >= 0.43 everywhere (margin bounded away from zero).
smooth : like step with the effect linear in w1 (no margin).
null : like step with no treatment effect.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .cohort import Cohort
from .transform import blip_values, dr_terms


class SynthError(ValueError):
    pass


Hazard = Callable[[int, int, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class _Fn:
    """Wraps a closed-form hazard as a predictor with ``predict``/``matrix``."""

    fn: Hazard

    def predict(self, m, a, W):
        W = np.atleast_2d(W)
        return np.broadcast_to(np.asarray(self.fn(m, a, W), dtype=float), (W.shape[0],))

    def matrix(self, a, W, times):
        W = np.atleast_2d(W)
        if len(times) == 0:
            return np.zeros((W.shape[0], 0))
        return np.column_stack([self.predict(m, a, W) for m in times])


@dataclass(frozen=True)
class SynthDgp:
    name: str
    k_max: int
    tau: int
    p: int
    h0: Hazard
    g_a0: Callable[[np.ndarray], np.ndarray]
    g_r0: Hazard
    grid: np.ndarray | None = None
    grid_prob: np.ndarray | None = None
    box: tuple[float, float] = (-1.0, 1.0)
    margin: str = "none"
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not 1 <= self.tau <= self.k_max:
            raise SynthError("need 1 <= tau <= k_max")
        if not self.covariate_names:
            object.__setattr__(self, "covariate_names", tuple(f"w{j + 1}" for j in range(self.p)))
        if self.grid is not None:
            grid = np.atleast_2d(np.asarray(self.grid, dtype=float))
            prob = (np.full(len(grid), 1.0 / len(grid)) if self.grid_prob is None
                    else np.asarray(self.grid_prob, dtype=float))
            if grid.shape[1] != self.p or len(prob) != len(grid) or abs(prob.sum() - 1) > 1e-12:
                raise SynthError("grid and probabilities are inconsistent")
            object.__setattr__(self, "grid", grid)
            object.__setattr__(self, "grid_prob", prob)

    @property
    def is_discrete(self) -> bool:
        return self.grid is not None

    def support(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.is_discrete:
            raise SynthError(f"DGP {self.name} has a continuous covariate law")
        return self.grid, self.grid_prob

    def sample_w(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.is_discrete:
            return self.grid[rng.choice(len(self.grid), size=n, p=self.grid_prob)]
        lo, hi = self.box
        return rng.uniform(lo, hi, size=(n, self.p))

    def true_blip(self, W) -> np.ndarray:
        return blip_values(_Fn(self.h0), self.tau, np.atleast_2d(np.asarray(W, dtype=float)))


def _grid_pm1(p: int) -> np.ndarray:
    return np.array(list(product((-1.0, 1.0), repeat=p)))


LOG2 = math.log(2.0)


def dgp_a() -> SynthDgp:
    return SynthDgp(
        name="A", k_max=2, tau=2, p=2,
        h0=lambda m, a, W: expit(-LOG2 + LOG2 * (1 - 2 * a) * W[:, 0]),
        g_a0=lambda W: expit(0.5 * W[:, 1]),
        g_r0=lambda m, a, W: np.zeros(len(W)),
        grid=_grid_pm1(2), margin="bounded_away(0.3)",
    )


def dgp_b() -> SynthDgp:
    base = dgp_a()
    return SynthDgp(
        name="B", k_max=2, tau=2, p=2, h0=base.h0, g_a0=base.g_a0,
        g_r0=lambda m, a, W: expit(-2.0 + 0.5 * W[:, 1]),
        grid=_grid_pm1(2), margin="bounded_away(0.3)",
    )


def dgp_c() -> SynthDgp:
    return SynthDgp(
        name="C", k_max=3, tau=3, p=2,
        h0=lambda m, a, W: expit(-1.0 + 0.2 * m + 0.5 * W[:, 1] - 0.7 * (2 * a - 1) * W[:, 0] + 0.3 * a * W[:, 1]),
        g_a0=lambda W: expit(0.3 * W[:, 0] - 0.5 * W[:, 1]),
        g_r0=lambda m, a, W: expit(-1.8 + 0.3 * m - 0.4 * W[:, 0] + 0.3 * a),
        grid=_grid_pm1(2), margin="bounded_away(0.1)",
    )


_STEP_BASE = {1: -1.2, 2: -1.0, 3: -0.8}


def _cont_g_a(W):
    return expit(0.4 * W[:, 1] - 0.2 * W[:, 2])


def _cont_g_r(m, a, W):
    return expit(-2.2 + 0.4 * W[:, 1] + 0.2 * a)


def dgp_step() -> SynthDgp:
    return SynthDgp(
        name="step", k_max=3, tau=3, p=3,
        h0=lambda m, a, W: expit(_STEP_BASE[m] + 0.5 * W[:, 1] - 0.6 * (2 * a - 1) * np.sign(W[:, 0])),
        g_a0=_cont_g_a, g_r0=_cont_g_r, margin="bounded_away(0.4)",
    )


def dgp_smooth() -> SynthDgp:
    return SynthDgp(
        name="smooth", k_max=3, tau=3, p=3,
        h0=lambda m, a, W: expit(_STEP_BASE[m] + 0.5 * W[:, 1] - 0.8 * (2 * a - 1) * W[:, 0]),
        g_a0=_cont_g_a, g_r0=_cont_g_r, margin="none",
    )


def dgp_null() -> SynthDgp:
    return SynthDgp(
        name="null", k_max=3, tau=3, p=3,
        h0=lambda m, a, W: expit(_STEP_BASE[m] + 0.5 * W[:, 1] - 0.3 * W[:, 0]),
        g_a0=_cont_g_a, g_r0=_cont_g_r, margin="none",
    )


DGPS: dict[str, Callable[[], SynthDgp]] = {
    "A": dgp_a, "B": dgp_b, "C": dgp_c, "step": dgp_step, "smooth": dgp_smooth, "null": dgp_null,
}


def get_dgp(name: str) -> SynthDgp:
    try:
        return DGPS[name]()
    except KeyError:
        raise SynthError(f"unknown DGP {name!r}; choose from {sorted(DGPS)}") from None


# --- sampling ----------------------------------------------------------------


def simulate(dgp: SynthDgp, n: int, seed: int, id_prefix: str = "S") -> Cohort:
    """Forward sampling: W, then A, then for m = 0..K-1 censoring R_m and
    (if uncensored) the event L_{m+1}; survivors are censored at K.

    Ids are ``id_prefix`` plus a zero-padded index, so cohorts meant to be
    disjoint (training and evaluation) need different prefixes.
    """
    if n < 1:
        raise SynthError("n must be at least 1")
    rng = np.random.default_rng(seed)
    K = dgp.k_max
    W = dgp.sample_w(n, rng)
    a = (rng.random(n) < dgp.g_a0(W)).astype(np.int64)
    u_r = rng.random((n, K))
    u_l = rng.random((n, K))
    time = np.full(n, K, dtype=np.int64)
    delta = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    for m in range(K):
        gr = np.empty(n)
        hz = np.empty(n)
        for arm in (0, 1):
            sel = a == arm
            if sel.any():
                gr[sel] = dgp.g_r0(m, arm, W[sel])
                hz[sel] = dgp.h0(m + 1, arm, W[sel])
        cens = alive & (u_r[:, m] < gr)
        time[cens] = m
        alive &= ~cens
        ev = alive & (u_l[:, m] < hz)
        time[ev] = m + 1
        delta[ev] = 1
        alive &= ~ev
    width = len(str(n))
    ids = np.array([f"{id_prefix}{i + 1:0{width}d}" for i in range(n)], dtype=object)
    return Cohort(ids=ids, w=W, a=a, delta=delta, time=time, k_max=K, covariate_names=dgp.covariate_names)


# --- truth -------------------------------------------------------------------


def true_blip(dgp: SynthDgp, w) -> np.ndarray | float:
    out = dgp.true_blip(w)
    return float(out[0]) if np.ndim(w) == 1 else out


def true_value(dgp: SynthDgp, rule, n_mc: int = 100_000, seed: int = 2024, se_target: float = 1e-3,
               max_batches: int = 100) -> tuple[float, float]:
    """V0(rule) = E[rule(W) theta0(W)] and its standard error (0 when exact).

    ``rule`` maps a covariate matrix to 0/1.  Continuous laws use batches of
    ``n_mc`` draws until the standard error drops below ``se_target``.
    """
    if dgp.is_discrete:
        W, prob = dgp.support()
        return float(prob @ (np.asarray(rule(W), dtype=float) * dgp.true_blip(W))), 0.0
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(max_batches):
        W = dgp.sample_w(n_mc, rng)
        vals.append(np.asarray(rule(W), dtype=float) * dgp.true_blip(W))
        allv = np.concatenate(vals)
        se = float(allv.std(ddof=1) / math.sqrt(len(allv)))
        if se < se_target:
            break
    return float(allv.mean()), se


def optimal_rule(dgp: SynthDgp):
    return lambda W: (dgp.true_blip(W) > 0).astype(np.int64)


def margin_mass(dgp: SynthDgp, t: float, n_mc: int = 200_000, seed: int = 7) -> float:
    """P(0 < |theta0(W)| <= t): exact on grids, Monte Carlo otherwise."""
    if dgp.is_discrete:
        W, prob = dgp.support()
        th = np.abs(dgp.true_blip(W))
        return float(prob[(th > 0) & (th <= t)].sum())
    th = np.abs(dgp.true_blip(dgp.sample_w(n_mc, np.random.default_rng(seed))))
    return float(np.mean((th > 0) & (th <= t)))


# --- exhaustive oracles ------------------------------------------------------

MAX_EXHAUSTIVE_K = 3


def outcome_paths(k_max: int) -> list[tuple[int, int]]:
    """Every observable (delta, time): censored at 0..K-1, event at 1..K, survivor at K."""
    paths = [(0, m) for m in range(k_max)] + [(1, m) for m in range(1, k_max + 1)] + [(0, k_max)]
    return paths


def path_probabilities(dgp: SynthDgp, a: int, w) -> np.ndarray:
    """P0(path | A=a, W=w) in the order of :func:`outcome_paths`."""
    W = np.atleast_2d(np.asarray(w, dtype=float))
    K = dgp.k_max
    cens = [float(dgp.g_r0(m, a, W)[0]) for m in range(K)]
    haz = [float(dgp.h0(m + 1, a, W)[0]) for m in range(K)]
    surv = 1.0  # P(reach m uncensored and event-free)
    pc, pe = [], []
    for m in range(K):
        pc.append(surv * cens[m])
        pe.append(surv * (1 - cens[m]) * haz[m])
        surv *= (1 - cens[m]) * (1 - haz[m])
    return np.array(pc + pe + [surv])


def _path_cohort(dgp: SynthDgp, w) -> tuple[Cohort, np.ndarray]:
    w = np.asarray(w, dtype=float).ravel()
    paths = outcome_paths(dgp.k_max)
    rows, probs = [], []
    for a in (0, 1):
        pa = float(dgp.g_a0(w[None, :])[0])
        pa = pa if a == 1 else 1.0 - pa
        pp = path_probabilities(dgp, a, w)
        for (delta, t), p in zip(paths, pp):
            rows.append((a, delta, t))
            probs.append(pa * p)
    arr = np.array(rows, dtype=np.int64)
    c = Cohort(ids=np.arange(len(rows)), w=np.tile(w, (len(rows), 1)), a=arr[:, 0], delta=arr[:, 1],
               time=arr[:, 2], k_max=dgp.k_max, covariate_names=dgp.covariate_names)
    return c, np.array(probs)


def exhaustive_conditional_mean_D(dgp: SynthDgp, eta, w) -> float:
    """E[D_eta | W = w] by summing over both arms and every outcome path."""
    if dgp.k_max > MAX_EXHAUSTIVE_K:
        raise SynthError(f"exhaustive enumeration supports K <= {MAX_EXHAUSTIVE_K}, got {dgp.k_max}")
    c, prob = _path_cohort(dgp, w)
    return float(prob @ dr_terms(c, eta, dgp.tau).d)


def exhaustive_signed_masses(dgp: SynthDgp, eta, w) -> tuple[float, float]:
    """(E[|D| 1{D > 0} | w], E[|D| 1{D <= 0} | w])."""
    if dgp.k_max > MAX_EXHAUSTIVE_K:
        raise SynthError(f"exhaustive enumeration supports K <= {MAX_EXHAUSTIVE_K}, got {dgp.k_max}")
    c, prob = _path_cohort(dgp, w)
    d = dr_terms(c, eta, dgp.tau).d
    return float(prob @ np.where(d > 0, d, 0.0)), float(prob @ np.where(d > 0, 0.0, -d))


def population_surrogate_rule(dgp: SynthDgp, eta, phi: str) -> np.ndarray:
    """Rule on the covariate grid induced by the pointwise minimiser of the
    population surrogate risk ``P+ phi(f) + P- phi(-f)``."""
    W, _ = dgp.support()
    out = np.zeros(len(W), dtype=np.int64)
    for i, w in enumerate(W):
        pos, neg = exhaustive_signed_masses(dgp, eta, w)
        if phi == "hinge":
            # convex and piecewise linear with kinks at -1 and +1
            cand = np.array([-1.0, 1.0])
            risk = pos * np.maximum(1 - cand, 0) + neg * np.maximum(1 + cand, 0)
            f = cand[np.argmin(risk)] if risk[0] != risk[1] else 0.0
        elif phi == "log":
            f = math.log(pos / neg) if pos > 0 and neg > 0 else (math.inf if pos > 0 else -math.inf)
        else:
            raise SynthError(f"unknown surrogate {phi!r}")
        out[i] = int(f > 0)
    return out


def population_zeroone_risk(dgp: SynthDgp, eta, rule_on_grid: np.ndarray) -> float:
    W, prob = dgp.support()
    total = 0.0
    for w, p, d in zip(W, prob, rule_on_grid):
        pos, neg = exhaustive_signed_masses(dgp, eta, w)
        total += p * (pos if d == 0 else neg)
    return total


# --- regret-rate experiment --------------------------------------------------


class RateExperimentError(RuntimeError):
    pass


@dataclass
class RateExperimentReport:
    dgp: str
    n_grid: list[int]
    replications: int
    seed: int
    regrets: dict[str, list[list[float]]]   # rule -> per n -> per replication
    config: dict = field(default_factory=dict)

    def mean_regret(self, rule: str) -> list[float]:
        return [float(np.mean(r)) for r in self.regrets[rule]]

    def se_regret(self, rule: str) -> list[float]:
        return [float(np.std(r, ddof=1) / math.sqrt(len(r))) if len(r) > 1 else 0.0 for r in self.regrets[rule]]

    def slope(self, rule: str) -> float:
        """Least-squares slope of log mean regret on log(log n / n)."""
        means = np.array(self.mean_regret(rule))
        n = np.array(self.n_grid, dtype=float)
        ok = means > 0
        if ok.sum() < 2:
            return float("nan")
        x = np.log(np.log(n[ok]) / n[ok])
        return float(np.polyfit(x, np.log(means[ok]), 1)[0])

    def to_dict(self) -> dict:
        return {
            "dgp": self.dgp,
            "n_grid": list(self.n_grid),
            "replications": self.replications,
            "seed": self.seed,
            "rules": {
                r: {
                    "mean_regret": self.mean_regret(r),
                    "se_regret": self.se_regret(r),
                    "slope": self.slope(r),
                    "regrets": self.regrets[r],
                }
                for r in sorted(self.regrets)
            },
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        rules = sorted(self.regrets)
        lines = ["n".rjust(6) + "".join(r.rjust(16) for r in rules)]
        for i, n in enumerate(self.n_grid):
            lines.append(str(n).rjust(6) + "".join(f"{self.mean_regret(r)[i]:16.5f}" for r in rules))
        lines.append("slope".rjust(6) + "".join(f"{self.slope(r):16.3f}" for r in rules))
        return "\n".join(lines)


def monotone_decreasing(means: Sequence[float], ses: Sequence[float], max_inversions: int = 1,
                        k_se: float = 2.0) -> bool:
    """Strictly decreasing except for at most ``max_inversions`` increases, each
    smaller than ``k_se`` combined standard errors."""
    inversions = 0
    for i in range(len(means) - 1):
        if means[i + 1] >= means[i]:
            inversions += 1
            if means[i + 1] - means[i] > k_se * math.hypot(ses[i], ses[i + 1]):
                return False
    return inversions <= max_inversions


def replication_seed(seed: int, n: int, rep: int) -> int:
    return int(np.random.SeedSequence([seed, n, rep]).generate_state(1)[0])


def _one_replication(args) -> tuple[int, int, dict[str, float]]:
    from .pipeline import PipelineConfig, fit_pipeline
    from .rules import regret

    dgp_name, n, rep, seed, cfg_dict, oracle, n_mc = args
    dgp = get_dgp(dgp_name)
    s = replication_seed(seed, n, rep)
    try:
        c = simulate(dgp, n, s)
        cfg = PipelineConfig.from_dict({**cfg_dict, "seed": s % (2**31)})
        res = fit_pipeline(c, cfg, oracle_dgp=dgp if oracle else None)
        out = {name: regret(f, dgp, n_mc=n_mc).regret for name, f in sorted(res.rules.items())}
    except Exception as exc:
        raise RateExperimentError(f"n={n} replication={rep}: {exc}") from exc
    return n, rep, out


def run_rate_experiment(
    dgp: SynthDgp | str,
    n_grid: Sequence[int],
    replications: int,
    pipeline_config: Mapping,
    seed: int = 0,
    oracle_nuisance: bool = False,
    workers: int = 1,
    n_mc: int = 100_000,
) -> RateExperimentReport:
    """Simulate, fit and score regret for each n and replication.

    ``dgp`` must be a registered design so worker processes can rebuild it.
    Results are merged in (n, replication) order regardless of scheduling.
    """
    name = dgp if isinstance(dgp, str) else dgp.name
    get_dgp(name)
    n_grid = [int(n) for n in n_grid]
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise SynthError("n_grid must be strictly increasing")
    if replications < 10:
        raise SynthError("at least 10 replications are required")
    jobs = [(name, n, r, seed, dict(pipeline_config), oracle_nuisance, n_mc)
            for n in n_grid for r in range(replications)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one_replication, jobs))
    else:
        results = [_one_replication(j) for j in jobs]
    regrets: dict[str, list[list[float]]] = {}
    pos = {n: i for i, n in enumerate(n_grid)}
    for n, rep, out in sorted(results, key=lambda t: (t[0], t[1])):
        for rule, val in out.items():
            regrets.setdefault(rule, [[] for _ in n_grid])[pos[n]].append(val)
    return RateExperimentReport(
        dgp=name, n_grid=n_grid, replications=replications, seed=seed, regrets=regrets,
        config={"pipeline": dict(pipeline_config), "oracle_nuisance": oracle_nuisance, "n_mc": n_mc},
    )


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1))
