import json

import numpy as np
import pytest
from scipy import stats

from survrule import synth
from survrule.nuisance import make_corrupted_nuisance, make_oracle_nuisance
from survrule.synth import SynthDgp, SynthError
from survrule.transform import dr_terms

LIGHT = {
    "tau": 3, "folds": 2, "inner_folds": 2, "zeroone_restarts": 20,
    "nuisance": [{"name": "intercept", "family": "intercept_only"}],
    "candidates": [{"name": "lin", "kind": "d_reg", "learner": "linear"}],
}


def const_dgp(h, g_r, k=3):
    return SynthDgp(name="const", k_max=k, tau=k, p=1,
                    h0=lambda m, a, W: np.full(len(W), h), g_a0=lambda W: np.full(len(W), 0.5),
                    g_r0=lambda m, a, W: np.full(len(W), g_r), grid=np.array([[0.0]]))


def test_high_hazard_events_at_one():
    c = synth.simulate(const_dgp(0.99, 0.0), 10_000, 1)
    rate = np.mean((c.delta == 1) & (c.time == 1))
    assert abs(rate - 0.99) <= 3 * np.sqrt(0.99 * 0.01 / 10_000)


def test_zero_hazard_everyone_administratively_censored():
    c = synth.simulate(const_dgp(0.0, 0.0), 500, 2)
    assert np.all(c.delta == 0) and np.all(c.time == 3)


def test_censoring_time_law():
    # with h = 0 the censoring time is geometric on 0..K-1, truncated at K
    g = 0.3
    c = synth.simulate(const_dgp(0.0, g), 20_000, 3)
    expected = np.array([g * (1 - g) ** m for m in range(3)] + [(1 - g) ** 3])
    observed = np.bincount(c.time, minlength=4)
    assert stats.chisquare(observed, 20_000 * expected).pvalue > 1e-3


def test_seed_reproducibility(dgp_b):
    c1, c2 = synth.simulate(dgp_b, 300, 5), synth.simulate(dgp_b, 300, 5)
    assert np.array_equal(c1.time, c2.time) and np.array_equal(c1.w, c2.w) and list(c1.ids) == list(c2.ids)
    assert not np.array_equal(synth.simulate(dgp_b, 300, 6).time, c1.time)


def test_invalid_n():
    with pytest.raises(SynthError):
        synth.simulate(synth.dgp_a(), 0, 1)


def test_reference_truth(dgp_a):
    W, prob = dgp_a.support()
    assert np.allclose(dgp_a.true_blip(W), 0.3 * np.sign(W[:, 0]), atol=1e-15)
    v, se = synth.true_value(dgp_a, synth.optimal_rule(dgp_a))
    assert v == pytest.approx(0.15, abs=1e-15) and se == 0.0
    assert synth.margin_mass(dgp_a, 0.29) == 0.0 and synth.margin_mass(dgp_a, 0.3 + 1e-12) == 1.0


def test_null_dgp_value_zero():
    dgp = synth.dgp_null()
    v, se = synth.true_value(dgp, lambda W: np.ones(len(W), dtype=int))
    assert v == 0.0 and se == 0.0


def test_step_margin_bounded_away():
    dgp = synth.dgp_step()
    W = dgp.sample_w(5000, np.random.default_rng(0))
    assert np.abs(dgp.true_blip(W)).min() >= 0.43
    assert synth.margin_mass(dgp, 0.43) == 0.0


@pytest.mark.parametrize("name", ["A", "C"])
def test_optimal_rule_dominates(name):
    dgp = synth.get_dgp(name)
    W, _ = dgp.support()
    v0, _ = synth.true_value(dgp, synth.optimal_rule(dgp))
    rng = np.random.default_rng(4)
    for _ in range(100):
        table = rng.integers(0, 2, size=len(W))
        v, _ = synth.true_value(dgp, lambda X, t=table: t[[int(np.flatnonzero((W == x).all(1))[0]) for x in X]])
        assert v <= v0 + 1e-15


def test_path_probabilities_sum_to_one(dgp_c):
    for w in dgp_c.support()[0]:
        for a in (0, 1):
            p = synth.path_probabilities(dgp_c, a, w)
            assert p.min() >= 0 and p.sum() == pytest.approx(1.0, abs=1e-14)
    assert len(synth.outcome_paths(3)) == 2 * 3 + 1


@pytest.mark.parametrize("name", ["A", "B", "C"])
@pytest.mark.parametrize("which", ["oracle", "h", "g"])
def test_exhaustive_double_robustness(name, which):
    dgp = synth.get_dgp(name)
    eta = make_oracle_nuisance(dgp) if which == "oracle" else make_corrupted_nuisance(dgp, which)
    for w, theta in zip(dgp.support()[0], dgp.true_blip(dgp.support()[0])):
        assert synth.exhaustive_conditional_mean_D(dgp, eta, w) == pytest.approx(theta, abs=1e-10)


def test_exhaustive_both_corrupted_is_biased(dgp_c):
    eta = make_corrupted_nuisance(dgp_c, "both")
    W = dgp_c.support()[0]
    gaps = [abs(synth.exhaustive_conditional_mean_D(dgp_c, eta, w) - t) for w, t in zip(W, dgp_c.true_blip(W))]
    assert max(gaps) > 0.01


def test_exhaustive_horizon_limit():
    dgp = const_dgp(0.2, 0.1, k=4)
    with pytest.raises(SynthError):
        synth.exhaustive_conditional_mean_D(dgp, make_oracle_nuisance(dgp), [0.0])


def test_signed_masses_recompose(dgp_c):
    eta = make_oracle_nuisance(dgp_c)
    for w in dgp_c.support()[0]:
        pos, neg = synth.exhaustive_signed_masses(dgp_c, eta, w)
        assert pos - neg == pytest.approx(synth.exhaustive_conditional_mean_D(dgp_c, eta, w), abs=1e-14)


@pytest.mark.parametrize("means,ses,ok", [
    ([0.5, 0.3, 0.2, 0.1], [0.01] * 4, True),
    ([0.5, 0.3, 0.31, 0.1], [0.01] * 4, True),
    ([0.5, 0.3, 0.4, 0.1], [0.01] * 4, False),
    ([0.5, 0.51, 0.52, 0.1], [0.05] * 4, False),
])
def test_monotone_helper(means, ses, ok):
    assert synth.monotone_decreasing(means, ses) is ok


def test_replication_seed_distinct():
    seeds = {synth.replication_seed(0, n, r) for n in (100, 200) for r in range(50)}
    assert len(seeds) == 100


def test_rate_requires_replications():
    with pytest.raises(SynthError):
        synth.run_rate_experiment("null", [100], 9, LIGHT)
    with pytest.raises(SynthError):
        synth.run_rate_experiment("null", [200, 100], 10, LIGHT)


def test_rate_null_dgp_has_zero_regret():
    rep = synth.run_rate_experiment("null", [80], 10, LIGHT, seed=1, oracle_nuisance=True, n_mc=2000)
    for rule in rep.regrets:
        assert rep.regrets[rule] == [[0.0] * 10]
    back = json.loads(rep.to_json())
    assert back["rules"]["SL-quadratic"]["mean_regret"] == [0.0]
    assert rep.to_json() == synth.run_rate_experiment(
        "null", [80], 10, LIGHT, seed=1, oracle_nuisance=True, n_mc=2000).to_json()


def test_report_slope_on_exact_rate():
    n = [250, 500, 1000, 2000]
    regrets = {"r": [[3.0 * np.log(k) / k] * 10 for k in n]}
    rep = synth.RateExperimentReport(dgp="x", n_grid=n, replications=10, seed=0, regrets=regrets)
    assert rep.slope("r") == pytest.approx(1.0, abs=1e-12)
    assert "slope" in rep.table()


def test_simulator_matches_path_law_across_seeds():
    # stratum z-scores of D under a corrupted h should be centred standard normals
    dgp = synth.dgp_b()
    eta = make_corrupted_nuisance(dgp, "h")
    W, theta = dgp.support()[0], dgp.true_blip(dgp.support()[0])
    z = []
    for seed in range(60):
        c = synth.simulate(dgp, 4000, 50_000 + seed)
        d = dr_terms(c, eta, 2).d
        for w, t in zip(W, theta):
            s = np.all(c.w == w, axis=1)
            z.append((d[s].mean() - t) / (d[s].std(ddof=1) / np.sqrt(s.sum())))
    z = np.array(z)
    assert abs(z.mean()) < 3 / np.sqrt(len(z))
    assert 0.8 < z.std() < 1.25
