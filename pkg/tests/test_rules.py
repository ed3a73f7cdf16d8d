import json

import numpy as np
import pytest
from scipy import optimize

from survrule import synth
from survrule.cohort import Cohort
from survrule.learners import ConstantScore, LinearScore, fit_logistic
from survrule.nuisance import FunctionHazard, LearnerSpec, fit_nuisance_single, make_oracle_nuisance
from survrule.rules import (
    CandidateSpec,
    DecisionFunction,
    RuleError,
    assemble_rule,
    constant_rule,
    estimate_value,
    fit_b_reg,
    fit_d_class,
    fit_d_reg,
    regret,
)
from survrule.transform import blip_values, dr_terms

LINEAR_B = CandidateSpec("b", "b_reg", "linear")
INTERCEPT_B = CandidateSpec("b0", "b_reg", "intercept_only")
LINEAR_D = CandidateSpec("d", "d_reg", "linear")
LOGIT = CandidateSpec("c", "d_class", "logistic")
GLM = LearnerSpec("glm", "logistic_main_effects")


def z_cohort(z, prefix="s"):
    z = np.asarray(z, dtype=float).reshape(len(z), -1)
    n = len(z)
    return Cohort(ids=[f"{prefix}{i}" for i in range(n)], w=z, a=np.arange(n) % 2, delta=np.zeros(n),
                  time=np.full(n, 2), k_max=2)


def test_zero_contrast_b_reg():
    c = z_cohort(np.linspace(-1, 1, 10))
    h = FunctionHazard("event", lambda m, a, W: 0.2 + 0.1 * np.tanh(W[:, 0]))
    f = fit_b_reg(c, h, 2, LINEAR_B)
    assert np.allclose(f(c.w), 0.0, atol=1e-15)
    assert f.rule(c.w).sum() == 0


def test_intercept_b_reg_is_mean_blip(dgp_a, cohort_a500):
    h = make_oracle_nuisance(dgp_a).h
    f = fit_b_reg(cohort_a500, h, 2, INTERCEPT_B)
    assert f(np.zeros((1, 2)))[0] == pytest.approx(blip_values(h, 2, cohort_a500.w).mean(), rel=1e-14)


@pytest.mark.parametrize("spec", [LINEAR_B, LINEAR_D, CandidateSpec("s", "d_class", "stump_boost")])
def test_sign_agreement_on_reference_dgp(dgp_a, spec):
    c = synth.simulate(dgp_a, 5000, 21)
    eta = fit_nuisance_single(c, GLM, 2)
    f = fit_b_reg(c, eta.h, 2, spec) if spec.kind == "b_reg" else (
        fit_d_reg(c, eta, 2, spec) if spec.kind == "d_reg" else fit_d_class(c, eta, 2, spec))
    W, _ = dgp_a.support()
    assert np.mean(f.rule(W) == (W[:, 0] > 0)) >= 0.9


def test_d_reg_constant_target():
    c = z_cohort(np.linspace(-1, 1, 12))
    f = fit_d_reg(c, None, 2, LINEAR_D, d=np.full(12, 0.7))
    assert np.allclose(f(np.array([[-5.0], [3.0]])), 0.7)


def test_d_reg_permutation_equivariance():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(40, 2))
    d = z @ [1.0, -0.5] + rng.normal(size=40)
    c = z_cohort(z)
    perm = rng.permutation(40)
    f1 = fit_d_reg(c, None, 2, LINEAR_D, d=d)
    f2 = fit_d_reg(c.take(perm), None, 2, LINEAR_D, d=d[perm])
    grid = rng.normal(size=(10, 2))
    assert np.allclose(f1(grid), f2(grid), rtol=1e-12)
    assert f1.train_ids == f2.train_ids


def test_d_class_single_class_is_constant():
    c = z_cohort(np.arange(5.0))
    f = fit_d_class(c, None, 2, LOGIT, d=np.array([0.5, 1.0, 2.0, 0.1, 3.0]))
    assert np.all(f(np.array([[-100.0], [100.0]])) > 0)
    g = fit_d_class(c, None, 2, LOGIT, d=-np.ones(5))
    assert np.all(g.rule(c.w) == 0)


def test_d_class_uniform_weights_equal_unweighted():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(60, 1))
    lab = (z[:, 0] + rng.normal(size=60) > 0).astype(float)
    d = np.where(lab == 1, 2.5, -2.5)
    f = fit_d_class(z_cohort(z), None, 2, LOGIT, d=d)
    beta = fit_logistic(np.column_stack([np.ones(60), z]), lab)
    assert f.score.intercept == pytest.approx(beta[0], rel=1e-12)
    assert f.score.coef[0] == pytest.approx(beta[1], rel=1e-12)


def _oracle_weighted_logit(z, y, w, ridge=1e-6):
    # weights scaled to mean one plus the same small ridge the fitter uses
    X = np.column_stack([np.ones(len(z)), z])
    w = w / w.mean()

    def nll(b):
        eta = X @ b
        return np.sum(w * (np.logaddexp(0, eta) - y * eta)) + 0.5 * ridge * b @ b

    def grad(b):
        return X.T @ (w * (1 / (1 + np.exp(-X @ b)) - y)) + ridge * b

    return optimize.minimize(nll, np.zeros(2), jac=grad, method="BFGS", options={"gtol": 1e-12}).x


def test_d_class_heavy_point_flips_boundary():
    # separable data plus one mislabelled point at z=-2; weight 20 on that point
    z = np.array([-2.0, -1.0, 1.0, 2.0])
    y = np.array([1.0, 0.0, 1.0, 1.0])
    light = np.array([1.0, 1.0, 1.0, 1.0])
    heavy = np.array([20.0, 1.0, 1.0, 1.0])
    ref_light = _oracle_weighted_logit(z, y, light)
    ref_heavy = _oracle_weighted_logit(z, y, heavy)
    assert ref_light[1] > 0 > ref_heavy[1]
    c = z_cohort(z)
    f_light = fit_d_class(c, None, 2, LOGIT, d=np.where(y == 1, 1.0, -1.0) * light)
    f_heavy = fit_d_class(c, None, 2, LOGIT, d=np.where(y == 1, 1.0, -1.0) * heavy)
    assert [f_light.score.intercept, *f_light.score.coef] == pytest.approx(ref_light, abs=1e-7)
    assert [f_heavy.score.intercept, *f_heavy.score.coef] == pytest.approx(ref_heavy, abs=1e-7)
    probe = np.array([[-6.0], [9.0]])
    assert list(f_light.rule(probe)) == [0, 1] and list(f_heavy.rule(probe)) == [1, 0]


def _const(name, v):
    return DecisionFunction(name=name, kind="d_reg", score=ConstantScore(v))


def test_assemble_vertex_tie_and_scale():
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(20, 1))
    lin = fit_d_reg(z_cohort(Z), None, 2, LINEAR_D, d=Z[:, 0] * 2 - 0.3)
    plus, minus = _const("p", 1.0), _const("m", -1.0)
    assert np.array_equal(assemble_rule([lin, plus], [1.0, 0.0])(Z), lin(Z))
    tie = assemble_rule([plus, minus], [0.5, 0.5])
    assert np.all(tie(Z) == 0) and np.all(tie.rule(Z) == 0)
    doubled = assemble_rule([_const("p2", 2.0), _const("m2", -2.0), lin], [0.2, 0.3, 0.5])
    base = assemble_rule([plus, minus, lin], [0.2, 0.3, 0.5])
    assert np.array_equal(doubled.rule(Z), ((0.2 * 2 - 0.3 * 2 + 0.5 * lin(Z)) > 0).astype(int))
    assert np.array_equal(base.rule(Z), (base(Z) > 0).astype(int))
    with pytest.raises(RuleError):
        assemble_rule([plus], [0.5, 0.5])
    with pytest.raises(RuleError):
        assemble_rule([plus, minus], [1.5, -0.5])


def test_rule_json_round_trip_is_bit_identical(cohort_a500):
    eta = fit_nuisance_single(cohort_a500, GLM, 2)
    members = [fit_d_reg(cohort_a500, eta, 2, LINEAR_D),
               fit_d_class(cohort_a500, eta, 2, CandidateSpec("s", "d_class", "stump_boost", rounds=15))]
    ens = assemble_rule(members, [0.3, 0.7])
    back = DecisionFunction.from_dict(json.loads(json.dumps(ens.to_dict())))
    Z = np.random.default_rng(0).uniform(-2, 2, size=(500, 2))
    assert np.array_equal(back(Z), ens(Z))
    assert back.train_ids == ens.train_ids


@pytest.fixture(scope="module")
def eval_setup():
    dgp = synth.dgp_b()
    ev = synth.simulate(dgp, 2000, 99)
    return dgp, ev, make_oracle_nuisance(dgp)


def test_value_reference_identities(eval_setup):
    dgp, ev, eta = eval_setup
    d = dr_terms(ev, eta, 2).d
    assert estimate_value(constant_rule("never", False), ev, eta, 2).v_hat == 0.0
    assert estimate_value(constant_rule("always", True), ev, eta, 2).v_hat == np.mean(d)


def test_value_additivity(eval_setup):
    dgp, ev, eta = eval_setup
    f = DecisionFunction("w1", "d_reg", score=LinearScore(0.1, (1.0, -0.2)))
    g = DecisionFunction("not_w1", "d_reg", score=LinearScore(-0.1, (-1.0, 0.2)))
    assert np.all(f.rule(ev.w) + g.rule(ev.w) == 1)
    total = estimate_value(constant_rule("always", True), ev, eta, 2).v_hat
    parts = estimate_value(f, ev, eta, 2).v_hat + estimate_value(g, ev, eta, 2).v_hat
    # equal in exact arithmetic; floating-point sums differ only by rounding
    assert parts == pytest.approx(total, rel=1e-12, abs=1e-15)


def test_value_provenance_overlap(eval_setup, cohort_a500):
    dgp, ev, eta = eval_setup
    f = fit_d_reg(ev.take(np.arange(10)), None, 2, LINEAR_D, d=np.arange(10.0))
    with pytest.raises(RuleError, match="overlap"):
        estimate_value(f, ev, eta, 2)


def test_value_se_is_sample_sd(eval_setup):
    dgp, ev, eta = eval_setup
    est = estimate_value(constant_rule("always", True), ev, eta, 2)
    d = dr_terms(ev, eta, 2).d
    assert est.se_hat == pytest.approx(np.std(d, ddof=1) / np.sqrt(len(d)))
    assert est.n_eval == 2000 and est.nuisance == "oracle"


def test_regret_examples(dgp_a):
    d0 = DecisionFunction("d0", "d_reg", LinearScore(0.0, (1.0, 0.0)))
    anti = DecisionFunction("anti", "d_reg", LinearScore(0.0, (-1.0, 0.0)))
    assert regret(d0, dgp_a).regret == 0.0
    assert regret(anti, dgp_a).regret == pytest.approx(0.3, abs=1e-15)
    rng = np.random.default_rng(0)
    for _ in range(20):
        f = DecisionFunction("r", "d_reg", LinearScore(rng.normal(), tuple(rng.normal(size=2))))
        assert regret(f, dgp_a).regret >= 0


def test_regret_continuous_has_se():
    dgp = synth.dgp_step()
    r = regret(DecisionFunction("never", "ref", ConstantScore(-1.0)), dgp, n_mc=20_000)
    assert r.regret > 0 and r.se > 0 and not r.exact


def test_candidate_spec_validation():
    with pytest.raises(RuleError):
        CandidateSpec("x", "d_class", "linear")
    with pytest.raises(RuleError):
        CandidateSpec("x", "q_learning", "linear")
    with pytest.raises(RuleError):
        CandidateSpec.from_dict({"name": "x", "kind": "d_reg", "learner": "linear", "alpha": 1})
    spec = CandidateSpec("s", "d_class", "stump_boost", rounds=5)
    assert CandidateSpec.from_dict(spec.to_dict()) == spec
