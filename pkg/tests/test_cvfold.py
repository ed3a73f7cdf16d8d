import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from survrule import synth
from survrule.cohort import Cohort
from survrule.cvfold import (
    CvMatrix,
    FoldError,
    build_cv_matrix,
    cv_quadratic_risk,
    cv_surrogate_risk,
    cv_zeroone_risk,
    make_cohort_folds,
    make_folds,
)
from survrule.nuisance import FunctionHazard, LearnerSpec, NuisanceSet, make_oracle_nuisance
from survrule.rules import CandidateSpec

CONST = CandidateSpec("zero", "d_reg", "intercept_only")


def matrix(F, D):
    F = np.asarray(F, dtype=float)
    n = F.shape[0]
    return CvMatrix(ids=np.arange(n), fold=np.zeros(n, dtype=int), z_matrix=F, targets=np.asarray(D, float),
                    names=tuple(f"f{j}" for j in range(F.shape[1])))


def test_fold_sizes_examples():
    assert sorted(make_folds(10, 5, 0).sizes().tolist()) == [2] * 5
    assert sorted(make_folds(7, 3, 0).sizes().tolist()) == [2, 2, 3]


@given(st.integers(2, 200), st.integers(2, 10), st.integers(0, 2**32 - 1), st.booleans())
def test_fold_invariants(n, k, seed, stratified):
    if k > n:
        with pytest.raises(FoldError):
            make_folds(n, k, seed)
        return
    strata = np.random.default_rng(seed).integers(0, 4, n) if stratified else None
    p = make_folds(n, k, seed, strata)
    sizes = p.sizes()
    assert sizes.sum() == n and sizes.max() - sizes.min() <= 1
    assert np.array_equal(p.assignment, make_folds(n, k, seed, strata).assignment)
    if stratified:
        for s in np.unique(strata):
            per = np.bincount(p.assignment[strata == s], minlength=k)
            assert per.max() - per.min() <= 1


def test_fold_errors():
    with pytest.raises(FoldError):
        make_folds(3, 4, 0)
    with pytest.raises(FoldError):
        make_folds(3, 1, 0)


def test_zeroone_hand_example():
    m = matrix([[-1.0], [-1.0]], [2.0, -1.0])
    assert cv_zeroone_risk(m, [1.0]) == 1.0


def test_perfect_classification_and_interpolation():
    D = np.array([0.5, -2.0, 1.5, -0.1])
    m = matrix(np.column_stack([D, -D]), D)
    assert cv_zeroone_risk(m, [1.0, 0.0]) == 0.0
    assert cv_quadratic_risk(m, [1.0, 0.0]) == 0.0


def test_tie_maps_to_no_treatment():
    # f = 0 gives d = 0, which is wrong only for positive D
    m = matrix([[1.0, -1.0]] * 2, [3.0, -1.0])
    assert cv_zeroone_risk(m, [0.5, 0.5]) == pytest.approx(1.5)


def test_alpha_validation():
    m = matrix([[1.0, 2.0]], [1.0])
    with pytest.raises(FoldError):
        cv_zeroone_risk(m, [-0.1, 1.1])
    with pytest.raises(FoldError):
        cv_surrogate_risk(m, [0.5, -0.5], "hinge")
    with pytest.raises(FoldError):
        cv_quadratic_risk(m, [0.5, 0.6])
    with pytest.raises(FoldError):
        cv_quadratic_risk(m, [1.0])


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_risk_properties(seed):
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(40, 3))
    D = rng.normal(size=40)
    m = matrix(F, D)
    a, b = rng.dirichlet(np.ones(3), size=2)
    # scale invariance of the 0-1 risk
    c = rng.uniform(0.01, 100)
    assert cv_zeroone_risk(m, c * a) == cv_zeroone_risk(m, a)
    # convexity of the quadratic risk along a segment
    mid = 0.5 * (a + b)
    assert cv_quadratic_risk(m, mid) <= 0.5 * (cv_quadratic_risk(m, a) + cv_quadratic_risk(m, b)) + 1e-12
    # hinge dominates the 0-1 risk row by row
    assert cv_surrogate_risk(m, a, "hinge") >= cv_zeroone_risk(m, a) - 1e-15


def test_constant_zero_candidate(dgp_a):
    # equal hazards in both arms make the plug-in blip, hence the B-Reg fit, exactly zero
    c = synth.simulate(dgp_a, 200, 1)
    oracle = make_oracle_nuisance(dgp_a)
    flat = NuisanceSet(h=FunctionHazard("event", lambda m, a, W: np.full(len(W), 0.3)), g_a=oracle.g_a,
                       g_r=oracle.g_r)
    m = build_cv_matrix(c, make_cohort_folds(c, 4, 0), lambda tr, k: flat,
                        [CandidateSpec("zero", "b_reg", "intercept_only")], 2)
    assert np.all(m.z_matrix == 0)
    assert cv_quadratic_risk(m, [1.0]) == pytest.approx(np.mean(m.targets**2), rel=1e-14)


def test_out_of_fold_contract(dgp_b):
    c = synth.simulate(dgp_b, 120, 5)
    plan = make_cohort_folds(c, 4, 1)
    specs = [CandidateSpec("dreg", "d_reg", "linear"), CandidateSpec("dcls", "d_class", "logistic")]
    lib = [LearnerSpec("glm", "logistic_main_effects")]
    base = build_cv_matrix(c, plan, lib, specs, 2, inner_k=3)
    # flip one validation subject's outcome: its row of predictions must not move
    i = 7
    time = c.time.copy()
    delta = c.delta.copy()
    delta[i], time[i] = (0, 2) if delta[i] == 1 else (1, 1)
    c2 = Cohort(ids=c.ids, w=c.w, a=c.a, delta=delta, time=time, k_max=c.k_max)
    pert = build_cv_matrix(c2, plan, lib, specs, 2, inner_k=3)
    assert np.array_equal(base.z_matrix[i], pert.z_matrix[i])
    same_fold = plan.assignment == plan.assignment[i]
    assert np.array_equal(base.z_matrix[same_fold], pert.z_matrix[same_fold])
    assert base.targets[i] != pert.targets[i]


def test_reference_dgp_smoke(dgp_b):
    c = synth.simulate(dgp_b, 500, 2)
    m = build_cv_matrix(c, make_cohort_folds(c, 5, 0), [LearnerSpec("glm", "logistic_main_effects")],
                        [CONST, CandidateSpec("dreg", "d_reg", "linear")], 2, inner_k=3)
    assert m.z_matrix.shape == (500, 2)
    assert np.all(np.isfinite(m.targets)) and np.all(np.isfinite(m.z_matrix))
    assert np.array_equal(m.weights, np.abs(m.targets))
    assert np.array_equal(m.labels, (m.targets > 0).astype(int))


def test_single_arm_training_fold_errors():
    n = 6
    c = Cohort(ids=np.arange(n), w=np.zeros((n, 1)), a=[1, 1, 1, 1, 1, 0], delta=[1] * n, time=[1] * n, k_max=2)
    plan = make_folds(n, 2, 0)
    plan = type(plan)(k=2, assignment=np.array([0, 0, 0, 0, 0, 1]), seed=0)
    with pytest.raises(FoldError, match="stratified"):
        build_cv_matrix(c, plan, [LearnerSpec("i", "intercept_only")], [CONST], 2)


def test_csv_export(tmp_path):
    m = matrix([[1.0, -0.5], [0.25, 2.0]], [0.5, -1.5])
    m.to_csv(tmp_path / "cv.csv")
    lines = (tmp_path / "cv.csv").read_text().splitlines()
    assert lines[0] == "id,fold,target,weight,label,f_1,f_2"
    assert lines[2] == "1,0,-1.5,1.5,0,0.25,2.0"
