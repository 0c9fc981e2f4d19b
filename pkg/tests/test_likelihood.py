import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_matched, random_stratum
from pooled_spline import likelihood as L
from pooled_spline.data import PooledDataset, Stratum
from pooled_spline.splines import SplineBasis, normal_basis

LINEAR = SplineBasis.linear()


def brute_loglik(F, y, beta):
    """Literal product form: observed case set over the sum over all case sets."""
    n = int(y.sum())
    num = math.exp(float(F[y.astype(bool)].sum(axis=0) @ beta))
    den = sum(math.exp(float(F[list(c)].sum(axis=0) @ beta))
              for c in itertools.combinations(range(len(y)), n))
    return math.log(num / den)


def test_one_to_one_zero_coef():
    s = Stratum("A", "1", y=[1, 0], x_tilde=[0.3, -1.2])
    assert L.stratum_loglik(s, LINEAR, [0.0]) == pytest.approx(math.log(0.5), abs=1e-15)


def test_one_to_one_hand_value():
    s = Stratum("A", "1", y=[1, 0], x_tilde=[1.0, 0.0])
    expected = -math.log(1 + math.exp(-0.7))
    assert expected == pytest.approx(-0.4032, abs=1e-4)
    for method in ("enumerate", "recursive"):
        assert L.stratum_loglik(s, LINEAR, [0.7], method=method) == pytest.approx(expected, abs=1e-14)


def test_two_to_three_against_brute_force():
    rng = np.random.default_rng(7)
    x = rng.normal(size=5)
    z = rng.normal(size=(5, 2))
    y = np.array([1, 0, 1, 0, 0])
    s = Stratum("A", "1", y=y, x_tilde=x, z=z)
    basis = normal_basis()
    coef = L.ModelCoefficients([-0.4, 0.2], [0.3, -0.1])
    F = L.stratum_features(s, basis)
    expected = brute_loglik(F, y, coef.vector)
    for method in ("enumerate", "recursive"):
        assert L.stratum_loglik(s, basis, coef, method=method) == pytest.approx(expected, rel=1e-12)


def test_enumeration_cap():
    y = np.r_[np.ones(8), np.zeros(12)]
    s = Stratum("A", "1", y=y, x_tilde=np.linspace(0, 1, 20))
    with pytest.raises(L.EnumerationCapError, match="recursive"):
        L.stratum_loglik(s, LINEAR, [0.1], method="enumerate")
    # auto falls back to the recursion
    assert np.isfinite(L.stratum_loglik(s, LINEAR, [0.1]))


def test_kernels_agree_with_enumeration(kernel):
    rng = np.random.default_rng(11)
    for _ in range(200):
        F, y, beta = random_stratum(rng)
        ll, sc, h = L.enumerate_moments(F, y, beta)
        l2, s2, h2 = kernel(F, y, np.array([0, len(y)]), beta, True)
        assert l2[0] == pytest.approx(ll, rel=1e-10)
        np.testing.assert_allclose(s2[0], sc, atol=1e-10)
        np.testing.assert_allclose(h2, h, atol=1e-10)


def test_kernel_packed_strata_and_backends_agree():
    from pooled_spline import _backend

    rng = np.random.default_rng(5)
    feats, ys, offs = [], [], [0]
    for _ in range(300):
        F, y, _ = random_stratum(rng, n_feat=3)
        feats.append(F)
        ys.append(y)
        offs.append(offs[-1] + len(y))
    F = np.vstack(feats)
    y = np.concatenate(ys)
    off = np.array(offs)
    beta = np.array([0.3, -0.5, 0.2])
    py = _backend.get_kernel("python")(F, y, off, beta, True)
    for j in (0, 17, 299):
        single = L.enumerate_moments(feats[j], ys[j], beta)
        assert py[0][j] == pytest.approx(single[0], rel=1e-10)
    if _backend.BACKEND == "cython":
        cy = _backend.get_kernel("cython")(F, y, off, beta, True)
        for a, b in zip(py, cy):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_kernel_extreme_linear_predictor(kernel):
    # exponents far outside double range must stay finite through rescaling
    F = np.array([[400.0], [-400.0], [0.0], [300.0]])
    y = np.array([1, 0, 0, 1], np.int8)
    ll, sc, h = kernel(F, y, np.array([0, 4]), np.array([3.0]), True)
    assert np.isfinite(ll[0]) and np.all(np.isfinite(sc)) and np.all(np.isfinite(h))
    ref = L.enumerate_moments(F, y, np.array([3.0]))
    assert ll[0] == pytest.approx(ref[0], rel=1e-10, abs=1e-10)


def test_score_examples():
    basis = normal_basis()
    s = Stratum("A", "1", y=[1, 0], x_tilde=[1.3, -0.2], z=[[1.0], [0.0]])
    F = L.stratum_features(s, basis)
    np.testing.assert_allclose(L.stratum_score(s, basis, np.zeros(3)), 0.5 * (F[0] - F[1]))
    same = Stratum("A", "2", y=[1, 0], x_tilde=[0.4, 0.4], z=[[2.0], [2.0]])
    np.testing.assert_allclose(L.stratum_score(same, basis, [0.3, -1, 2]), 0.0, atol=1e-15)


def test_score_matches_finite_differences():
    rng = np.random.default_rng(2)
    basis = normal_basis()
    for _ in range(30):
        N = int(rng.integers(2, 8))
        y = np.zeros(N, np.int8)
        y[rng.choice(N, int(rng.integers(1, N)), replace=False)] = 1
        s = Stratum("A", "1", y=y, x_tilde=rng.normal(size=N), z=rng.normal(size=(N, 1)))
        beta = rng.normal(scale=0.5, size=3)
        g = L.stratum_score(s, basis, beta)
        h = 1e-5
        fd = np.array([(L.stratum_loglik(s, basis, beta + h * e) - L.stratum_loglik(s, basis, beta - h * e))
                       / (2 * h) for e in np.eye(3)])
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_zero_coefficient_loglik_is_log_count():
    rng = np.random.default_rng(0)
    for _ in range(100):
        N = int(rng.integers(2, 11))
        n = int(rng.integers(1, N))
        y = np.r_[np.ones(n), np.zeros(N - n)]
        s = Stratum("A", "1", y=y, x_tilde=rng.normal(size=N))
        for method in ("enumerate", "recursive"):
            assert L.stratum_loglik(s, normal_basis(), [0.0, 0.0], method) == -math.log(math.comb(N, n))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-5, 5))
def test_linear_basis_shift_invariance(seed, c):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(2, 8))
    y = np.zeros(N, np.int8)
    y[rng.choice(N, int(rng.integers(1, N)), replace=False)] = 1
    x = rng.normal(size=N)
    beta = [float(rng.normal())]
    a = L.stratum_loglik(Stratum("A", "1", y=y, x_tilde=x), LINEAR, beta)
    b = L.stratum_loglik(Stratum("A", "1", y=y, x_tilde=x + c), LINEAR, beta)
    assert a == pytest.approx(b, abs=1e-9)
    assert a <= 0


def test_total_hessian_negative_semidefinite():
    rng = np.random.default_rng(4)
    ds = make_matched(rng, n_strata=40, n_case=2, n_ctrl=3, n_z=1)
    ds = ds.with_x_tilde(ds.x_ref)
    basis = normal_basis()
    for _ in range(20):
        beta = rng.normal(scale=2, size=3)
        _, _, H = L.evaluate(ds, basis, beta)
        ev = np.linalg.eigvalsh(H)
        assert ev.max() <= 1e-10 * max(1.0, np.abs(ev).max())


def test_fit_converges_and_score_vanishes():
    rng = np.random.default_rng(8)
    ds = make_matched(rng, n_strata=300, n_case=1, n_ctrl=2, n_z=1)
    ds = ds.with_x_tilde(ds.x_ref)
    coef, info, rep = L.fit(ds, normal_basis())
    assert rep.converged and rep.max_abs_score < 1e-8
    assert L.total_score(ds, normal_basis(), coef.vector) == pytest.approx(np.zeros(3), abs=1e-8)
    assert np.all(np.linalg.eigvalsh(info) > 0)


def test_fit_matches_statsmodels_conditional_logit():
    sm = pytest.importorskip("statsmodels.discrete.conditional_models")
    rng = np.random.default_rng(12)
    ds = make_matched(rng, n_strata=400, n_case=1, n_ctrl=1)
    ds = ds.with_x_tilde(ds.x_ref)
    coef, info, _ = L.fit(ds, LINEAR)
    groups = ds.stratum_index()
    res = sm.ConditionalLogit(ds.case.astype(float), ds.x_tilde[:, None], groups=groups).fit(
        method="newton", maxiter=100, disp=False)
    assert coef.beta_x[0] == pytest.approx(res.params[0], abs=1e-4)
    assert np.sqrt(1 / info[0, 0]) == pytest.approx(res.bse[0], rel=1e-3)


def test_fit_matches_statsmodels_with_multicase_strata():
    sm = pytest.importorskip("statsmodels.discrete.conditional_models")
    rng = np.random.default_rng(13)
    ds = make_matched(rng, n_strata=150, n_case=2, n_ctrl=3, n_z=1)
    ds = ds.with_x_tilde(ds.x_ref)
    basis = normal_basis()
    coef, _, _ = L.fit(ds, basis)
    X = L.design_matrix(ds, basis)
    res = sm.ConditionalLogit(ds.case.astype(float), X, groups=ds.stratum_index()).fit(
        method="newton", maxiter=100, disp=False)
    np.testing.assert_allclose(coef.vector, res.params, atol=1e-4)


def test_null_simulation_estimate_near_zero():
    from pooled_spline.simulation import SimulationConfig, generate_dataset

    cfg = SimulationConfig(beta_x1=0.0, beta_x2=0.0, n_replicates=1, seed=99)
    ds = generate_dataset(cfg, 0)
    ref = PooledDataset.build(ds.study, ds.stratum, ds.case, w=ds.w, x_ref=ds.x_true,
                              reference_lab={s: True for s in ds.studies})
    ref = ref.with_x_tilde(ref.x_ref)
    coef, info, _ = L.fit(ref, cfg.basis)
    se = np.sqrt(np.diag(np.linalg.inv(info)))
    assert ref.n_strata == 2000
    assert np.all(np.abs(coef.vector) < 3 * se)


def test_separation_raises():
    x = np.array([[2.0, 1.0], [3.0, 0.5], [1.0, -1.0], [0.5, 0.0]]).ravel()
    ds = PooledDataset.build(["A"] * 8, np.repeat(["1", "2", "3", "4"], 2), [1, 0] * 4,
                             w=x, x_ref=x, reference_lab={"A": True}).with_x_tilde(x)
    with pytest.raises((L.SingularHessianError, L.ConvergenceError)):
        L.fit(ds, LINEAR)


def test_collinear_confounder_names_null_direction():
    rng = np.random.default_rng(1)
    ds = make_matched(rng, n_strata=50)
    ds = PooledDataset.build(ds.study, ds.stratum, ds.case, w=ds.w, x_ref=ds.x_ref,
                             z=2 * ds.x_ref[:, None], reference_lab={"A": True})
    ds = ds.with_x_tilde(ds.x_ref)
    with pytest.raises(L.SingularHessianError, match="null direction") as ei:
        L.fit(ds, LINEAR)
    v = ei.value.null_direction
    assert abs(v[0] + 2 * v[1]) < 1e-6


def test_uninformative_strata_dropped():
    x = np.array([0.5, 0.1, -0.2, 0.3, 1.0, 1.1])
    ds = PooledDataset.build(["A"] * 6, ["1", "1", "2", "2", "3", "3"], [1, 0, 1, 0, 0, 0],
                             w=x, x_ref=x, reference_lab={"A": True}).with_x_tilde(x)
    with pytest.raises(L.LikelihoodError):
        L.stratum_loglik(ds.get_stratum(2), LINEAR, [0.0])
    _, _, rep = L.fit(ds, LINEAR)
    assert rep.n_dropped == 1 and rep.n_strata == 2
