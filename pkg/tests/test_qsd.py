import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qsdlab.errors import EmptyExitSet, NonPositiveEigenvector, NotRecurrent
from qsdlab.model import build_model
from qsdlab.qsd import (
    assemble_qsd,
    invariant_measure,
    invariant_vector,
    moment_mh,
    solve_qsd_direct,
    verify_qsd,
)
from qsdlab.spectral import classify, decay_parameter, embedded_chain
from qsdlab.taboo import exit_kernel

from conftest import G2_LAMBDA, dense_left_oracle, random_model

P, R, W = 0.3, 0.2, 0.5


@pytest.fixture(scope="module")
def fb(feedback2000):
    return feedback2000, decay_parameter(feedback2000).lam


def test_invariant_measure_feedback(fb):
    m, lam = fb
    x = invariant_measure(m, lam, 1)
    i = np.arange(1, 101)
    expected = (P / (1 - lam)) ** (i - 1) / (1 - lam - R)
    np.testing.assert_allclose(x.values[:100], expected, rtol=1e-10)
    assert x.values[0] == pytest.approx(1.9570, abs=1e-3)
    assert x.recurrent


def test_invariant_measure_g2(g2):
    x = invariant_measure(g2, G2_LAMBDA, 1)
    np.testing.assert_allclose(x.values, [0.6180340, 1.0], atol=1e-7)
    np.testing.assert_allclose(x.values, [(np.sqrt(5) - 1) / 2, 1.0], atol=1e-12)
    r = np.asarray(g2.sub_generator().T @ x.values).ravel() + G2_LAMBDA * x.values
    assert np.abs(r).max() <= 1e-12


def test_invariant_measure_bd_line_ratio(line300):
    k = line300.index_of(0)
    lam = decay_parameter(line300).lam
    x = invariant_measure(line300, lam, k)
    ratios = x.values[k - 5 : k + 5] / x.values[k - 6 : k + 4]
    np.testing.assert_allclose(ratios, np.sqrt(0.4 / 0.6), atol=1e-3)


def test_invariant_measure_flags_transient_shift(g2):
    with pytest.warns(UserWarning):
        x = invariant_measure(g2, 0.1, 1)
    assert not x.recurrent and x.f_kk < 1


def test_invariant_vector_feedback(fb):
    m, lam = fb
    y = invariant_vector(m, lam, (1,), [1.0])
    assert y.values[0] == 1.0
    np.testing.assert_allclose(y.values[1:200], 0.7 / (0.7 - lam), rtol=1e-10)
    assert y.values[1] == pytest.approx(1.70335, abs=1e-3)


def test_invariant_vector_g2(g2):
    y = invariant_vector(g2, G2_LAMBDA, (1,), [1.0])
    np.testing.assert_allclose(y.values, [1.0, (1 + np.sqrt(5)) / 2], atol=1e-9)
    r = np.asarray(g2.sub_generator() @ y.values).ravel() + G2_LAMBDA * y.values
    assert np.abs(r).max() <= 1e-12


def test_invariant_vector_bd_line_ratio(line300):
    k = line300.index_of(0)
    lam = decay_parameter(line300).lam
    y = invariant_vector(line300, lam, (k,), [1.0])
    ratios = y.values[k - 5 : k + 5] / y.values[k - 6 : k + 4]
    np.testing.assert_allclose(ratios, np.sqrt(0.6 / 0.4), atol=1e-3)


def test_assemble_qsd_feedback(fb):
    m, lam = fb
    res = assemble_qsd(m, lam)
    i = np.arange(1, 51)
    expected = (P / (1 - lam)) ** (i - 1) * lam / W
    assert np.abs(res.u[:50] - expected).max() <= 1e-12
    assert res.u[0] == pytest.approx(0.578045, abs=1e-5)
    assert res.u[1] / res.u[0] == pytest.approx(0.421954, abs=1e-5)
    # u_1 from the theorem's formula on H equals lam / w
    assert lam * res.mu.mu[0] / ((m.total_rate[0] - lam) * res.m_h) == pytest.approx(lam / W, rel=1e-12)


def test_assemble_qsd_small_fixtures(g2, m3):
    res = assemble_qsd(g2, G2_LAMBDA)
    np.testing.assert_allclose(res.u, [0.3819660112501051, 0.6180339887498949], atol=1e-12)
    assert res.m_h == pytest.approx(1 / (2 - G2_LAMBDA), abs=1e-12)
    assert res.m_h == pytest.approx(0.6180340, abs=1e-7)
    r3 = assemble_qsd(m3, 1.0)
    np.testing.assert_allclose(r3.u, [0.5, 0.5], atol=1e-15)
    assert r3.m_h == pytest.approx(1.0, abs=1e-15)


def test_moment_mh_feedback(fb):
    m, lam = fb
    ex = exit_kernel(embedded_chain(m, lam), m.exit_set.members)
    assert moment_mh(m, lam, ex) == pytest.approx(W / (0.8 - lam), rel=1e-12)


def test_assemble_qsd_refusals(halfline400):
    verdict = classify(halfline400)
    with pytest.raises(NotRecurrent):
        assemble_qsd(halfline400, decay_parameter(halfline400).lam, classification=verdict)
    closed = build_model([(1, 2, 1.0), (2, 1, 1.0)])
    with pytest.raises(EmptyExitSet):
        assemble_qsd(closed, 0.0)


def test_solve_direct_halfline(halfline400):
    lam = decay_parameter(halfline400).lam
    res = solve_qsd_direct(halfline400, lam)
    p, q = 0.25, 0.75
    j = np.arange(1, 101)
    target = j * np.sqrt(p) ** (j - 1) * (np.sqrt(q) - np.sqrt(p)) ** 2 / np.sqrt(q) ** (j + 1)
    assert res.u[0] == pytest.approx(0.178633, abs=5e-3)
    assert np.abs(res.u[:100] - target).sum() <= 5e-3
    assert verify_qsd(halfline400, res.u, lam).residual <= 1e-8 * halfline400.max_rate


def test_solve_direct_small_fixtures(g2, m3):
    a = assemble_qsd(g2, G2_LAMBDA)
    d = solve_qsd_direct(g2, G2_LAMBDA)
    assert np.abs(a.u - d.u).max() <= 1e-9
    np.testing.assert_allclose(solve_qsd_direct(m3, 1.0).u, [0.5, 0.5], atol=1e-12)


def test_solve_direct_wrong_lambda(g2):
    # next to the other eigenvalue the eigenvector changes sign
    with pytest.raises(NonPositiveEigenvector):
        solve_qsd_direct(g2, (3 + np.sqrt(5)) / 2 - 0.05)


def test_verify_qsd(g2, single):
    good = verify_qsd(g2, [0.3819660112501051, 0.6180339887498949], G2_LAMBDA)
    assert good.residual <= 1e-10
    bad = verify_qsd(g2, [0.5, 0.5], G2_LAMBDA)
    assert bad.residual >= 0.1
    one = verify_qsd(single, [1.0], 2.0)
    assert one.residual == 0.0 and one.sum_error == 0.0 and one.min_u == 1.0


def test_interior_residual_convention(feedback2000):
    lam = decay_parameter(feedback2000).lam
    u = assemble_qsd(feedback2000, lam).u
    assert verify_qsd(feedback2000, u, lam).n_checked == feedback2000.n - 1
    assert verify_qsd(feedback2000, u, lam, interior_only=False).n_checked == feedback2000.n


@pytest.mark.parametrize("c", [0.5, 3.0])
def test_scale_covariance(g2, c):
    base_lam = decay_parameter(g2).lam
    base_u = assemble_qsd(g2, base_lam).u
    s = g2.scaled(c)
    lam = decay_parameter(s).lam
    assert lam == pytest.approx(c * base_lam, rel=1e-12)
    np.testing.assert_allclose(assemble_qsd(s, lam).u, base_u, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 60))
def test_qsd_invariants_on_random_models(seed, n):
    m = random_model(np.random.default_rng(seed), n)
    lam = decay_parameter(m).lam
    a = assemble_qsd(m, lam)
    d = solve_qsd_direct(m, lam)
    # eigen-identity, normalization, positivity
    for res in (a, d):
        assert res.residual_report.residual <= 1e-8 * m.max_rate
        assert abs(res.u.sum() - 1) <= 1e-10
        assert np.all(res.u > 0)
    # two routes agree
    assert np.abs(a.u - d.u).max() <= 1e-7
    # lam * sum(x) = M_H
    assert lam * a.x.sum() == pytest.approx(a.m_h, rel=1e-9)
    assert a.mass_identity_error <= 1e-9
    y = invariant_vector(m, lam, a.mu.members, a.mu.v)
    assert np.all(y.values > 0)
    r = np.asarray(m.sub_generator() @ y.values).ravel() + lam * y.values
    assert np.abs(r).max() <= 1e-8 * m.max_rate * np.abs(y.values).max()


def test_dense_oracle_agreement_spot():
    m = random_model(np.random.default_rng(99), 80)
    lam_o, u_o = dense_left_oracle(m)
    res = assemble_qsd(m, decay_parameter(m).lam)
    assert res.lam == pytest.approx(lam_o, abs=1e-10)
    assert np.abs(res.u - u_o).max() <= 1e-9
