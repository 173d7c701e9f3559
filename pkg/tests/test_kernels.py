import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lccmkit import _backend, _pykernels
from lccmkit.kernels import (
    FREE,
    NONNEGATIVE,
    Constraint,
    KernelError,
    NestStructure,
    UtilitySpec,
    fixed,
    kernel_gradient,
    mnl_log_probs,
    nl_log_probs,
)
from lccmkit.synthgen import finite_diff_gradient, naive_choice_probs

utilities = arrays(np.float64, st.integers(2, 6), elements=st.floats(-30, 30))


def test_mnl_uniform_three():
    p = np.exp(mnl_log_probs([0.0, 0.0, 0.0], [True] * 3))
    assert np.allclose(p, 1 / 3, atol=1e-15, rtol=0)


def test_mnl_forced_choice():
    lp = mnl_log_probs([0.0, 0.0], [True, False])
    assert lp[0] == 0.0 and lp[1] == -np.inf


def test_mnl_large_utilities_no_overflow():
    p = np.exp(mnl_log_probs([1000.0, 1001.0], [True, True]))
    e = math.e
    assert p == pytest.approx([1 / (1 + e), e / (1 + e)], abs=1e-12)


def test_mnl_no_available_alternative():
    with pytest.raises(KernelError):
        mnl_log_probs([0.0, 1.0], [False, False])


@settings(max_examples=200, deadline=None)
@given(utilities, st.floats(-500, 500))
def test_mnl_normalised_and_translation_invariant(u, shift):
    a = np.ones(u.size, dtype=bool)
    lp = mnl_log_probs(u, a)
    assert abs(np.exp(lp).sum() - 1.0) < 1e-12
    assert np.allclose(np.exp(mnl_log_probs(u + shift, a)), np.exp(lp), atol=1e-12, rtol=0)


@settings(max_examples=200, deadline=None)
@given(utilities, st.data())
def test_nl_unit_lambda_is_mnl(u, data):
    J = u.size
    nest_of = np.array(data.draw(st.lists(st.integers(0, 2), min_size=J, max_size=J)))
    nest_of = np.unique(nest_of, return_inverse=True)[1]
    lam = np.ones(nest_of.max() + 1)
    a = np.ones(J, dtype=bool)
    assert np.allclose(np.exp(nl_log_probs(u, a, nest_of, lam)), np.exp(mnl_log_probs(u, a)), atol=1e-12, rtol=0)


def test_nl_within_nest_symmetry():
    lp = nl_log_probs([0.0, 0.0, 0.0], [True] * 3, np.array([0, 0, 1]), [0.5, 1.0])
    p = np.exp(lp)
    assert p[0] == pytest.approx(p[1], abs=1e-15)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)


def test_nl_matches_naive_formula(rng):
    for _ in range(50):
        u = rng.normal(size=3)
        nest_of = np.array([0, 0, 1])
        lam = np.array([0.7, 1.0])
        lp = nl_log_probs(u, [True] * 3, nest_of, lam)
        assert np.allclose(np.exp(lp), naive_choice_probs(u, [True] * 3, nest_of, lam), atol=1e-13, rtol=0)


def test_nl_empty_nest_excluded():
    lp = nl_log_probs([0.3, 0.1, -0.2], [False, False, True], np.array([0, 0, 1]), [0.5, 1.0])
    assert lp[2] == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("bad", [0.0, -0.1, 1.2])
def test_nl_rejects_lambda_outside_unit_interval(bad):
    with pytest.raises(KernelError):
        nl_log_probs([0.0, 0.0], [True, True], np.array([0, 0]), [bad])


def test_nl_with_nest_structure_and_ids():
    ns = NestStructure((("car", "bus"), ("walk",)))
    lp = nl_log_probs([1.0, 0.5, 0.2], [True] * 3, ns, [0.6, 1.0], alternative_ids=("car", "bus", "walk"))
    assert np.exp(lp).sum() == pytest.approx(1.0, abs=1e-12)


def test_mnl_gradient_symmetric_case():
    g, gl = kernel_gradient([0.0, 0.0], [True, True], 0)
    assert np.allclose(g, [0.5, -0.5], atol=1e-15)
    assert gl.size == 0


def test_nl_gradient_at_unit_lambda_equals_mnl(rng):
    u = rng.normal(size=4)
    a = np.ones(4, dtype=bool)
    g_nl, _ = kernel_gradient(u, a, 2, np.array([0, 0, 1, 1]), [1.0, 1.0])
    g_mnl, _ = kernel_gradient(u, a, 2)
    assert np.allclose(g_nl, g_mnl, atol=1e-12)


def _rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))


def test_nl_gradient_finite_differences(rng):
    for _ in range(100):
        J = int(rng.integers(3, 6))
        u = rng.normal(size=J)
        nest_of = np.array([0, 0] + [1] * (J - 2))
        lam = rng.uniform(0.3, 0.95, 2)
        a = np.ones(J, dtype=bool)
        if J > 3 and rng.random() < 0.5:
            a[-1] = False
        c = int(rng.choice(np.flatnonzero(a)))
        g_u, g_l = kernel_gradient(u, a, c, nest_of, lam)
        fd_u = finite_diff_gradient(lambda x: nl_log_probs(x, a, nest_of, lam)[c], u)
        fd_l = finite_diff_gradient(lambda x: nl_log_probs(u, a, nest_of, x)[c], lam)
        assert _rel_err(g_u, fd_u) < 1e-6
        assert _rel_err(g_l, fd_l) < 1e-6


def test_gradient_rejects_unavailable_chosen():
    with pytest.raises(KernelError):
        kernel_gradient([0.0, 0.0, 0.0], [True, False, True], 1)


def test_constraint_parsing():
    assert Constraint.parse("nonnegative") == NONNEGATIVE
    c = Constraint.parse("fixed:0.5")
    assert c.is_fixed and c.value == 0.5
    assert str(fixed(0.0)).startswith("fixed")
    with pytest.raises(KernelError):
        Constraint.parse("sideways")


def test_utility_spec_validation():
    with pytest.raises(KernelError):
        UtilitySpec((("a", FREE), ("a", FREE)))
    with pytest.raises(KernelError):
        UtilitySpec((("a", FREE),), (("1", FREE), ("2", FREE)))
    u = UtilitySpec((("a", FREE),), (("1", fixed(0.0)), ("2", FREE)))
    assert u.names == ["a", "ASC_1", "ASC_2"]
    assert UtilitySpec.from_dict(u.to_dict()) == u


def test_nest_structure_invariants():
    ns = NestStructure((("1", "2"), ("3",)))
    assert ns.iv_constraints[1].is_fixed and ns.iv_constraints[1].value == 1.0
    assert ns.free_nests == [0]
    with pytest.raises(KernelError):
        NestStructure((("1", "2"), ("2", "3")))
    assert NestStructure.from_dict(ns.to_dict()) == ns


# --------------------------------------------------------------------------
# Batched backends agree with each other and with the single-situation kernels
# --------------------------------------------------------------------------


def _batch(rng, S=40, J=4, D=3):
    X = rng.normal(size=(S, J, D))
    avail = np.ones((S, J), dtype=np.uint8)
    avail[rng.random(S) < 0.3, J - 1] = 0
    chosen = np.array([rng.choice(np.flatnonzero(a)) for a in avail], dtype=np.intp)
    beta = rng.normal(size=D)
    return X, avail, chosen, beta


def test_backends_mnl_match_reference(rng, backend):
    X, avail, chosen, beta = _batch(rng)
    logp, g = _backend.mnl_batch(X, avail, chosen, beta)
    for s in range(X.shape[0]):
        u = X[s] @ beta
        ref = mnl_log_probs(u, avail[s].astype(bool))[chosen[s]]
        gu, _ = kernel_gradient(u, avail[s].astype(bool), chosen[s])
        assert logp[s] == pytest.approx(ref, abs=1e-13)
        assert np.allclose(g[s], gu @ X[s], atol=1e-12)


def test_backends_nl_match_reference(rng, backend):
    X, avail, chosen, beta = _batch(rng)
    nest_of = np.array([0, 0, 1, 1], dtype=np.intp)
    lam = np.array([0.55, 0.8])
    logp, g, gl = _backend.nl_batch(X, avail, chosen, nest_of, lam, beta)
    for s in range(X.shape[0]):
        u = X[s] @ beta
        a = avail[s].astype(bool)
        ref = nl_log_probs(u, a, nest_of, lam)[chosen[s]]
        gu, gref = kernel_gradient(u, a, chosen[s], nest_of, lam)
        assert logp[s] == pytest.approx(ref, abs=1e-13)
        assert np.allclose(g[s], gu @ X[s], atol=1e-12)
        assert np.allclose(gl[s], gref, atol=1e-12)


def test_backends_agree_bitwise_close(rng):
    impls = _backend.implementations()
    if len(impls) < 2:
        pytest.skip("compiled backend not built")
    X, avail, chosen, beta = _batch(rng, S=500)
    a = _backend.mnl_batch(X, avail, chosen, beta, impl=impls["python"])
    b = _backend.mnl_batch(X, avail, chosen, beta, impl=impls["cython"])
    assert np.allclose(a[0], b[0], atol=1e-13) and np.allclose(a[1], b[1], atol=1e-13)


def test_all_log_probs_rows_normalised(rng):
    X, avail, _, beta = _batch(rng)
    P = np.exp(_pykernels.all_log_probs(X, avail, beta, np.array([0, 0, 1, 1]), np.array([0.5, 0.9])))
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(P[avail == 0] == 0)
