"""Vectorised numpy implementation of the batched choice kernels.

Same contract as the compiled ``_ckernels`` module; used when the extension
is not built or ``LCCMKIT_BACKEND=python`` is set.
"""

import numpy as np


def _masked_utilities(X, avail, beta):
    U = X @ beta if X.shape[2] else np.zeros(X.shape[:2])
    return np.where(avail.astype(bool), U, -np.inf), U


def _nest_iv(scaled, nest_of, n_nests):
    """Per-nest log-sum-exp of scaled utilities; -inf for nests with nothing available."""
    iv = np.full((scaled.shape[0], n_nests), -np.inf)
    for k in range(n_nests):
        cols = scaled[:, nest_of == k]
        if cols.shape[1] == 0:
            continue
        mk = cols.max(axis=1)
        live = np.isfinite(mk)
        safe = np.where(live, mk, 0.0)
        with np.errstate(divide="ignore"):
            lse = safe + np.log(np.exp(cols - safe[:, None]).sum(axis=1))
        iv[:, k] = np.where(live, lse, -np.inf)
    return iv


def all_log_probs(X, avail, beta, nest_of=None, lambdas=None):
    """(S, J) log probabilities of every alternative; -inf where unavailable."""
    Um, U = _masked_utilities(X, avail, beta)
    if nest_of is None:
        m = Um.max(axis=1, keepdims=True)
        return Um - (m + np.log(np.exp(Um - m).sum(axis=1, keepdims=True)))
    lam_j = lambdas[nest_of]
    scaled = Um / lam_j
    iv = _nest_iv(scaled, nest_of, lambdas.size)
    top = lambdas * iv
    mt = top.max(axis=1, keepdims=True)
    log_denom = mt[:, 0] + np.log(np.exp(top - mt).sum(axis=1))
    iv_j = iv[:, nest_of]
    with np.errstate(invalid="ignore"):
        out = scaled - iv_j + lam_j * iv_j - log_denom[:, None]
    return np.where(avail.astype(bool), out, -np.inf)


def mnl_batch(X, avail, chosen, beta, want_grad=True):
    """Chosen-alternative log probabilities and their beta-gradients.

    Returns ``(logp, g_beta)`` with shapes (S,) and (S, D); ``g_beta`` is None
    when ``want_grad`` is false.
    """
    S = X.shape[0]
    rows = np.arange(S)
    lp = all_log_probs(X, avail, beta)
    logp = lp[rows, chosen]
    if not want_grad:
        return logp, None
    P = np.exp(lp)
    g = X[rows, chosen] - np.einsum("sj,sjd->sd", P, X)
    return logp, g


def nl_batch(X, avail, chosen, nest_of, lambdas, beta, want_grad=True):
    """Nested-logit analogue of :func:`mnl_batch`; also returns (S, M) lambda-gradients."""
    S, J, _ = X.shape
    rows = np.arange(S)
    lp = all_log_probs(X, avail, beta, nest_of, lambdas)
    logp = lp[rows, chosen]
    if not want_grad:
        return logp, None, None
    av = avail.astype(bool)
    U = X @ beta if X.shape[2] else np.zeros((S, J))
    U = np.where(av, U, 0.0)
    lam_j = lambdas[nest_of]
    n_nests = lambdas.size

    # within-nest probabilities q and nest probabilities Q
    scaled = np.where(av, U / lam_j, -np.inf)
    iv = _nest_iv(scaled, nest_of, n_nests)
    live_n = np.isfinite(iv)
    iv0 = np.where(live_n, iv, 0.0)
    top = np.where(live_n, lambdas * iv0, -np.inf)
    mt = top.max(axis=1, keepdims=True)
    log_denom = mt[:, 0] + np.log(np.exp(top - mt).sum(axis=1))
    Q = np.where(live_n, np.exp(top - log_denom[:, None]), 0.0)
    q = np.where(av, np.exp(scaled - iv0[:, nest_of]), 0.0)

    mi = nest_of[chosen]
    lam_i = lambdas[mi]
    same = nest_of[None, :] == mi[:, None]
    dU = -Q[:, nest_of] * q + np.where(same, (1.0 - 1.0 / lam_i)[:, None] * q, 0.0)
    dU[rows, chosen] += 1.0 / lam_i
    g_beta = np.einsum("sj,sjd->sd", dU, X)

    ubar = np.zeros((S, n_nests))
    for k in range(n_nests):
        sel = nest_of == k
        ubar[:, k] = (q[:, sel] * U[:, sel]).sum(axis=1)
    g_lam = -Q * (iv0 - ubar / lambdas)
    ub_i = ubar[rows, mi]
    iv_i = iv0[rows, mi]
    u_i = U[rows, chosen]
    g_lam[rows, mi] += (ub_i - u_i) / lam_i**2 + iv_i - ub_i / lam_i
    return logp, g_beta, g_lam
