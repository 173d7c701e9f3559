"""Fractional multinomial logit (quasi maximum likelihood).

Regresses a matrix of fractions (rows summing to one, typically posterior
class-membership probabilities) on respondent covariates with a
multinomial-logit mean function. The same solver is the membership-model
M-step of the latent class EM.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats
from scipy.special import logsumexp

SEPARATION_NORM = 50.0


class FmnlError(ValueError):
    pass


def _as_probs(posterior) -> np.ndarray:
    Y = np.asarray(getattr(posterior, "probs", posterior), dtype=float)
    if Y.ndim != 2:
        raise FmnlError("posterior must be an N x C matrix")
    return Y


def with_intercept(covariates, n: int | None = None) -> np.ndarray:
    """Prepend a column of ones; ``covariates`` may be None or (N, 0)."""
    if covariates is None:
        return np.ones((n, 1))
    Z = np.asarray(covariates, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if not np.all(np.isfinite(Z)):
        raise FmnlError("non-finite covariate")
    return np.hstack([np.ones((Z.shape[0], 1)), Z])


def full_gamma(gamma, n_classes: int, reference: int = 0) -> np.ndarray:
    """Expand a (C-1, 1+P) coefficient block to (C, 1+P) with a zero reference row."""
    g = np.asarray(gamma, dtype=float)
    if g.shape[0] == n_classes:
        return g
    if g.shape[0] != n_classes - 1:
        raise FmnlError("gamma has the wrong number of rows")
    return np.insert(g, reference, 0.0, axis=0)


def log_shares(Z1: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    eta = Z1 @ gamma.T
    return eta - logsumexp(eta, axis=1, keepdims=True)


def predict_shares(gamma, covariates, n_classes: int | None = None, reference: int = 0) -> np.ndarray:
    """N x C predicted class shares (row-wise softmax of the linear index).

    ``gamma`` is (C, 1+P), or (C-1, 1+P) when ``n_classes`` is given.
    """
    g = np.asarray(gamma, dtype=float)
    g = full_gamma(g, n_classes or g.shape[0], reference)
    Z = np.asarray(covariates, dtype=float)
    Z = Z[:, None] if Z.ndim == 1 else Z
    return np.exp(log_shares(with_intercept(Z), g))


def fmnl_quasi_loglik(posterior, covariates, gamma, reference: int = 0) -> float:
    """Sum over respondents and classes of posterior * log predicted share."""
    Y = _as_probs(posterior)
    Z1 = with_intercept(covariates, Y.shape[0])
    g = full_gamma(gamma, Y.shape[1], reference)
    return float(np.sum(Y * log_shares(Z1, g)))


def fmnl_gradient(posterior, covariates, gamma, reference: int = 0) -> np.ndarray:
    """Gradient w.r.t. the non-reference rows of gamma, shape (C-1, 1+P)."""
    Y = _as_probs(posterior)
    Z1 = with_intercept(covariates, Y.shape[0])
    g = full_gamma(gamma, Y.shape[1], reference)
    P = np.exp(log_shares(Z1, g))
    G = (Y - P).T @ Z1
    return np.delete(G, reference, axis=0)


# --------------------------------------------------------------------------
# Solver
# --------------------------------------------------------------------------


@dataclass
class _Fit:
    gamma: np.ndarray
    quasi_loglik: float
    grad_norm: float
    iterations: int
    status: str


def _objective(Y, Z1, reference, weights):
    C = Y.shape[1]
    Pz = Z1.shape[1]
    Yw = Y if weights is None else Y * weights[:, None]

    def unpack(x):
        return np.insert(x.reshape(C - 1, Pz), reference, 0.0, axis=0)

    def f(x):
        ls = log_shares(Z1, unpack(x))
        G = (Yw - np.exp(ls) * Yw.sum(axis=1, keepdims=True)).T @ Z1
        return -float(np.sum(Yw * ls)), -np.delete(G, reference, axis=0).ravel()

    def hess(x):
        P = np.exp(log_shares(Z1, unpack(x)))
        mass = Yw.sum(axis=1)
        Pf = np.delete(P, reference, axis=1)
        W = Pf[:, :, None] * (np.eye(C - 1)[None] - Pf[:, None, :]) * mass[:, None, None]
        H = np.einsum("nab,nk,nl->akbl", W, Z1, Z1)
        return H.reshape((C - 1) * Pz, (C - 1) * Pz)

    return f, hess, unpack


def fit_fractional_logit(
    Y,
    Z1,
    reference: int = 0,
    start=None,
    weights=None,
    gtol: float = 1e-8,
    max_iter: int = 500,
) -> _Fit:
    """Maximise the fractional-logit quasi-likelihood.

    Quasi-Newton (L-BFGS) from ``start`` (zeros by default), then Newton
    steps on the concave objective until the gradient norm is below ``gtol``.
    """
    Y = np.asarray(Y, dtype=float)
    C = Y.shape[1]
    Pz = Z1.shape[1]
    f, hess, unpack = _objective(Y, Z1, reference, weights)
    x0 = np.zeros((C - 1) * Pz) if start is None else np.delete(
        full_gamma(start, C, reference), reference, axis=0
    ).ravel()
    res = optimize.minimize(
        f, x0, jac=True, method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": gtol, "ftol": 1e-15, "maxcor": 30},
    )
    x = res.x
    fx, g = f(x)
    iters = int(res.nit)
    status = "converged"
    for _ in range(50):
        if np.linalg.norm(g) < gtol or np.linalg.norm(x) > SEPARATION_NORM:
            break
        H = hess(x)
        try:
            step = np.linalg.solve(H + 1e-12 * np.eye(H.shape[0]), g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            xn = x - t * step
            fn, gn = f(xn)
            if fn <= fx + 1e-12 * abs(fx):
                break
            t *= 0.5
        else:
            break
        x, fx, g = xn, fn, gn
        iters += 1
    gnorm = float(np.linalg.norm(g))
    if np.linalg.norm(x) > SEPARATION_NORM:
        status = "diverged: separation suspected"
    elif gnorm >= gtol:
        status = "not converged"
    return _Fit(unpack(x), -fx, gnorm, iters, status)


# --------------------------------------------------------------------------
# Public estimator
# --------------------------------------------------------------------------


@dataclass
class FmnlResult:
    gamma: np.ndarray  # (C, 1+P), reference row zero
    quasi_loglik: float
    robust_se: np.ndarray  # (C, 1+P), NaN on reference row
    p_values: np.ndarray
    covariate_names: list[str]
    reference: int
    n_used: int
    convergence: dict = field(default_factory=dict)
    covariance: np.ndarray | None = None

    @property
    def n_classes(self) -> int:
        return self.gamma.shape[0]

    @property
    def row_names(self) -> list[str]:
        return ["constant", *self.covariate_names]

    @property
    def t_stats(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.gamma / self.robust_se

    def to_dict(self) -> dict:
        return {
            "reference_class": self.reference + 1,
            "covariates": self.row_names,
            "gamma": self.gamma.tolist(),
            "robust_se": [[None if not np.isfinite(v) else float(v) for v in r] for r in self.robust_se],
            "p_values": [[None if not np.isfinite(v) else float(v) for v in r] for r in self.p_values],
            "quasi_loglik": self.quasi_loglik,
            "n_used": self.n_used,
            "convergence": self.convergence,
        }


def sandwich_covariance(Y, Z1, gamma, reference=0):
    """Robust A^-1 B A^-1 covariance for the non-reference coefficients."""
    Y = np.asarray(Y, dtype=float)
    _, hess, _ = _objective(Y, Z1, reference, None)
    x = np.delete(gamma, reference, axis=0).ravel()
    A = hess(x)
    P = np.exp(log_shares(Z1, gamma))
    R = np.delete(Y - P, reference, axis=1)
    scores = (R[:, :, None] * Z1[:, None, :]).reshape(Y.shape[0], -1)
    B = scores.T @ scores
    Ainv = np.linalg.pinv(A)
    cov = Ainv @ B @ Ainv
    return 0.5 * (cov + cov.T), A


def estimate_fmnl(
    posterior,
    covariates=None,
    covariate_names=None,
    reference: int = 0,
    gtol: float = 1e-8,
    max_iter: int = 500,
) -> FmnlResult:
    """Fit the fractional logit of posterior shares on covariates.

    Rows with a missing covariate are dropped (complete cases).

    Parameters
    ----------
    posterior : PosteriorMatrix or (N, C) array
    covariates : (N, P) array, IndicatorMatrix, or None for intercept only
    covariate_names : names for the P columns
    reference : class whose coefficients are normalised to zero
    """
    Y = _as_probs(posterior)
    N, C = Y.shape
    if hasattr(covariates, "indicator_names"):
        covariate_names = list(covariates.indicator_names) if covariate_names is None else covariate_names
        covariates = covariates.values
    if covariates is None:
        Z = np.zeros((N, 0))
    else:
        Z = np.asarray(covariates, dtype=float)
        Z = Z[:, None] if Z.ndim == 1 else Z
    if Z.shape[0] != N:
        raise FmnlError("posterior and covariates are not row-aligned")
    names = list(covariate_names) if covariate_names is not None else [f"x{k + 1}" for k in range(Z.shape[1])]
    keep = ~np.isnan(Z).any(axis=1)
    if np.isinf(Z[keep]).any():
        raise FmnlError("non-finite covariate")
    Yk, Zk = Y[keep], Z[keep]
    Z1 = with_intercept(Zk)
    if Yk.shape[0] <= (C - 1) * Z1.shape[1]:
        raise FmnlError("too few complete observations for the number of coefficients")

    fit = fit_fractional_logit(Yk, Z1, reference, gtol=gtol, max_iter=max_iter)
    cov, _ = sandwich_covariance(Yk, Z1, fit.gamma, reference)
    se_free = np.sqrt(np.clip(np.diag(cov), 0.0, None)).reshape(C - 1, Z1.shape[1])
    se = np.insert(se_free, reference, np.nan, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = fit.gamma / se
    p = 2.0 * stats.norm.sf(np.abs(z))
    p[reference] = np.nan
    return FmnlResult(
        gamma=fit.gamma,
        quasi_loglik=fit.quasi_loglik,
        robust_se=se,
        p_values=p,
        covariate_names=names,
        reference=reference,
        n_used=int(keep.sum()),
        convergence={"iterations": fit.iterations, "grad_norm": fit.grad_norm, "status": fit.status},
        covariance=cov,
    )
