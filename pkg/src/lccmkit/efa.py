"""Exploratory factor analysis for attitudinal indicators.

Principal-axis factoring on the correlation matrix with iterated
communalities, Kaiser-normalised varimax rotation, salience-based item
retention and regression (Thurstone) factor scores.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataset import IndicatorMatrix, _write_text

SALIENCE = 0.32
COMMUNALITY_TOL = 1e-6
MAX_PAF_ITER = 100


class EfaError(ValueError):
    pass


class EfaConvergenceWarning(UserWarning):
    pass


@dataclass
class EfaResult:
    loadings: np.ndarray  # (K, F) rotated
    communalities: np.ndarray
    uniquenesses: np.ndarray
    item_names: list[str]
    factor_names: list[str]
    exclusion: list[str]  # "none" | "no-salient-loading" | "cross-loading"
    score_coefficients: np.ndarray  # (K, F), zero rows for excluded items
    means: np.ndarray
    sds: np.ndarray
    correlation: np.ndarray
    unrotated: np.ndarray
    threshold: float | None = None
    iterations: int = 0
    converged: bool = True
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def retained(self) -> np.ndarray:
        return np.array([e == "none" for e in self.exclusion])

    @property
    def n_factors(self) -> int:
        return self.loadings.shape[1]

    def suppressed_loadings(self) -> np.ndarray:
        """Loadings with sub-threshold cells set to NaN (all cells if no threshold applied)."""
        if self.threshold is None:
            return self.loadings.copy()
        return np.where(np.abs(self.loadings) >= self.threshold, self.loadings, np.nan)

    def loadings_csv(self, dest=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["item", *self.factor_names, "communality", "status"])
        L = self.suppressed_loadings()
        for k, name in enumerate(self.item_names):
            cells = ["" if np.isnan(v) else repr(float(v)) for v in L[k]]
            w.writerow([name, *cells, repr(float(self.communalities[k])), self.exclusion[k]])
        text = buf.getvalue()
        if dest is not None:
            _write_text(dest, text)
        return text

    def to_dict(self) -> dict:
        return {
            "items": self.item_names,
            "factors": self.factor_names,
            "loadings": self.loadings.tolist(),
            "communalities": self.communalities.tolist(),
            "uniquenesses": self.uniquenesses.tolist(),
            "exclusion": self.exclusion,
            "threshold": self.threshold,
            "score_coefficients": self.score_coefficients.tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
        }


def _complete(indicators) -> tuple[np.ndarray, list[str]]:
    if isinstance(indicators, IndicatorMatrix):
        X = np.where(indicators.missing_mask, np.nan, indicators.values)
        names = list(indicators.indicator_names)
    else:
        X = np.asarray(indicators, dtype=float)
        names = [f"x{k + 1}" for k in range(X.shape[1])]
    return X, names


def _check_singular(R: np.ndarray, names: Sequence[str], Z: np.ndarray) -> None:
    K = R.shape[0]
    sd = Z.std(axis=0)
    for k in range(K):
        if sd[k] == 0:
            raise EfaError(f"indicator {names[k]!r} has zero variance")
    for a in range(K):
        for b in range(a + 1, K):
            if abs(R[a, b]) > 1 - 1e-10:
                raise EfaError(f"singular correlation matrix: {names[a]!r} and {names[b]!r} are perfectly collinear")
    if np.linalg.matrix_rank(R) < K:
        a, b = np.unravel_index(np.argmax(np.abs(R - np.eye(K))), R.shape)
        raise EfaError(f"singular correlation matrix: linear dependence involving {names[a]!r} and {names[b]!r}")


def principal_axis(R: np.ndarray, n_factors: int, tol: float = COMMUNALITY_TOL, max_iter: int = MAX_PAF_ITER):
    """Iterated principal-axis extraction; returns (loadings, iterations, converged)."""
    h = 1.0 - 1.0 / np.diag(np.linalg.inv(R))  # squared multiple correlations
    converged = False
    it = 0
    L = np.zeros((R.shape[0], n_factors))
    for it in range(1, max_iter + 1):
        Rr = R.copy()
        np.fill_diagonal(Rr, h)
        vals, vecs = np.linalg.eigh(Rr)
        idx = np.argsort(vals)[::-1][:n_factors]
        L = vecs[:, idx] * np.sqrt(np.clip(vals[idx], 0.0, None))
        h_new = (L**2).sum(axis=1)
        done = np.max(np.abs(h_new - h)) < tol
        h = h_new
        if done:
            converged = True
            break
    return L, it, converged


def varimax(L: np.ndarray, tol: float = 1e-12, max_sweeps: int = 500) -> np.ndarray:
    """Kaiser-normalised varimax by pairwise planar rotations; returns the rotated loadings."""
    K, F = L.shape
    if F < 2:
        return L.copy()
    norms = np.sqrt((L**2).sum(axis=1))
    norms = np.where(norms > 0, norms, 1.0)
    A = L / norms[:, None]
    for _ in range(max_sweeps):
        largest = 0.0
        for i in range(F - 1):
            for j in range(i + 1, F):
                x, y = A[:, i], A[:, j]
                u, v = x * x - y * y, 2.0 * x * y
                su, sv = u.sum(), v.sum()
                num = 2.0 * (u @ v) - 2.0 * su * sv / K
                den = (u @ u - v @ v) - (su * su - sv * sv) / K
                phi = 0.25 * np.arctan2(num, den)
                largest = max(largest, abs(phi))
                c, s = np.cos(phi), np.sin(phi)
                A[:, i], A[:, j] = c * x + s * y, -s * x + c * y
        if largest < tol:
            break
    return A * norms[:, None]


def _align_signs(L: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(L), axis=0)
    signs = np.sign(L[idx, np.arange(L.shape[1])])
    return L * np.where(signs == 0, 1.0, signs)


def _score_coefficients(R: np.ndarray, L: np.ndarray, keep: np.ndarray) -> np.ndarray:
    B = np.zeros_like(L)
    if keep.any():
        sub = R[np.ix_(keep, keep)]
        try:
            B[keep] = np.linalg.solve(sub, L[keep])
        except np.linalg.LinAlgError as exc:
            raise EfaError("singular correlation matrix among retained items") from exc
    return B


def fit_efa(indicators, n_factors: int | str = "auto") -> EfaResult:
    """Principal-axis EFA with varimax rotation on complete cases.

    Parameters
    ----------
    indicators : IndicatorMatrix or (N, K) array
    n_factors : number of factors, or "auto" for the count of correlation
        eigenvalues above one
    """
    X, names = _complete(indicators)
    Z = X[~np.isnan(X).any(axis=1)]
    N, K = Z.shape
    if N <= K:
        raise EfaError("need more complete cases than indicators")
    means, sds = Z.mean(axis=0), Z.std(axis=0, ddof=1)
    R = np.corrcoef(Z, rowvar=False) if np.all(sds > 0) else np.eye(K)
    _check_singular(R, names, Z)
    eig = np.sort(np.linalg.eigvalsh(R))[::-1]
    F = max(1, int(np.sum(eig > 1.0))) if n_factors == "auto" else int(n_factors)
    if not 1 <= F <= K:
        raise EfaError(f"n_factors must be between 1 and {K}")

    L0, iters, ok = principal_axis(R, F)
    if not ok:
        warnings.warn("communalities did not converge; returning the last iterate", EfaConvergenceWarning, stacklevel=2)
    L = _align_signs(varimax(L0))
    comm = (L**2).sum(axis=1)
    keep = np.ones(K, dtype=bool)
    return EfaResult(
        loadings=L,
        communalities=comm,
        uniquenesses=1.0 - comm,
        item_names=names,
        factor_names=[f"factor_{f + 1}" for f in range(F)],
        exclusion=["none"] * K,
        score_coefficients=_score_coefficients(R, L, keep),
        means=means,
        sds=sds,
        correlation=R,
        unrotated=L0,
        iterations=iters,
        converged=ok,
        eigenvalues=eig,
    )


def apply_retention(result: EfaResult, salience_threshold: float = SALIENCE) -> EfaResult:
    """Flag items without a single salient loading and recompute score weights."""
    salient = np.abs(result.loadings) >= salience_threshold
    count = salient.sum(axis=1)
    exclusion = ["none" if n == 1 else ("no-salient-loading" if n == 0 else "cross-loading") for n in count]
    keep = np.array([e == "none" for e in exclusion])
    if not keep.any():
        raise EfaError("every item was excluded at this salience threshold")
    return replace(
        result,
        exclusion=exclusion,
        threshold=salience_threshold,
        score_coefficients=_score_coefficients(result.correlation, result.loadings, keep),
    )


def factor_scores(result: EfaResult, indicators, unit_variance: bool = False) -> np.ndarray:
    """Regression-method scores on the retained items; NaN rows where those items are missing."""
    X, names = _complete(indicators)
    if list(names) != list(result.item_names) and isinstance(indicators, IndicatorMatrix):
        X = np.column_stack([X[:, names.index(n)] for n in result.item_names])
    keep = result.retained
    Z = (X - result.means) / result.sds
    S = np.full((X.shape[0], result.n_factors), np.nan)
    ok = ~np.isnan(Z[:, keep]).any(axis=1)
    S[ok] = Z[np.ix_(ok, keep)] @ result.score_coefficients[keep]
    if unit_variance:
        sd = np.nanstd(S, axis=0, ddof=1)
        S = S / np.where(sd > 0, sd, 1.0)
    return S


def scores_csv(respondent_ids, scores: np.ndarray, dest=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["resp_id", *[f"factor_{f + 1}" for f in range(scores.shape[1])]])
    for rid, row in zip(respondent_ids, scores):
        w.writerow([rid, *["" if np.isnan(v) else repr(float(v)) for v in row]])
    text = buf.getvalue()
    if dest is not None:
        _write_text(dest, text)
    return text
