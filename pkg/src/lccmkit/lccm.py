"""Latent class choice model: likelihood, EM + quasi-Newton estimation, inference.

The marginal log-likelihood is

    sum_n log sum_c P(c | z_n) prod_t P(y_nt | c)

with a multinomial-logit membership model and an MNL or nested-logit kernel
per class. Everything is evaluated in log space.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import optimize, stats
from scipy.special import logsumexp

from . import _backend
from .dataset import ChoiceDataset, RespondentRecord
from .fmnl import fit_fractional_logit, with_intercept
from .kernels import (
    KernelError,
    NestStructure,
    UtilitySpec,
    mnl_log_probs,
    nl_log_probs,
)

log = logging.getLogger(__name__)

BOUND_THRESHOLD = 1e-4
SAME_LL_TOL = 1e-4
DEGENERATE_SHARE = 1e-6


class EstimationError(ValueError):
    pass


# --------------------------------------------------------------------------
# Specification and parameters
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    n_classes: int
    utility: UtilitySpec
    nests: NestStructure | None = None
    membership_covariates: tuple[str, ...] = ()
    reference_class: int = 0

    def __post_init__(self):
        object.__setattr__(self, "membership_covariates", tuple(self.membership_covariates))
        if self.n_classes < 1:
            raise EstimationError("n_classes must be >= 1")
        if not 0 <= self.reference_class < self.n_classes:
            raise EstimationError("reference_class out of range")

    @property
    def kernel(self) -> str:
        return "NL" if self.nests is not None else "MNL"

    @property
    def n_nests(self) -> int:
        return self.nests.n_nests if self.nests is not None else 0

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "kernel": self.kernel,
            "nests": self.nests.to_dict() if self.nests is not None else None,
            "utility": self.utility.to_dict(),
            "membership_covariates": list(self.membership_covariates),
            "reference_class": self.reference_class,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        nests = d.get("nests")
        return cls(
            n_classes=int(d["n_classes"]),
            utility=UtilitySpec.from_dict(d["utility"]),
            nests=NestStructure.from_dict(nests) if nests else None,
            membership_covariates=tuple(d.get("membership_covariates", ())),
            reference_class=int(d.get("reference_class", 0)),
        )


@dataclass
class Params:
    """Model parameters in natural units.

    alpha : (C, 1+P) membership constants and covariate weights; the
        reference row is zero.
    beta : (C, D) class-specific utility coefficients.
    lambdas : (C, M) nest parameters, or None for MNL.
    bound_fixed : (C, D) entries pinned to zero after reaching a sign bound.
    """

    alpha: np.ndarray
    beta: np.ndarray
    lambdas: np.ndarray | None = None
    bound_fixed: np.ndarray | None = None

    def __post_init__(self):
        self.alpha = np.atleast_2d(np.asarray(self.alpha, dtype=float))
        self.beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        if self.lambdas is not None:
            self.lambdas = np.atleast_2d(np.asarray(self.lambdas, dtype=float))
        if self.bound_fixed is None:
            self.bound_fixed = np.zeros(self.beta.shape, dtype=bool)
        else:
            self.bound_fixed = np.asarray(self.bound_fixed, dtype=bool)

    @property
    def n_classes(self) -> int:
        return self.beta.shape[0]

    def copy(self) -> Params:
        return Params(
            self.alpha.copy(),
            self.beta.copy(),
            None if self.lambdas is None else self.lambdas.copy(),
            self.bound_fixed.copy(),
        )

    def permuted(self, order: Sequence[int], reference: int = 0) -> Params:
        """Reorder classes (new class k = old class ``order[k]``), re-reference alpha."""
        order = list(order)
        alpha = self.alpha[order]
        alpha = alpha - alpha[reference]
        return Params(
            alpha,
            self.beta[order],
            None if self.lambdas is None else self.lambdas[order],
            self.bound_fixed[order],
        )

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "lambdas": None if self.lambdas is None else self.lambdas.tolist(),
            "bound_fixed": self.bound_fixed.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> Params:
        return cls(d["alpha"], d["beta"], d.get("lambdas"), d.get("bound_fixed"))


def zero_params(spec: ModelSpec) -> Params:
    C, D = spec.n_classes, spec.utility.n_terms
    beta = np.zeros((C, D))
    for d, con in enumerate(spec.utility.constraints):
        if con.is_fixed:
            beta[:, d] = con.value
    lambdas = None
    if spec.nests is not None:
        lambdas = np.ones((C, spec.n_nests))
        for m, con in enumerate(spec.nests.iv_constraints):
            if con.is_fixed:
                lambdas[:, m] = con.value
    return Params(np.zeros((C, 1 + len(spec.membership_covariates))), beta, lambdas)


# --------------------------------------------------------------------------
# Parameter layout: natural vector <-> Params, and the optimisation transform
# --------------------------------------------------------------------------

_ID, _POS, _NEG, _LAM = 0, 1, 2, 3


class ParamLayout:
    """Ordered list of estimated entries (alpha, then beta, then lambda).

    Optimisation works on an unconstrained vector: sign-constrained
    coefficients as +/- exp(theta), nest parameters as logistic(theta).
    """

    def __init__(
        self,
        spec: ModelSpec,
        bound_fixed: np.ndarray,
        alpha: bool = True,
        kernel_classes: Sequence[int] | None = None,
    ):
        C = spec.n_classes
        kernel_classes = range(C) if kernel_classes is None else kernel_classes
        self.entries: list[tuple[str, int, int]] = []
        self.kinds: list[int] = []
        self.names: list[str] = []
        cov_names = ["const", *spec.membership_covariates]
        if alpha:
            for c in range(C):
                if c == spec.reference_class:
                    continue
                for k, nm in enumerate(cov_names):
                    self.entries.append(("alpha", c, k))
                    self.kinds.append(_ID)
                    self.names.append(f"class{c + 1}.membership.{nm}")
        cons = spec.utility.constraints
        term_names = spec.utility.names
        for c in kernel_classes:
            for d, con in enumerate(cons):
                if con.is_fixed or bound_fixed[c, d]:
                    continue
                self.entries.append(("beta", c, d))
                kind = {"nonnegative": _POS, "nonpositive": _NEG}.get(con.kind, _ID)
                self.kinds.append(kind)
                self.names.append(f"class{c + 1}.{term_names[d]}")
        if spec.nests is not None:
            for c in kernel_classes:
                for m in spec.nests.free_nests:
                    self.entries.append(("lambda", c, m))
                    self.kinds.append(_LAM)
                    self.names.append(f"class{c + 1}.IV.nest{m + 1}")
        self.kinds_arr = np.array(self.kinds, dtype=int)

    @property
    def n(self) -> int:
        return len(self.entries)

    def pack(self, params: Params) -> np.ndarray:
        out = np.empty(self.n)
        for i, (block, c, k) in enumerate(self.entries):
            out[i] = {"alpha": params.alpha, "beta": params.beta, "lambda": params.lambdas}[block][c, k]
        return out

    def unpack(self, vec: np.ndarray, base: Params) -> Params:
        p = base.copy()
        for v, (block, c, k) in zip(vec, self.entries):
            {"alpha": p.alpha, "beta": p.beta, "lambda": p.lambdas}[block][c, k] = v
        return p

    def pack_grad(self, grads: dict) -> np.ndarray:
        return np.array([grads[block][c, k] for block, c, k in self.entries])

    def to_theta(self, nat: np.ndarray) -> np.ndarray:
        th = nat.astype(float).copy()
        k = self.kinds_arr
        with np.errstate(divide="ignore"):
            th[k == _POS] = np.log(np.maximum(nat[k == _POS], 1e-300))
            th[k == _NEG] = np.log(np.maximum(-nat[k == _NEG], 1e-300))
            lam = np.clip(nat[k == _LAM], 1e-12, 1 - 1e-12)
            th[k == _LAM] = np.log(lam) - np.log1p(-lam)
        return th

    def from_theta(self, th: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Natural vector and d(natural)/d(theta)."""
        nat = th.astype(float).copy()
        jac = np.ones_like(nat)
        k = self.kinds_arr
        e = np.exp(np.clip(th[k == _POS], -700, 700))
        nat[k == _POS], jac[k == _POS] = e, e
        e = np.exp(np.clip(th[k == _NEG], -700, 700))
        nat[k == _NEG], jac[k == _NEG] = -e, -e
        lam = 1.0 / (1.0 + np.exp(-th[k == _LAM]))
        nat[k == _LAM], jac[k == _LAM] = lam, lam * (1.0 - lam)
        return nat, jac


# --------------------------------------------------------------------------
# Likelihood machinery
# --------------------------------------------------------------------------


class _Problem:
    """Dataset arrays prepared for one model specification."""

    def __init__(self, dataset: ChoiceDataset, spec: ModelSpec):
        arr = dataset.arrays
        self.spec = spec
        self.X = spec.utility.design(dataset)
        if not np.all(np.isfinite(self.X)):
            raise EstimationError("non-finite attribute value")
        self.avail = arr.avail
        self.chosen = arr.chosen
        self.resp_index = arr.resp_index
        self.N = arr.n_respondents
        self.S = arr.n_situations
        self.nest_of = spec.nests.nest_index(dataset.alternative_ids) if spec.nests is not None else None
        Z = dataset.covariate_matrix(spec.membership_covariates)
        if not np.all(np.isfinite(Z)):
            raise EstimationError(
                "membership covariates missing or non-finite for some respondents; "
                "restrict the data to complete cases first"
            )
        self.Z1 = with_intercept(Z)

    def situation_terms(self, params: Params, c: int, want_grad: bool):
        beta = params.beta[c]
        if not np.all(np.isfinite(beta)):
            raise EstimationError("non-finite utility coefficient")
        if self.nest_of is None:
            logp, gb = _backend.mnl_batch(self.X, self.avail, self.chosen, beta, want_grad)
            return logp, gb, None
        return _backend.nl_batch(
            self.X, self.avail, self.chosen, self.nest_of, params.lambdas[c], beta, want_grad
        )

    def per_respondent(self, values: np.ndarray) -> np.ndarray:
        return np.bincount(self.resp_index, weights=values, minlength=self.N)

    def class_loglik(self, params: Params, want_grad: bool = False):
        C = self.spec.n_classes
        L = np.empty((self.N, C))
        grads = []
        for c in range(C):
            logp, gb, gl = self.situation_terms(params, c, want_grad)
            L[:, c] = self.per_respondent(logp)
            grads.append((gb, gl))
        return L, grads

    def log_priors(self, alpha: np.ndarray) -> np.ndarray:
        eta = self.Z1 @ alpha.T
        return eta - logsumexp(eta, axis=1, keepdims=True)

    def evaluate(self, params: Params, want_grad: bool = False):
        """Log-likelihood, posteriors, and (optionally) full natural gradients."""
        L, cgrads = self.class_loglik(params, want_grad)
        lp = self.log_priors(params.alpha)
        joint = lp + L
        per_resp = logsumexp(joint, axis=1)
        ll = float(np.sum(per_resp))
        h = np.exp(joint - per_resp[:, None])
        if not want_grad:
            return ll, h, None
        grads = {"alpha": (h - np.exp(lp)).T @ self.Z1}
        gbeta = np.zeros_like(params.beta)
        glam = None if params.lambdas is None else np.zeros_like(params.lambdas)
        for c, (gb, gl) in enumerate(cgrads):
            w = h[self.resp_index, c]
            gbeta[c] = w @ gb
            if glam is not None:
                glam[c] = w @ gl
        grads["beta"] = gbeta
        grads["lambda"] = glam
        return ll, h, grads

    def null_loglik(self) -> float:
        return float(-np.sum(np.log(self.avail.sum(axis=1))))


def membership_probs(z, alpha) -> np.ndarray:
    """Prior class shares for one respondent: softmax of alpha @ [1, z]."""
    alpha = np.atleast_2d(np.asarray(alpha, dtype=float))
    z1 = np.concatenate([[1.0], np.atleast_1d(np.asarray(z, dtype=float))]) if z is not None else np.ones(1)
    if alpha.shape[1] != z1.size:
        raise EstimationError("alpha columns do not match 1 + number of covariates")
    eta = alpha @ z1
    return np.exp(eta - logsumexp(eta))


def _situation_design(utility: UtilitySpec, attrs: np.ndarray, attribute_names, alternative_ids):
    cols = [attrs[:, list(attribute_names).index(n)] for n, _ in utility.terms]
    for alt, _ in utility.constants:
        dummy = np.zeros(attrs.shape[0])
        dummy[list(alternative_ids).index(alt)] = 1.0
        cols.append(dummy)
    return np.stack(cols, axis=1) if cols else np.zeros((attrs.shape[0], 0))


def class_sequence_loglik(
    respondent: RespondentRecord,
    beta_c,
    utility: UtilitySpec,
    attribute_names: Sequence[str],
    alternative_ids: Sequence[str],
    nests: NestStructure | None = None,
    lambdas=None,
) -> float:
    """Sum over the respondent's situations of log P(chosen | class)."""
    beta_c = np.asarray(beta_c, dtype=float)
    total = 0.0
    for s in respondent.situations:
        if not s.available[s.chosen]:
            raise KernelError("chosen alternative is unavailable")
        u = _situation_design(utility, s.attributes, attribute_names, alternative_ids) @ beta_c
        if nests is None:
            lp = mnl_log_probs(u, s.available)
        else:
            lp = nl_log_probs(u, s.available, nests, lambdas, alternative_ids)
        total += lp[s.chosen]
    return float(total)


def marginal_loglik(dataset: ChoiceDataset, params: Params, spec: ModelSpec) -> float:
    ll, _, _ = _Problem(dataset, spec).evaluate(params)
    return ll


def marginal_loglik_and_gradient(dataset: ChoiceDataset, params: Params, spec: ModelSpec):
    """Log-likelihood and its gradient w.r.t. every estimated entry.

    Returns ``(ll, grad, names)``; ``grad`` follows :class:`ParamLayout` order.
    """
    prob = _Problem(dataset, spec)
    layout = ParamLayout(spec, params.bound_fixed)
    ll, _, grads = prob.evaluate(params, want_grad=True)
    return ll, layout.pack_grad(grads), layout.names


def respondent_loglik(dataset: ChoiceDataset, params: Params, spec: ModelSpec) -> np.ndarray:
    """Per-respondent marginal log-likelihood contributions (N,)."""
    prob = _Problem(dataset, spec)
    L, _ = prob.class_loglik(params)
    return logsumexp(prob.log_priors(params.alpha) + L, axis=1)


# --------------------------------------------------------------------------
# Estimation
# --------------------------------------------------------------------------


@dataclass
class EstimateOptions:
    """Estimator settings.

    ``order_by`` chooses the final class labelling: ``{"by": "share"}``
    (descending prior share, the default), ``{"by": "cwd", "attribute": a,
    "numeraire": w}`` (ascending coefficient ratio), ``{"by": "match",
    "beta": array}`` (closest to a reference coefficient matrix), or
    ``{"by": "none"}``.
    """

    n_starts: int = 20
    seed: int = 0
    tol: float = 1e-8
    max_iter: int = 500
    polish_iter: int = 100
    threads: int = 1
    order_by: dict | None = None
    compute_se: bool = True
    start: Params | None = None
    mstep_iter: int = 50

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("n_starts", "seed", "tol", "max_iter", "polish_iter", "mstep_iter")}
        d["order_by"] = _jsonable_order(self.order_by)
        return d


def _jsonable_order(rule):
    if rule is None:
        return {"by": "share"}
    out = dict(rule)
    if "beta" in out:
        out["beta"] = np.asarray(out["beta"]).tolist()
    return out


@dataclass
class _StartFit:
    params: Params
    loglik: float
    em_history: list[float]
    em_iterations: int
    em_converged: bool
    polish_iterations: int
    grad_norm: float
    polish_ok: bool


def random_start(spec: ModelSpec, rng: np.random.Generator) -> Params:
    p = zero_params(spec)
    C = spec.n_classes
    for c in range(C):
        if c != spec.reference_class:
            p.alpha[c] = rng.uniform(-1.0, 1.0, p.alpha.shape[1])
        for d, con in enumerate(spec.utility.constraints):
            if con.is_fixed:
                continue
            if con.is_signed:
                p.beta[c, d] = con.sign * rng.uniform(0.01, 0.5)
            else:
                p.beta[c, d] = rng.uniform(-0.5, 0.5)
        if spec.nests is not None:
            for m in spec.nests.free_nests:
                p.lambdas[c, m] = rng.uniform(0.5, 0.95)
    return p


def _mstep_class(prob: _Problem, params: Params, c: int, w: np.ndarray, max_iter: int) -> Params:
    """Weighted kernel fit for one class, warm-started; never worsens the objective."""
    layout = ParamLayout(prob.spec, params.bound_fixed, alpha=False, kernel_classes=[c])
    if layout.n == 0:
        return params
    ws = w[prob.resp_index]

    def f(th):
        nat, jac = layout.from_theta(th)
        p = layout.unpack(nat, params)
        logp, gb, gl = prob.situation_terms(p, c, True)
        grads = {"beta": np.zeros_like(p.beta), "lambda": None if p.lambdas is None else np.zeros_like(p.lambdas)}
        grads["beta"][c] = ws @ gb
        if gl is not None:
            grads["lambda"][c] = ws @ gl
        return -float(ws @ logp), -layout.pack_grad(grads) * jac

    th0 = layout.to_theta(layout.pack(params))
    f0, _ = f(th0)
    res = optimize.minimize(f, th0, jac=True, method="L-BFGS-B",
                            options={"maxiter": max_iter, "ftol": 1e-13, "gtol": 1e-9})
    if not np.isfinite(res.fun) or res.fun > f0:
        return params
    nat, _ = layout.from_theta(res.x)
    return layout.unpack(nat, params)


def _mstep_membership(prob: _Problem, params: Params, h: np.ndarray) -> Params:
    if prob.spec.n_classes == 1:
        return params

    def q(alpha):
        return float(np.sum(h * prob.log_priors(alpha)))

    fit = fit_fractional_logit(h, prob.Z1, prob.spec.reference_class, start=params.alpha, gtol=1e-9)
    if not np.all(np.isfinite(fit.gamma)) or q(fit.gamma) < q(params.alpha):
        return params
    p = params.copy()
    p.alpha = fit.gamma
    return p


def _polish(prob: _Problem, params: Params, max_iter: int):
    layout = ParamLayout(prob.spec, params.bound_fixed)
    if layout.n == 0 or max_iter <= 0:
        ll, _, g = prob.evaluate(params, want_grad=True)
        gn = float(np.linalg.norm(layout.pack_grad(g))) if layout.n else 0.0
        return params, ll, 0, gn, max_iter > 0

    def f(th):
        nat, jac = layout.from_theta(th)
        ll, _, grads = prob.evaluate(layout.unpack(nat, params), want_grad=True)
        return -ll, -layout.pack_grad(grads) * jac

    th0 = layout.to_theta(layout.pack(params))
    f0, _ = f(th0)
    res = optimize.minimize(f, th0, jac=True, method="L-BFGS-B",
                            options={"maxiter": max_iter, "ftol": 1e-15, "gtol": 1e-7, "maxcor": 30})
    th = res.x if np.isfinite(res.fun) and res.fun <= f0 else th0
    nat, _ = layout.from_theta(th)
    out = layout.unpack(nat, params)
    ll, _, grads = prob.evaluate(out, want_grad=True)
    gn = float(np.linalg.norm(layout.pack_grad(grads)))
    ok = bool(res.success) or gn < 1e-4
    return out, ll, int(res.nit), gn, ok


def _apply_bounds(prob: _Problem, params: Params) -> tuple[Params, bool]:
    """Pin sign-constrained coefficients that collapsed onto zero."""
    changed = False
    p = params.copy()
    for d, con in enumerate(prob.spec.utility.constraints):
        if not con.is_signed:
            continue
        for c in range(prob.spec.n_classes):
            if not p.bound_fixed[c, d] and abs(p.beta[c, d]) < BOUND_THRESHOLD:
                p.bound_fixed[c, d] = True
                p.beta[c, d] = 0.0
                changed = True
    return p, changed


def _fit_from(prob: _Problem, start: Params, opts: EstimateOptions) -> _StartFit:
    params = start.copy()
    ll, h, _ = prob.evaluate(params)
    history = [ll]
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        for c in range(prob.spec.n_classes):
            params = _mstep_class(prob, params, c, h[:, c], opts.mstep_iter)
        params = _mstep_membership(prob, params, h)
        ll_new, h, _ = prob.evaluate(params)
        history.append(ll_new)
        if abs(ll_new - ll) <= opts.tol * abs(ll):
            ll = ll_new
            converged = True
            break
        ll = ll_new
    if opts.max_iter <= 0:
        it = 0

    polish_its = 0
    gn = math.inf
    ok = False
    if opts.max_iter > 0:
        params, ll, polish_its, gn, ok = _polish(prob, params, opts.polish_iter)
        for _ in range(prob.spec.utility.n_terms * prob.spec.n_classes):
            params, changed = _apply_bounds(prob, params)
            if not changed:
                break
            params, ll, k, gn, ok = _polish(prob, params, opts.polish_iter)
            polish_its += k
    return _StartFit(params, ll, history, it, converged, polish_its, gn, ok)


def _class_order(prob: _Problem, params: Params, rule: dict | None) -> list[int]:
    C = prob.spec.n_classes
    rule = rule or {"by": "share"}
    by = rule.get("by", "share")
    if by == "none":
        return list(range(C))
    if by == "share":
        shares = np.exp(prob.log_priors(params.alpha)).mean(axis=0)
        return sorted(range(C), key=lambda c: (-round(shares[c], 12), c))
    if by == "cwd":
        names = prob.spec.utility.names
        a, w = names.index(rule["attribute"]), names.index(rule["numeraire"])

        def key(c):
            bw = params.beta[c, w]
            if bw <= 0 or params.bound_fixed[c, w]:
                return (1, 0.0, c)
            return (0, params.beta[c, a] / bw, c)

        return sorted(range(C), key=key)
    if by == "match":
        from scipy.optimize import linear_sum_assignment

        target = np.asarray(rule["beta"], dtype=float)
        cost = ((target[:, None, :] - params.beta[None, :, :]) ** 2).sum(axis=2)
        rows, cols = linear_sum_assignment(cost)
        return [int(cols[r]) for r in np.argsort(rows)]
    raise EstimationError(f"unknown ordering rule {by!r}")


@dataclass
class EstimationResult:
    spec: ModelSpec
    params: Params
    loglik: float
    loglik_null: float
    n_params: int
    n_obs: int
    n_respondents: int
    param_names: list[str]
    estimates: np.ndarray
    std_errors: np.ndarray
    p_values: np.ndarray
    convergence: dict
    starts: dict = field(default_factory=dict)
    ordering: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)
    em_history: list[float] = field(default_factory=list)
    covariance: np.ndarray | None = None
    null_model: str = "equal shares over available alternatives"

    @property
    def adj_rho2(self) -> float:
        return fit_statistics(self.loglik, self.loglik_null, self.n_params, self.n_obs)["adj_rho2"]

    @property
    def converged(self) -> bool:
        return self.convergence.get("status") == "converged"

    def fit_stats(self) -> dict:
        return fit_stats(self)

    def class_shares(self, dataset: ChoiceDataset | None = None) -> np.ndarray:
        """Prior class shares; averaged over respondents when covariates enter."""
        if not self.spec.membership_covariates:
            return membership_probs(None, self.params.alpha)
        if dataset is None:
            raise EstimationError("class shares with covariates need the dataset")
        prob = _Problem(dataset, self.spec)
        return np.exp(prob.log_priors(self.params.alpha)).mean(axis=0)

    def table(self) -> dict[str, tuple[float, float | None, float | None]]:
        """name -> (estimate, std error, p-value) for every parameter incl. fixed ones."""
        out = {}
        lookup = {n: i for i, n in enumerate(self.param_names)}
        spec = self.spec
        cov_names = ["const", *spec.membership_covariates]
        for c in range(spec.n_classes):
            for k, nm in enumerate(cov_names):
                name = f"class{c + 1}.membership.{nm}"
                out[name] = self._entry(lookup, name, self.params.alpha[c, k])
        for c in range(spec.n_classes):
            for d, nm in enumerate(spec.utility.names):
                name = f"class{c + 1}.{nm}"
                out[name] = self._entry(lookup, name, self.params.beta[c, d])
        if spec.nests is not None:
            for c in range(spec.n_classes):
                for m in range(spec.n_nests):
                    name = f"class{c + 1}.IV.nest{m + 1}"
                    out[name] = self._entry(lookup, name, self.params.lambdas[c, m])
        return out

    def _entry(self, lookup, name, value):
        i = lookup.get(name)
        if i is None:
            return (float(value), None, None)
        se, p = self.std_errors[i], self.p_values[i]
        return (float(value), None if not np.isfinite(se) else float(se), None if not np.isfinite(p) else float(p))

    def to_dict(self) -> dict:
        def clean(v):
            return None if v is None or not np.isfinite(v) else float(v)

        return {
            "spec": self.spec.to_dict(),
            "params": self.params.to_dict(),
            "parameters": [
                {"name": n, "estimate": float(e), "std_error": clean(s), "p_value": clean(p)}
                for n, e, s, p in zip(self.param_names, self.estimates, self.std_errors, self.p_values)
            ],
            "loglik": self.loglik,
            "loglik_null": self.loglik_null,
            "null_model": self.null_model,
            "n_params": self.n_params,
            "n_obs": self.n_obs,
            "n_respondents": self.n_respondents,
            "fit": fit_stats(self),
            "convergence": self.convergence,
            "starts": self.starts,
            "ordering": self.ordering,
            "flags": list(self.flags),
            "em_history": list(self.em_history),
        }

    @classmethod
    def from_dict(cls, d: dict) -> EstimationResult:
        def arr(key):
            return np.array([np.nan if q[key] is None else q[key] for q in d["parameters"]], dtype=float)

        return cls(
            spec=ModelSpec.from_dict(d["spec"]),
            params=Params.from_dict(d["params"]),
            loglik=float(d["loglik"]),
            loglik_null=float(d["loglik_null"]),
            n_params=int(d["n_params"]),
            n_obs=int(d["n_obs"]),
            n_respondents=int(d["n_respondents"]),
            param_names=[q["name"] for q in d["parameters"]],
            estimates=arr("estimate"),
            std_errors=arr("std_error"),
            p_values=arr("p_value"),
            convergence=d.get("convergence", {}),
            starts=d.get("starts", {}),
            ordering=d.get("ordering", {}),
            flags=list(d.get("flags", [])),
            em_history=list(d.get("em_history", [])),
            null_model=d.get("null_model", "equal shares over available alternatives"),
        )


def numerical_hessian(grad_fn, x: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    """Central differences of an analytic gradient; symmetrised."""
    n = x.size
    H = np.empty((n, n))
    for i in range(n):
        h = rel_step * max(1.0, abs(x[i]))
        e = np.zeros(n)
        e[i] = h
        H[:, i] = (grad_fn(x + e) - grad_fn(x - e)) / (2.0 * h)
    return 0.5 * (H + H.T)


def _covariance(H: np.ndarray) -> tuple[np.ndarray, bool]:
    """Inverse of the negative Hessian; pseudo-inverse when not positive definite."""
    A = -H
    try:
        np.linalg.cholesky(A)
        return np.linalg.inv(A), True
    except np.linalg.LinAlgError:
        return np.linalg.pinv(A), False


def _p_values(names: list[str], est: np.ndarray, se: np.ndarray) -> np.ndarray:
    p = np.full(est.shape, np.nan)
    ok = np.isfinite(se) & (se > 0)
    for i in np.flatnonzero(ok):
        if ".IV." in names[i]:
            # one-sided, H0: lambda = 1 against lambda < 1
            p[i] = stats.norm.cdf((est[i] - 1.0) / se[i])
        else:
            p[i] = 2.0 * stats.norm.sf(abs(est[i] / se[i]))
    return p


def _inference(prob: _Problem, params: Params, layout: ParamLayout):
    x = layout.pack(params)
    if layout.n == 0:
        return x, np.zeros(0), np.zeros(0), np.zeros((0, 0)), True

    def g(v):
        _, _, grads = prob.evaluate(layout.unpack(v, params), want_grad=True)
        return layout.pack_grad(grads)

    H = numerical_hessian(g, x)
    cov, pd = _covariance(H)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return x, se, _p_values(layout.names, x, se), cov, pd


def standard_errors(result: EstimationResult, dataset: ChoiceDataset):
    """Recompute standard errors and p-values from the numerical Hessian.

    Bound-fixed and constrained-fixed entries are not estimated and so carry
    no standard error. Returns ``(names, std_errors, p_values, positive_definite)``.
    """
    prob = _Problem(dataset, result.spec)
    layout = ParamLayout(result.spec, result.params.bound_fixed, alpha=result.convergence.get("alpha_estimated", True),
                         kernel_classes=None if result.convergence.get("kernel_estimated", True) else [])
    _, se, p, _, pd = _inference(prob, result.params, layout)
    if not pd:
        log.warning("Hessian not negative definite; standard errors are unreliable")
    return layout.names, se, p, pd


def _flags(prob: _Problem, params: Params, h: np.ndarray, names, se) -> list[str]:
    flags = []
    for c, s in enumerate(h.max(axis=0)):
        if s < DEGENERATE_SHARE:
            flags.append(f"degenerate class {c + 1}: largest posterior membership {s:.3g}")
    C, D = params.beta.shape
    se_of = {n: s for n, s in zip(names, se)}
    terms = prob.spec.utility.names
    for a in range(C):
        for b in range(a + 1, C):
            zs = []
            for d in range(D):
                sa = se_of.get(f"class{a + 1}.{terms[d]}", 0.0)
                sb = se_of.get(f"class{b + 1}.{terms[d]}", 0.0)
                denom = math.sqrt(sa**2 + sb**2)
                diff = abs(params.beta[a, d] - params.beta[b, d])
                zs.append(diff / denom if denom > 0 else (0.0 if diff < 1e-8 else math.inf))
            if D and max(zs) < 2.0:
                flags.append(f"classes {a + 1} and {b + 1} have statistically indistinguishable coefficients")
    return flags


def estimate(dataset: ChoiceDataset, spec: ModelSpec, options: EstimateOptions | None = None) -> EstimationResult:
    """Maximum-likelihood estimation from several random starts.

    Each start runs EM (posterior E-step; weighted kernel fits and a
    fractional-logit membership fit as M-step) to the relative tolerance, then
    a quasi-Newton polish of the full log-likelihood. The best start is
    relabelled by ``options.order_by`` and given Hessian-based standard errors.
    """
    opts = options or EstimateOptions()
    if dataset.n_respondents == 0:
        raise EstimationError("empty dataset")
    prob = _Problem(dataset, spec)

    if opts.start is not None:
        starts = [opts.start.copy()]
    else:
        seqs = np.random.SeedSequence(opts.seed).spawn(max(1, opts.n_starts))
        starts = [random_start(spec, np.random.default_rng(s)) for s in seqs]

    if opts.threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=opts.threads) as pool:
            fits = list(pool.map(lambda s: _fit_from(prob, s, opts), starts))
    else:
        fits = [_fit_from(prob, s, opts) for s in starts]

    lls = np.array([f.loglik for f in fits])
    best_i = int(np.argmax(np.where(np.isfinite(lls), lls, -np.inf)))
    best = fits[best_i]
    n_same = int(np.sum(np.abs(lls - lls[best_i]) <= SAME_LL_TOL))

    order = _class_order(prob, best.params, opts.order_by)
    params = best.params.permuted(order, spec.reference_class)
    ll, h, _ = prob.evaluate(params)
    layout = ParamLayout(spec, params.bound_fixed)
    if opts.compute_se:
        est, se, p, cov, pd = _inference(prob, params, layout)
    else:
        est, se, p, cov, pd = layout.pack(params), np.full(layout.n, np.nan), np.full(layout.n, np.nan), None, True

    status = "converged" if (best.em_converged and best.polish_ok) else "not converged"
    flags = _flags(prob, params, h, layout.names, se)
    if not pd:
        flags.append("Hessian not negative definite: pseudo-inverse used, standard errors unreliable")
    if status != "converged":
        log.warning("estimation did not converge (best of %d starts)", len(fits))
    return EstimationResult(
        spec=spec,
        params=params,
        loglik=ll,
        loglik_null=prob.null_loglik(),
        n_params=layout.n,
        n_obs=prob.S,
        n_respondents=prob.N,
        param_names=layout.names,
        estimates=est,
        std_errors=se,
        p_values=p,
        convergence={
            "status": status,
            "em_iterations": best.em_iterations,
            "polish_iterations": best.polish_iterations,
            "grad_norm": best.grad_norm,
            "hessian_positive_definite": bool(pd),
            "options": opts.to_dict(),
        },
        starts={
            "count": len(fits),
            "best_start": best_i,
            "n_within_tol_of_best": n_same,
            "tolerance": SAME_LL_TOL,
            "logliks": [float(v) for v in lls],
        },
        ordering={"rule": _jsonable_order(opts.order_by), "permutation": [int(o) for o in order]},
        flags=flags,
        em_history=best.em_history,
        covariance=cov,
    )


def estimate_sequential_membership(
    dataset: ChoiceDataset,
    frozen: EstimationResult,
    covariates: Sequence[str] = (),
    gtol: float = 1e-9,
    max_iter: int = 1000,
) -> EstimationResult:
    """Re-estimate only the membership model with class kernels held fixed.

    Class-conditional sequence likelihoods are computed once from the frozen
    coefficients; only alpha is optimised.
    """
    spec = replace(frozen.spec, membership_covariates=tuple(covariates))
    prob = _Problem(dataset, spec)
    base = frozen.params.copy()
    base.alpha = np.zeros((spec.n_classes, prob.Z1.shape[1]))
    L, _ = prob.class_loglik(base)
    ref = spec.reference_class
    layout = ParamLayout(spec, base.bound_fixed, alpha=True, kernel_classes=[])

    def ll_grad(x):
        p = layout.unpack(x, base)
        lp = prob.log_priors(p.alpha)
        joint = lp + L
        per = logsumexp(joint, axis=1)
        h = np.exp(joint - per[:, None])
        G = (h - np.exp(lp)).T @ prob.Z1
        return float(per.sum()), layout.pack_grad({"alpha": G}), h

    def f(x):
        ll, g, _ = ll_grad(x)
        return -ll, -g

    x0 = np.zeros(layout.n)
    res = optimize.minimize(f, x0, jac=True, method="L-BFGS-B",
                            options={"maxiter": max_iter, "ftol": 1e-15, "gtol": gtol, "maxcor": 30})
    x = res.x
    its = int(res.nit)

    def grad_only(v):
        return ll_grad(v)[1]

    # Newton refinement with a finite-difference Hessian of the analytic gradient
    for _ in range(20):
        ll, g, _ = ll_grad(x)
        if np.linalg.norm(g) < gtol:
            break
        H = numerical_hessian(grad_only, x)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-8:
            if ll_grad(x - t * step)[0] >= ll:
                break
            t *= 0.5
        else:
            break
        x = x - t * step
        its += 1

    ll, g, h = ll_grad(x)
    params = layout.unpack(x, base)
    params.beta = frozen.params.beta  # frozen entries stay bit-identical
    params.lambdas = frozen.params.lambdas
    H = numerical_hessian(grad_only, x)
    cov, pd = _covariance(H)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    p = _p_values(layout.names, x, se)
    gn = float(np.linalg.norm(g))
    status = "converged" if gn < 1e-5 else "not converged"
    flags = [] if pd else ["Hessian not negative definite: pseudo-inverse used, standard errors unreliable"]
    return EstimationResult(
        spec=spec,
        params=params,
        loglik=ll,
        loglik_null=prob.null_loglik(),
        n_params=layout.n,
        n_obs=prob.S,
        n_respondents=prob.N,
        param_names=layout.names,
        estimates=x,
        std_errors=se,
        p_values=p,
        convergence={
            "status": status,
            "iterations": its,
            "grad_norm": gn,
            "hessian_positive_definite": bool(pd),
            "alpha_estimated": True,
            "kernel_estimated": False,
            "reference_class": ref + 1,
        },
        starts={"count": 1, "best_start": 0, "n_within_tol_of_best": 1},
        ordering={"rule": {"by": "frozen"}, "permutation": list(range(spec.n_classes))},
        flags=flags,
        covariance=cov,
    )


# --------------------------------------------------------------------------
# Fit statistics and derived quantities
# --------------------------------------------------------------------------


def fit_statistics(loglik: float, loglik_null: float, n_params: int, n_obs: int) -> dict:
    return {
        "adj_rho2": 1.0 - (loglik - n_params) / loglik_null,
        "aic": 2.0 * n_params - 2.0 * loglik,
        "bic": n_params * math.log(n_obs) - 2.0 * loglik if n_obs > 0 else math.nan,
    }


def fit_stats(result: EstimationResult) -> dict:
    """Adjusted McFadden rho-squared, AIC and BIC (BIC uses the number of choice situations)."""
    return fit_statistics(result.loglik, result.loglik_null, result.n_params, result.n_obs)


def compensating_differentials(
    beta_attr,
    beta_numeraire,
    scale: float = 1.0,
    p_attr=None,
    attr_fixed=None,
    numeraire_fixed=None,
    significance: float = 0.05,
) -> list[float | None]:
    """Per-class ratio of an attribute coefficient to the numeraire coefficient.

    Reported as 0 where the attribute coefficient is bound-fixed or not
    significant at ``significance``; None where the numeraire coefficient is
    not positive or is bound-fixed.
    """
    ba = np.atleast_1d(np.asarray(beta_attr, dtype=float))
    bw = np.atleast_1d(np.asarray(beta_numeraire, dtype=float))
    C = ba.size
    pa = [None] * C if p_attr is None else list(p_attr)
    fa = [False] * C if attr_fixed is None else list(attr_fixed)
    fw = [False] * C if numeraire_fixed is None else list(numeraire_fixed)
    out: list[float | None] = []
    for c in range(C):
        if fw[c] or not bw[c] > 0:
            out.append(None)
        elif fa[c] or (pa[c] is not None and not pa[c] < significance):
            out.append(0.0)
        else:
            out.append(float(ba[c] / bw[c] * scale))
    return out


def compensating_differential(result: EstimationResult, attribute: str, numeraire: str, scale: float = 1.0):
    """Compensating differential of ``attribute`` in units of ``numeraire`` for each class."""
    names = result.spec.utility.names
    a, w = names.index(attribute), names.index(numeraire)
    tab = result.table()
    C = result.spec.n_classes
    p_attr = [tab[f"class{c + 1}.{attribute}"][2] for c in range(C)]
    return compensating_differentials(
        result.params.beta[:, a],
        result.params.beta[:, w],
        scale,
        p_attr=p_attr,
        attr_fixed=result.params.bound_fixed[:, a],
        numeraire_fixed=result.params.bound_fixed[:, w],
    )


def avg_predicted_probs(
    result: EstimationResult, dataset: ChoiceDataset, groups: dict[str, Sequence[str]]
) -> tuple[list[str], np.ndarray]:
    """Mean over situations of each class's probability mass on each alternative group.

    Returns ``(group_names, shares)`` with shares of shape (C, G).
    """
    prob = _Problem(dataset, result.spec)
    alt_ids = list(dataset.alternative_ids)
    names = list(groups)
    cols = []
    for g in names:
        idx = [alt_ids.index(str(a)) for a in groups[g]]
        cols.append(idx)
    out = np.zeros((result.spec.n_classes, len(names)))
    for c in range(result.spec.n_classes):
        lam = None if result.params.lambdas is None else result.params.lambdas[c]
        P = np.exp(_backend.all_log_probs(prob.X, prob.avail, result.params.beta[c], prob.nest_of, lam))
        for g, idx in enumerate(cols):
            out[c, g] = P[:, idx].sum(axis=1).mean()
    return names, out
