"""Class-conditional choice kernels: multinomial logit and two-level nested logit.

All probability arithmetic is done in log space. The single-situation
functions here are the readable reference; the batched versions used inside
the likelihood live in :mod:`lccmkit._backend`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .dataset import ChoiceDataset


class KernelError(ValueError):
    pass


# --------------------------------------------------------------------------
# Constraints and utility specification
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Constraint:
    """Sign or value restriction on a single coefficient.

    ``kind`` is one of ``"free"``, ``"nonnegative"``, ``"nonpositive"``,
    ``"fixed"`` (then ``value`` holds the fixed number).
    """

    kind: str = "free"
    value: float = 0.0

    KINDS = ("free", "nonnegative", "nonpositive", "fixed")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise KernelError(f"unknown constraint {self.kind!r}")

    @classmethod
    def parse(cls, text) -> Constraint:
        """Accepts ``"free"``, ``"nonnegative"``, ``"nonpositive"``, ``"fixed:<v>"``."""
        if isinstance(text, Constraint):
            return text
        if text is None:
            return FREE
        t = str(text).strip().lower()
        if t.startswith("fixed"):
            _, _, v = t.partition(":")
            return cls("fixed", float(v) if v else 0.0)
        aliases = {"positive": "nonnegative", "negative": "nonpositive", ">=0": "nonnegative", "<=0": "nonpositive"}
        return cls(aliases.get(t, t))

    def __str__(self):
        return f"fixed:{self.value!r}" if self.kind == "fixed" else self.kind

    @property
    def is_fixed(self) -> bool:
        return self.kind == "fixed"

    @property
    def is_signed(self) -> bool:
        return self.kind in ("nonnegative", "nonpositive")

    @property
    def sign(self) -> float:
        return -1.0 if self.kind == "nonpositive" else 1.0


FREE = Constraint("free")
NONNEGATIVE = Constraint("nonnegative")
NONPOSITIVE = Constraint("nonpositive")


def fixed(value: float) -> Constraint:
    return Constraint("fixed", float(value))


@dataclass(frozen=True)
class UtilitySpec:
    """Linear-in-parameters utility: attribute terms plus alternative constants.

    Parameters
    ----------
    terms : sequence of (attribute name, Constraint)
    constants : sequence of (alternative id, Constraint)
        At least one constant must be fixed (the reference) when any are given.
    """

    terms: tuple[tuple[str, Constraint], ...]
    constants: tuple[tuple[str, Constraint], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple((n, Constraint.parse(c)) for n, c in self.terms))
        object.__setattr__(self, "constants", tuple((a, Constraint.parse(c)) for a, c in self.constants))
        names = [n for n, _ in self.terms]
        if len(set(names)) != len(names):
            raise KernelError("an attribute appears more than once in the utility")
        alts = [a for a, _ in self.constants]
        if len(set(alts)) != len(alts):
            raise KernelError("an alternative constant appears more than once")
        if self.constants and not any(c.is_fixed for _, c in self.constants):
            raise KernelError("at least one alternative constant must be fixed as reference")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.terms] + [f"ASC_{a}" for a, _ in self.constants]

    @property
    def constraints(self) -> list[Constraint]:
        return [c for _, c in self.terms] + [c for _, c in self.constants]

    @property
    def n_terms(self) -> int:
        return len(self.terms) + len(self.constants)

    def design(self, dataset: ChoiceDataset) -> np.ndarray:
        """(S, J, D) design tensor: attribute columns then constant dummies."""
        arr = dataset.arrays
        cols = []
        for name, _ in self.terms:
            try:
                k = dataset.attribute_names.index(name)
            except ValueError:
                raise KernelError(f"attribute {name!r} not in dataset") from None
            cols.append(arr.X[:, :, k])
        for alt, _ in self.constants:
            try:
                j = dataset.alternative_ids.index(alt)
            except ValueError:
                raise KernelError(f"alternative {alt!r} not in dataset") from None
            dummy = np.zeros(arr.X.shape[:2])
            dummy[:, j] = 1.0
            cols.append(dummy)
        if not cols:
            return np.zeros(arr.X.shape[:2] + (0,))
        return np.ascontiguousarray(np.stack(cols, axis=2))

    def to_dict(self) -> dict:
        return {
            "terms": [{"name": n, "constraint": str(c)} for n, c in self.terms],
            "constants": [{"alt": a, "constraint": str(c)} for a, c in self.constants],
        }

    @classmethod
    def from_dict(cls, d: dict) -> UtilitySpec:
        terms = []
        for t in d.get("terms", []):
            if isinstance(t, str):
                terms.append((t, FREE))
            else:
                terms.append((t["name"], Constraint.parse(t.get("constraint"))))
        consts = [(c["alt"], Constraint.parse(c.get("constraint"))) for c in d.get("constants", [])]
        return cls(tuple(terms), tuple(consts))


@dataclass(frozen=True)
class NestStructure:
    """Partition of alternatives into nests, with per-nest constraints on lambda.

    Singleton nests always have lambda fixed to 1.
    """

    nests: tuple[tuple[str, ...], ...]
    iv_constraints: tuple[Constraint, ...] = field(default=())

    def __post_init__(self):
        nests = tuple(tuple(str(a) for a in n) for n in self.nests)
        object.__setattr__(self, "nests", nests)
        flat = [a for n in nests for a in n]
        if len(set(flat)) != len(flat):
            raise KernelError("nests overlap")
        if any(len(n) == 0 for n in nests):
            raise KernelError("empty nest")
        cons = tuple(Constraint.parse(c) for c in self.iv_constraints) or tuple(FREE for _ in nests)
        if len(cons) != len(nests):
            raise KernelError("one IV constraint per nest required")
        cons = tuple(fixed(1.0) if len(n) == 1 else c for n, c in zip(nests, cons))
        for c in cons:
            if c.is_fixed and not 0.0 < c.value <= 1.0:
                raise KernelError("fixed lambda must lie in (0, 1]")
        object.__setattr__(self, "iv_constraints", cons)

    @property
    def n_nests(self) -> int:
        return len(self.nests)

    def nest_index(self, alternative_ids: Sequence[str]) -> np.ndarray:
        """Nest number for every alternative, in ``alternative_ids`` order."""
        where = {a: m for m, n in enumerate(self.nests) for a in n}
        missing = [a for a in alternative_ids if str(a) not in where]
        if missing or len(where) != len(alternative_ids):
            raise KernelError("nests must partition the full alternative set")
        return np.array([where[str(a)] for a in alternative_ids], dtype=np.intp)

    @property
    def free_nests(self) -> list[int]:
        return [m for m, c in enumerate(self.iv_constraints) if not c.is_fixed]

    def to_dict(self) -> dict:
        return {"nests": [list(n) for n in self.nests], "iv_constraints": [str(c) for c in self.iv_constraints]}

    @classmethod
    def from_dict(cls, d: dict) -> NestStructure:
        return cls(tuple(tuple(n) for n in d["nests"]), tuple(d.get("iv_constraints", ())))


# --------------------------------------------------------------------------
# Single-situation kernels
# --------------------------------------------------------------------------


def _check_inputs(utilities, availability):
    u = np.asarray(utilities, dtype=float)
    a = np.asarray(availability, dtype=bool)
    if u.shape != a.shape or u.ndim != 1:
        raise KernelError("utilities and availability must be equal-length vectors")
    if not a.any():
        raise KernelError("no available alternative")
    if not np.all(np.isfinite(u[a])):
        raise KernelError("non-finite utility")
    return u, a


def _resolve_nests(nests, n_alts, alternative_ids):
    if isinstance(nests, NestStructure):
        # without explicit ids, alternatives are named by position ("0", "1", ...)
        ids = alternative_ids if alternative_ids is not None else [str(j) for j in range(n_alts)]
        return nests.nest_index(ids)
    idx = np.asarray(nests, dtype=np.intp)
    if idx.shape != (n_alts,):
        raise KernelError("nest index must have one entry per alternative")
    return idx


def mnl_log_probs(utilities, availability) -> np.ndarray:
    """Multinomial-logit log probabilities; unavailable alternatives get -inf."""
    u, a = _check_inputs(utilities, availability)
    out = np.full(u.shape, -np.inf)
    out[a] = u[a] - logsumexp(u[a])
    return out


def nl_log_probs(utilities, availability, nests, lambdas, alternative_ids=None) -> np.ndarray:
    """Two-level nested-logit log probabilities.

    Parameters
    ----------
    utilities, availability : (J,) arrays
    nests : NestStructure or (J,) integer nest index
    lambdas : (M,) nest scale parameters in (0, 1]
    alternative_ids : ids used to map a NestStructure onto positions
    """
    u, a = _check_inputs(utilities, availability)
    nest_of = _resolve_nests(nests, u.size, alternative_ids)
    lam = np.asarray(lambdas, dtype=float)
    n_nests = int(nest_of.max()) + 1
    if lam.shape != (n_nests,):
        raise KernelError(f"expected {n_nests} lambdas, got {lam.shape}")
    if np.any(lam <= 0) or np.any(lam > 1):
        raise KernelError("lambda outside (0, 1]")
    iv = np.full(n_nests, -np.inf)
    for m in range(n_nests):
        members = a & (nest_of == m)
        if members.any():
            iv[m] = logsumexp(u[members] / lam[m])
    live = np.isfinite(iv)
    top = lam[live] * iv[live]
    log_denom = logsumexp(top)
    out = np.full(u.shape, -np.inf)
    for j in np.flatnonzero(a):
        m = nest_of[j]
        out[j] = u[j] / lam[m] - iv[m] + lam[m] * iv[m] - log_denom
    return out


def kernel_gradient(
    utilities,
    availability,
    chosen: int,
    nests=None,
    lambdas=None,
    alternative_ids=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the chosen alternative's log probability.

    Returns ``(d_utilities, d_lambdas)``; ``d_lambdas`` is empty for MNL.
    Unavailable alternatives get a zero derivative.
    """
    u, a = _check_inputs(utilities, availability)
    if not a[chosen]:
        raise KernelError("chosen alternative is unavailable")
    if nests is None:
        p = np.exp(mnl_log_probs(u, a))
        g = -p
        g[chosen] += 1.0
        return g, np.zeros(0)

    nest_of = _resolve_nests(nests, u.size, alternative_ids)
    lam = np.asarray(lambdas, dtype=float)
    nl_log_probs(u, a, nest_of, lam)  # validates lambdas
    n_nests = lam.size
    iv = np.full(n_nests, -np.inf)
    for m in range(n_nests):
        members = a & (nest_of == m)
        if members.any():
            iv[m] = logsumexp(u[members] / lam[m])
    live = np.isfinite(iv)
    log_denom = logsumexp(lam[live] * iv[live])
    nest_prob = np.where(live, np.exp(lam * np.where(live, iv, 0.0) - log_denom), 0.0)
    within = np.zeros_like(u)
    within[a] = np.exp(u[a] / lam[nest_of[a]] - iv[nest_of[a]])
    mi = nest_of[chosen]

    g_u = -nest_prob[nest_of] * within
    in_chosen_nest = a & (nest_of == mi)
    g_u[in_chosen_nest] += (1.0 - 1.0 / lam[mi]) * within[in_chosen_nest]
    g_u[chosen] += 1.0 / lam[mi]
    g_u[~a] = 0.0

    g_lam = np.zeros(n_nests)
    for m in np.flatnonzero(live):
        members = a & (nest_of == m)
        ubar = np.sum(within[members] * u[members])
        g_lam[m] = -nest_prob[m] * (iv[m] - ubar / lam[m])
        if m == mi:
            g_lam[m] += (ubar - u[chosen]) / lam[m] ** 2 + iv[m] - ubar / lam[m]
    return g_u, g_lam
