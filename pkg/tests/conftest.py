import numpy as np
import pytest

from lccmkit import _backend
from lccmkit.dataset import ChoiceDataset, RespondentRecord, Situation
from lccmkit.kernels import FREE, NestStructure, UtilitySpec, fixed
from lccmkit.lccm import ModelSpec, Params


def tiny_panel(rng, n=6, t=3, alts=("1", "2", "3"), attrs=("a", "b"), covariates=(), drop_avail=True):
    """Random small panel; some situations have one unavailable alternative."""
    J = len(alts)
    respondents = []
    for i in range(n):
        sits = []
        for s in range(t):
            X = rng.normal(size=(J, len(attrs)))
            av = np.ones(J, dtype=bool)
            if drop_avail and J > 2 and rng.random() < 0.3:
                av[rng.integers(J)] = False
            chosen = int(rng.choice(np.flatnonzero(av)))
            sits.append(Situation(str(s + 1), X, av, chosen))
        cov = {c: float(rng.normal()) for c in covariates}
        respondents.append(RespondentRecord(str(i + 1), tuple(sits), cov))
    return ChoiceDataset(tuple(respondents), tuple(attrs), tuple(alts))


def tiny_model(rng, C=2, kernel="MNL", covariates=(), asc=True):
    terms = (("a", FREE), ("b", FREE))
    consts = (("1", fixed(0.0)), ("2", FREE)) if asc else ()
    utility = UtilitySpec(terms, consts)
    nests = NestStructure((("1", "2"), ("3",))) if kernel == "NL" else None
    spec = ModelSpec(C, utility, nests, tuple(covariates))
    D = len(utility.names)
    alpha = rng.normal(size=(C, 1 + len(covariates)))
    alpha[0] = 0.0
    beta = rng.normal(size=(C, D))
    lam = None
    if nests is not None:
        lam = np.column_stack([rng.uniform(0.3, 1.0, C), np.ones(C)])
    return spec, Params(alpha, beta, lam)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=sorted(_backend.implementations()))
def backend(request, monkeypatch):
    """Run a test once per available kernel implementation."""
    impl = _backend.implementations()[request.param]
    monkeypatch.setattr(_backend, "_impl", impl)
    return request.param
