"""Select the batched kernel implementation at import time.

The compiled extension is preferred; set ``LCCMKIT_BACKEND=python`` to force
the numpy fallback.
"""

import os

import numpy as np

from . import _pykernels

if os.environ.get("LCCMKIT_BACKEND", "").lower() == "python":
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

all_log_probs = _pykernels.all_log_probs


def mnl_batch(X, avail, chosen, beta, want_grad=True, impl=None):
    impl = impl or _impl
    return impl.mnl_batch(X, avail, chosen, np.ascontiguousarray(beta, dtype=float), want_grad)


def nl_batch(X, avail, chosen, nest_of, lambdas, beta, want_grad=True, impl=None):
    impl = impl or _impl
    return impl.nl_batch(
        X,
        avail,
        chosen,
        nest_of,
        np.ascontiguousarray(lambdas, dtype=float),
        np.ascontiguousarray(beta, dtype=float),
        want_grad,
    )


def implementations() -> dict:
    """All importable backends by name (for tests and benchmarks)."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
