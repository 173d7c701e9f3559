"""Serialisation of results into JSON documents and publication-style tables.

Every writer is deterministic: keys are sorted, floats use ``repr`` and
nothing time- or host-dependent is recorded.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .dataset import _write_text
from .fmnl import FmnlResult
from .lccm import EstimationResult


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def write_json(obj, dest) -> str:
    text = dumps(obj)
    _write_text(dest, text)
    return text


def read_result(path) -> EstimationResult:
    return EstimationResult.from_dict(json.loads(Path(path).read_text()))


def _cell(v) -> str:
    if v is None:
        return ""
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def _csv(rows, dest=None) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    text = buf.getvalue()
    if dest is not None:
        _write_text(dest, text)
    return text


def parameter_rows(result: EstimationResult) -> list[list[str]]:
    """Variables down the side, (est., p-value) per class across; fit statistics last.

    Bound-fixed and normalised entries carry an estimate with a blank p-value.
    """
    spec = result.spec
    C = spec.n_classes
    table = result.table()
    head = ["variable"]
    for c in range(C):
        head += [f"class {c + 1} est", f"class {c + 1} p"]
    rows = [head]
    variables = [f"membership.{n}" for n in ["const", *spec.membership_covariates]]
    variables += list(spec.utility.names)
    if spec.nests is not None:
        variables += [f"IV.nest{m + 1}" for m in range(spec.n_nests)]
    for var in variables:
        row = [var]
        for c in range(C):
            est, _, p = table[f"class{c + 1}.{var}"]
            row += [_cell(est), _cell(p)]
        rows.append(row)
    fit = {"loglik": result.loglik, "loglik_null": result.loglik_null,
           "n_params": result.n_params, "n_obs": result.n_obs, **result.fit_stats()}
    shares = result.class_shares() if not spec.membership_covariates else None
    if shares is not None:
        row = ["class share"]
        for c in range(C):
            row += [_cell(shares[c]), ""]
        rows.append(row)
    for key in ("loglik", "loglik_null", "n_params", "n_obs", "adj_rho2", "aic", "bic"):
        rows.append([key, _cell(fit[key])] + [""] * (2 * C - 1))
    return rows


def parameter_table_csv(result: EstimationResult, dest=None) -> str:
    return _csv(parameter_rows(result), dest)


def _markdown(rows, digits=3, note: str | None = None) -> str:
    def fmt(s):
        if s == "":
            return "-"
        try:
            v = float(s)
        except ValueError:
            return s
        return f"{v:.{digits}f}"

    lines = ["| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
    for r in rows[1:]:
        lines.append("| " + " | ".join([r[0], *[fmt(v) for v in r[1:]]]) + " |")
    if note:
        lines += ["", note]
    return "\n".join(lines) + "\n"


def parameter_table_markdown(result: EstimationResult, dest=None) -> str:
    text = _markdown(parameter_rows(result), note="p-values blank for normalised or bound-fixed parameters.")
    if dest is not None:
        _write_text(dest, text)
    return text


def fmnl_rows(res: FmnlResult) -> list[list[str]]:
    """Covariates down the side, (est., p-value) per class; reference column fixed at zero."""
    C = res.n_classes
    head = ["variable"]
    for c in range(C):
        tag = " (reference)" if c == res.reference else ""
        head += [f"class {c + 1}{tag} est", f"class {c + 1}{tag} p"]
    rows = [head]
    for k, name in enumerate(res.row_names):
        row = [name]
        for c in range(C):
            if c == res.reference:
                row += [_cell(0.0), ""]
            else:
                row += [_cell(res.gamma[c, k]), _cell(res.p_values[c, k])]
        rows.append(row)
    rows.append(["quasi_loglik", _cell(res.quasi_loglik)] + [""] * (2 * C - 1))
    rows.append(["n_used", _cell(res.n_used)] + [""] * (2 * C - 1))
    return rows


def fmnl_table_csv(res: FmnlResult, dest=None) -> str:
    return _csv(fmnl_rows(res), dest)


def fmnl_table_markdown(res: FmnlResult, dest=None) -> str:
    text = _markdown(fmnl_rows(res), note="Robust (sandwich) standard errors.")
    if dest is not None:
        _write_text(dest, text)
    return text


def rows_csv(rows, dest=None) -> str:
    return _csv(rows, dest)
