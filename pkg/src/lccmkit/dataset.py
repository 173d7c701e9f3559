"""Loading, validation and joining of long-format choice data and indicators.

Choice data arrive as one CSV row per respondent / choice situation /
alternative (``resp_id, task_id, alt_id, avail, chosen, <attr...>``).
Indicator data arrive as one row per respondent (``resp_id, <indicator...>``),
with empty cells meaning "missing".
"""

from __future__ import annotations

import csv
import io
import math
import os
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    """Raised when an input file violates the data contract."""


class JoinWarning(UserWarning):
    """Emitted when respondents are dropped while joining two sources."""


def id_sort_key(value: str):
    """Order ids numerically when they look like integers, else lexically."""
    try:
        return (0, int(value), "")
    except ValueError:
        return (1, 0, value)


def _read_source(source) -> str:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source).decode("utf-8-sig")
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read().decode("utf-8-sig")
    data = source.read()
    if isinstance(data, bytes):
        return data.decode("utf-8-sig")
    return data


def _parse_rows(text: str) -> tuple[list[str], list[list[str]]]:
    try:
        rows = list(csv.reader(io.StringIO(text)))
    except csv.Error as exc:
        raise DataError(f"malformed CSV: {exc}") from exc
    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    if not rows:
        raise DataError("malformed CSV: no header")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise DataError("malformed CSV: duplicate column names")
    body = rows[1:]
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(
                f"malformed CSV: line {lineno} has {len(row)} fields, expected {len(header)}"
            )
    return header, body


def _to_float(text: str, what: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"non-numeric {what}: {text!r}") from None
    if not math.isfinite(value):
        raise DataError(f"non-finite {what}: {text!r}")
    return value


def _to_flag(text: str, what: str) -> bool:
    value = text.strip()
    if value in ("0", "0.0"):
        return False
    if value in ("1", "1.0"):
        return True
    raise DataError(f"{what} must be 0/1, got {text!r}")


# --------------------------------------------------------------------------
# Domain types
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Situation:
    """One choice situation: attributes for every alternative (J x D)."""

    id: str
    attributes: np.ndarray
    available: np.ndarray
    chosen: int

    def __eq__(self, other):
        if not isinstance(other, Situation):
            return NotImplemented
        return (
            self.id == other.id
            and self.chosen == other.chosen
            and np.array_equal(self.attributes, other.attributes)
            and np.array_equal(self.available, other.available)
        )

    __hash__ = None


@dataclass(frozen=True)
class RespondentRecord:
    id: str
    situations: tuple[Situation, ...]
    covariates: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.situations:
            raise DataError(f"respondent {self.id!r} has no choice situations")
        widths = {s.attributes.shape[1] for s in self.situations}
        if len(widths) != 1:
            raise DataError(f"respondent {self.id!r} has ragged attribute vectors")


@dataclass(frozen=True)
class ChoiceArrays:
    """Dense, padded view of a ChoiceDataset used by the likelihood code.

    ``X`` is (S, J, D); unavailable or absent alternatives have ``avail`` 0.
    """

    X: np.ndarray
    avail: np.ndarray
    chosen: np.ndarray
    resp_index: np.ndarray
    n_respondents: int

    @property
    def n_situations(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class ChoiceDataset:
    respondents: tuple[RespondentRecord, ...]
    attribute_names: tuple[str, ...]
    alternative_ids: tuple[str, ...]

    def __post_init__(self):
        ids = [r.id for r in self.respondents]
        if len(set(ids)) != len(ids):
            raise DataError("respondent ids are not unique")
        d = len(self.attribute_names)
        for r in self.respondents:
            for s in r.situations:
                if s.attributes.shape != (len(self.alternative_ids), d):
                    raise DataError(
                        f"respondent {r.id!r} situation {s.id!r}: attribute block has "
                        f"shape {s.attributes.shape}, expected {(len(self.alternative_ids), d)}"
                    )

    @property
    def respondent_ids(self) -> tuple[str, ...]:
        return tuple(r.id for r in self.respondents)

    @property
    def n_respondents(self) -> int:
        return len(self.respondents)

    @property
    def n_situations(self) -> int:
        return sum(len(r.situations) for r in self.respondents)

    @property
    def n_alternatives(self) -> int:
        return len(self.alternative_ids)

    @cached_property
    def arrays(self) -> ChoiceArrays:
        sits = [s for r in self.respondents for s in r.situations]
        X = np.array([s.attributes for s in sits], dtype=np.float64).reshape(
            len(sits), self.n_alternatives, len(self.attribute_names)
        )
        avail = np.array([s.available for s in sits], dtype=np.uint8).reshape(
            len(sits), self.n_alternatives
        )
        chosen = np.array([s.chosen for s in sits], dtype=np.intp)
        resp_index = np.repeat(
            np.arange(self.n_respondents, dtype=np.intp),
            [len(r.situations) for r in self.respondents],
        )
        return ChoiceArrays(
            X=np.ascontiguousarray(X),
            avail=np.ascontiguousarray(avail),
            chosen=chosen,
            resp_index=resp_index,
            n_respondents=self.n_respondents,
        )

    @property
    def covariate_names(self) -> list[str]:
        names: list[str] = []
        for r in self.respondents:
            for k in r.covariates:
                if k not in names:
                    names.append(k)
        return names

    def covariate_matrix(self, names: Sequence[str]) -> np.ndarray:
        """N x P matrix of respondent covariates; NaN where absent."""
        out = np.full((self.n_respondents, len(names)), np.nan)
        for i, r in enumerate(self.respondents):
            for j, name in enumerate(names):
                if name in r.covariates:
                    out[i, j] = r.covariates[name]
        return out

    def with_covariates(
        self, names: Sequence[str], values: np.ndarray, ids: Sequence[str] | None = None
    ) -> ChoiceDataset:
        """Attach respondent-level covariate columns (rows keyed by ``ids``)."""
        values = np.asarray(values, dtype=float)
        if ids is None:
            ids = self.respondent_ids
        if values.shape != (len(ids), len(names)):
            raise DataError("covariate values do not match ids x names")
        row_of = {rid: i for i, rid in enumerate(ids)}
        respondents = []
        for r in self.respondents:
            cov = dict(r.covariates)
            i = row_of.get(r.id)
            for j, name in enumerate(names):
                cov[name] = float(values[i, j]) if i is not None else float("nan")
            respondents.append(RespondentRecord(r.id, r.situations, cov))
        return ChoiceDataset(tuple(respondents), self.attribute_names, self.alternative_ids)

    def subset(self, ids: Iterable[str]) -> ChoiceDataset:
        keep = set(ids)
        return ChoiceDataset(
            tuple(r for r in self.respondents if r.id in keep),
            self.attribute_names,
            self.alternative_ids,
        )

    def to_csv(self, dest=None) -> str:
        """Write back in long format; returns the text (and writes ``dest`` if given)."""
        cov_names = self.covariate_names
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["resp_id", "task_id", "alt_id", "avail", "chosen", *self.attribute_names, *cov_names])
        for r in self.respondents:
            cov = [repr(float(r.covariates.get(c, float("nan")))) for c in cov_names]
            for s in r.situations:
                for j, alt in enumerate(self.alternative_ids):
                    w.writerow(
                        [r.id, s.id, alt, int(s.available[j]), int(j == s.chosen)]
                        + [repr(float(v)) for v in s.attributes[j]]
                        + cov
                    )
        text = buf.getvalue()
        if dest is not None:
            _write_text(dest, text)
        return text


@dataclass(frozen=True, eq=False)
class IndicatorMatrix:
    respondent_ids: tuple[str, ...]
    indicator_names: tuple[str, ...]
    values: np.ndarray
    scale_min: float
    scale_max: float
    missing_mask: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, IndicatorMatrix):
            return NotImplemented
        return (
            self.respondent_ids == other.respondent_ids
            and self.indicator_names == other.indicator_names
            and self.scale_min == other.scale_min
            and self.scale_max == other.scale_max
            and np.array_equal(self.missing_mask, other.missing_mask)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    __hash__ = None

    @property
    def n_respondents(self) -> int:
        return len(self.respondent_ids)

    def column(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        k = self.indicator_names.index(name)
        return self.values[:, k], self.missing_mask[:, k]

    def select(self, names: Sequence[str]) -> IndicatorMatrix:
        idx = [self.indicator_names.index(n) for n in names]
        return IndicatorMatrix(
            self.respondent_ids,
            tuple(names),
            self.values[:, idx],
            self.scale_min,
            self.scale_max,
            self.missing_mask[:, idx],
        )

    def align(self, ids: Sequence[str]) -> IndicatorMatrix:
        row_of = {rid: i for i, rid in enumerate(self.respondent_ids)}
        rows = [row_of[i] for i in ids]
        return IndicatorMatrix(
            tuple(ids),
            self.indicator_names,
            self.values[rows],
            self.scale_min,
            self.scale_max,
            self.missing_mask[rows],
        )

    def to_csv(self, dest=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["resp_id", *self.indicator_names])
        for i, rid in enumerate(self.respondent_ids):
            w.writerow(
                [rid]
                + ["" if self.missing_mask[i, k] else _fmt(self.values[i, k])
                   for k in range(len(self.indicator_names))]
            )
        text = buf.getvalue()
        if dest is not None:
            _write_text(dest, text)
        return text


def _fmt(value: float) -> str:
    value = float(value)
    return str(int(value)) if value.is_integer() and abs(value) < 1e15 else repr(value)


def _write_text(dest, text: str) -> None:
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", newline="") as fh:
            fh.write(text)
    else:
        dest.write(text)


# --------------------------------------------------------------------------
# Loaders
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ChoiceSchema:
    """Column mapping for the long-format choice file.

    ``attributes=None`` takes every column not otherwise claimed.
    ``covariates`` name respondent-level columns (constant within respondent).
    """

    resp: str = "resp_id"
    task: str = "task_id"
    alt: str = "alt_id"
    avail: str = "avail"
    chosen: str = "chosen"
    attributes: tuple[str, ...] | None = None
    covariates: tuple[str, ...] = ()


@dataclass(frozen=True)
class IndicatorSchema:
    resp: str = "resp_id"
    indicators: tuple[str, ...] | None = None


def load_choice_data(source, schema: ChoiceSchema | None = None) -> ChoiceDataset:
    """Read and validate a long-format choice CSV.

    Parameters
    ----------
    source : bytes, path or binary/text file object
    schema : ChoiceSchema, optional
        Column mapping; defaults to the standard column names.

    Returns
    -------
    ChoiceDataset
        Respondents, situations and alternatives ordered by id.
    """
    schema = schema or ChoiceSchema()
    header, body = _parse_rows(_read_source(source))
    key_cols = [schema.resp, schema.task, schema.alt, schema.avail, schema.chosen]
    for col in key_cols:
        if col not in header:
            raise DataError(f"malformed CSV: missing column {col!r}")
    if schema.attributes is None:
        attrs = [h for h in header if h not in key_cols and h not in schema.covariates]
    else:
        attrs = list(schema.attributes)
    for col in [*attrs, *schema.covariates]:
        if col not in header:
            raise DataError(f"malformed CSV: missing column {col!r}")
    pos = {h: i for i, h in enumerate(header)}

    # resp -> task -> alt -> (avail, chosen, attrs)
    nested: dict[str, dict[str, dict[str, tuple[bool, bool, list[float]]]]] = {}
    covs: dict[str, dict[str, float]] = {}
    alt_ids: set[str] = set()
    for row in body:
        rid = row[pos[schema.resp]].strip()
        tid = row[pos[schema.task]].strip()
        aid = row[pos[schema.alt]].strip()
        avail = _to_flag(row[pos[schema.avail]], "avail")
        chosen = _to_flag(row[pos[schema.chosen]], "chosen")
        values = [_to_float(row[pos[a]], f"attribute {a!r}") for a in attrs]
        tasks = nested.setdefault(rid, {})
        alts = tasks.setdefault(tid, {})
        if aid in alts:
            raise DataError(f"duplicate row for respondent {rid!r}, task {tid!r}, alternative {aid!r}")
        alts[aid] = (avail, chosen, values)
        alt_ids.add(aid)
        if schema.covariates:
            cov = {c: _to_float(row[pos[c]], f"covariate {c!r}") for c in schema.covariates}
            prev = covs.setdefault(rid, cov)
            if prev != cov:
                raise DataError(f"covariates vary within respondent {rid!r}")

    alternatives = tuple(sorted(alt_ids, key=id_sort_key))
    alt_pos = {a: j for j, a in enumerate(alternatives)}
    d = len(attrs)
    respondents = []
    for rid in sorted(nested, key=id_sort_key):
        situations = []
        for tid in sorted(nested[rid], key=id_sort_key):
            rows = nested[rid][tid]
            X = np.zeros((len(alternatives), d))
            avail = np.zeros(len(alternatives), dtype=bool)
            chosen = [aid for aid, (_, ch, _) in rows.items() if ch]
            if len(chosen) != 1:
                raise DataError(
                    f"respondent {rid!r} task {tid!r}: {len(chosen)} chosen rows, expected exactly one"
                )
            for aid, (av, _, vals) in rows.items():
                X[alt_pos[aid]] = vals
                avail[alt_pos[aid]] = av
            if not rows[chosen[0]][0]:
                raise DataError(f"respondent {rid!r} task {tid!r}: chosen unavailable")
            if avail.sum() < 2:
                raise DataError(f"respondent {rid!r} task {tid!r}: fewer than 2 available alternatives")
            situations.append(Situation(tid, X, avail, alt_pos[chosen[0]]))
        respondents.append(RespondentRecord(rid, tuple(situations), covs.get(rid, {})))
    if not respondents:
        raise DataError("choice file contains no rows")
    return ChoiceDataset(tuple(respondents), tuple(attrs), alternatives)


def load_indicators(
    source,
    schema: IndicatorSchema | None = None,
    scale: tuple[float, float] | None = (1, 7),
) -> IndicatorMatrix:
    """Read a wide indicator CSV; empty cells are flagged missing, never imputed.

    ``scale=None`` disables the range check (e.g. for factor scores).
    """
    schema = schema or IndicatorSchema()
    header, body = _parse_rows(_read_source(source))
    if schema.resp not in header:
        raise DataError(f"malformed CSV: missing column {schema.resp!r}")
    names = (
        [h for h in header if h != schema.resp]
        if schema.indicators is None
        else list(schema.indicators)
    )
    for n in names:
        if n not in header:
            raise DataError(f"malformed CSV: missing column {n!r}")
    pos = {h: i for i, h in enumerate(header)}
    lo, hi = scale if scale is not None else (-math.inf, math.inf)

    rows: dict[str, list[float]] = {}
    for row in body:
        rid = row[pos[schema.resp]].strip()
        if rid in rows:
            raise DataError(f"duplicate respondent id {rid!r}")
        vals = []
        for n in names:
            cell = row[pos[n]].strip()
            if cell == "":
                vals.append(math.nan)
                continue
            v = _to_float(cell, f"indicator {n!r}")
            if not lo <= v <= hi:
                raise DataError(f"respondent {rid!r} indicator {n!r}: value {v:g} out of range [{lo:g}, {hi:g}]")
            vals.append(v)
        rows[rid] = vals
    ids = tuple(sorted(rows, key=id_sort_key))
    values = np.array([rows[i] for i in ids], dtype=float).reshape(len(ids), len(names))
    return IndicatorMatrix(ids, tuple(names), values, float(lo), float(hi), np.isnan(values))


# --------------------------------------------------------------------------
# Join
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class JoinedPanel:
    choices: ChoiceDataset
    indicators: IndicatorMatrix
    dropped_from_choices: tuple[str, ...]
    dropped_from_indicators: tuple[str, ...]

    @property
    def n_dropped(self) -> int:
        return len(self.dropped_from_choices) + len(self.dropped_from_indicators)

    def choices_with_indicators(self, names: Sequence[str] | None = None) -> ChoiceDataset:
        """Choice data with the (selected) indicator columns as membership covariates."""
        ind = self.indicators if names is None else self.indicators.select(names)
        return self.choices.with_covariates(ind.indicator_names, ind.values, ind.respondent_ids)


def join(choices: ChoiceDataset, indicators: IndicatorMatrix) -> JoinedPanel:
    """Restrict both sources to their common respondents.

    Respondents present in only one source are dropped and reported through a
    :class:`JoinWarning`.
    """
    c_ids = set(choices.respondent_ids)
    i_ids = set(indicators.respondent_ids)
    common = c_ids & i_ids
    if not common:
        raise DataError("choice and indicator data share no respondents")
    only_c = tuple(sorted(c_ids - common, key=id_sort_key))
    only_i = tuple(sorted(i_ids - common, key=id_sort_key))
    if only_c or only_i:
        warnings.warn(
            f"join dropped {len(only_c) + len(only_i)} respondents "
            f"({len(only_c)} without indicators, {len(only_i)} without choices)",
            JoinWarning,
            stacklevel=2,
        )
    sub = choices.subset(common) if only_c else choices
    return JoinedPanel(sub, indicators.align(sub.respondent_ids), only_c, only_i)
