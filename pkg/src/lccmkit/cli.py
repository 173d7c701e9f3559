"""Command-line front end.

Every command reads a JSON run configuration; ``--seed``, ``--out`` and
``--threads`` override the corresponding config entries. Exit codes: 0 on
success, 1 on input errors, 2 when estimation does not converge (outputs are
still written).

Config layout (all blocks optional unless a command needs them)::

    {
      "seed": 0, "out": "run", "threads": 1,
      "formats": ["csv", "json", "markdown"],
      "data": {"choices": "choices.csv", "indicators": "indicators.csv",
               "choice_schema": {...}, "indicator_schema": {...}, "scale": [1, 7]},
      "model": {"n_classes": 3, "utility": {"terms": [...], "constants": []},
                "nests": null, "membership_covariates": []},
      "options": {"n_starts": 20, "tol": 1e-8, "max_iter": 500, "polish_iter": 100,
                  "order_by": {"by": "share"}},
      "profile": {"columns": null, "source": "indicators" | "scores"},
      "fmnl": {"covariates": [...], "reference": 1},
      "efa": {"n_factors": "auto", "threshold": 0.32, "unit_variance": false},
      "compare": {"covariates": [...]},
      "simulate": {"scenario": "desk", ...}
    }

Relative paths in ``data`` and the config's ``out`` are resolved against the
config file's directory; an ``--out`` flag is taken relative to the working
directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import report
from .comparison import compare_membership_models
from .dataset import (
    ChoiceSchema,
    DataError,
    IndicatorSchema,
    JoinWarning,
    join,
    load_choice_data,
    load_indicators,
)
from .efa import EfaError, apply_retention, factor_scores, fit_efa, scores_csv
from .fmnl import FmnlError, estimate_fmnl
from .kernels import KernelError
from .lccm import EstimateOptions, EstimationError, ModelSpec, estimate
from .posterior import PosteriorError, PosteriorMatrix, posterior_membership, profile_report
from .synthgen import GeneratorError, generate, generator_from_dict

log = logging.getLogger("lccmkit")

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2
COMMANDS = ("estimate", "posterior", "profile", "fmnl", "efa", "simulate", "compare")


class ConfigError(ValueError):
    pass


class RunConfig:
    def __init__(self, raw: dict, base: Path, seed=None, out=None, threads=None):
        self.raw = raw
        self.base = base
        self.seed = int(seed if seed is not None else raw.get("seed", 0))
        if out is not None:
            self.out = Path(out)
        else:
            self.out = Path(raw.get("out", "lccmkit-out"))
            self.out = self.out if self.out.is_absolute() else base / self.out
        self.threads = int(threads if threads is not None else raw.get("threads", 1))
        self.formats = set(raw.get("formats", ("csv", "json", "markdown")))
        bad = self.formats - {"csv", "json", "markdown"}
        if bad:
            raise ConfigError(f"unknown report format {sorted(bad)[0]!r}")

    @classmethod
    def load(cls, path, **overrides) -> RunConfig:
        if path is None:
            return cls({}, Path.cwd(), **overrides)
        p = Path(path)
        try:
            raw = json.loads(p.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {p}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls(raw, p.parent, **overrides)

    def block(self, name: str) -> dict:
        b = self.raw.get(name, {})
        if not isinstance(b, dict):
            raise ConfigError(f"config block {name!r} must be an object")
        return b

    def data_path(self, key: str, required: bool = True) -> Path | None:
        v = self.block("data").get(key)
        if v is None:
            if required:
                raise ConfigError(f"config data.{key} is required")
            return None
        p = Path(v)
        p = p if p.is_absolute() else self.base / p
        if not p.exists():
            raise ConfigError(f"file not found: {p}")
        return p

    def artifact(self, name: str) -> Path:
        return self.out / name

    def upstream(self, name: str, producer: str) -> Path:
        p = self.artifact(name)
        if not p.exists():
            raise ConfigError(f"missing upstream artifact {p}; run '{producer}' first")
        return p

    def model(self) -> ModelSpec:
        m = self.block("model")
        if not m:
            raise ConfigError("config block 'model' is required")
        try:
            return ModelSpec.from_dict(m)
        except KeyError as exc:
            raise ConfigError(f"model block is missing {exc.args[0]!r}") from exc

    def options(self) -> EstimateOptions:
        o = dict(self.block("options"))
        allowed = {"n_starts", "tol", "max_iter", "polish_iter", "mstep_iter", "order_by", "compute_se"}
        unknown = set(o) - allowed - {"seed", "threads"}
        if unknown:
            raise ConfigError(f"unknown option {sorted(unknown)[0]!r}")
        o = {k: v for k, v in o.items() if k in allowed}
        return EstimateOptions(seed=self.seed, threads=self.threads, **o)

    def wants(self, fmt: str) -> bool:
        return fmt in self.formats


# --------------------------------------------------------------------------
# Loading helpers
# --------------------------------------------------------------------------


def _choice_schema(cfg: RunConfig) -> ChoiceSchema:
    s = dict(cfg.block("data").get("choice_schema", {}))
    for k in ("attributes", "covariates"):
        if s.get(k) is not None:
            s[k] = tuple(s[k])
    return ChoiceSchema(**s)


def _indicator_schema(cfg: RunConfig) -> IndicatorSchema:
    s = dict(cfg.block("data").get("indicator_schema", {}))
    if s.get("indicators") is not None:
        s["indicators"] = tuple(s["indicators"])
    return IndicatorSchema(**s)


def _scale(cfg: RunConfig):
    sc = cfg.block("data").get("scale", [1, 7])
    return None if sc is None else (float(sc[0]), float(sc[1]))


def _choices(cfg: RunConfig):
    return load_choice_data(cfg.data_path("choices"), _choice_schema(cfg))


def _indicators(cfg: RunConfig):
    return load_indicators(cfg.data_path("indicators"), _indicator_schema(cfg), _scale(cfg))


def _model_data(cfg: RunConfig, spec: ModelSpec):
    """Choice data, with indicator columns attached when the membership model needs them."""
    choices = _choices(cfg)
    missing = [c for c in spec.membership_covariates if c not in choices.covariate_names]
    if not missing:
        return choices
    panel = join(choices, _indicators(cfg))
    absent = [c for c in missing if c not in panel.indicators.indicator_names]
    if absent:
        raise ConfigError(f"membership covariate {absent[0]!r} found in neither data file")
    data = panel.choices_with_indicators(missing)
    keep = [r.id for r in data.respondents if not any(np.isnan(r.covariates[c]) for c in missing)]
    if len(keep) < data.n_respondents:
        log.warning("dropping %d respondents with missing membership covariates", data.n_respondents - len(keep))
        data = data.subset(keep)
    return data


def _result(cfg: RunConfig):
    return report.read_result(cfg.upstream("result.json", "estimate"))


def _posterior(cfg: RunConfig) -> PosteriorMatrix:
    return PosteriorMatrix.from_csv(cfg.upstream("posterior.csv", "posterior"))


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_estimate(cfg: RunConfig) -> int:
    spec = cfg.model()
    data = _model_data(cfg, spec)
    res = estimate(data, spec, cfg.options())
    cfg.out.mkdir(parents=True, exist_ok=True)
    report.write_json(res.to_dict(), cfg.artifact("result.json"))
    if cfg.wants("csv"):
        report.parameter_table_csv(res, cfg.artifact("parameters.csv"))
    if cfg.wants("markdown"):
        report.parameter_table_markdown(res, cfg.artifact("parameters.md"))
    status = res.convergence["status"]
    print(f"estimate: LL={res.loglik:.6f} K={res.n_params} adj_rho2={res.adj_rho2:.4f} status={status}")
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


def cmd_posterior(cfg: RunConfig) -> int:
    res = _result(cfg)
    post = posterior_membership(_model_data(cfg, res.spec), res)
    post.to_csv(cfg.artifact("posterior.csv"))
    print(f"posterior: {len(post.respondent_ids)} respondents x {post.n_classes} classes")
    return EXIT_OK


def cmd_profile(cfg: RunConfig) -> int:
    post = _posterior(cfg)
    if post.n_classes < 2:
        raise PosteriorError("profiling requires C ≥ 2 classes")
    block = cfg.block("profile")
    if block.get("source", "indicators") == "scores":
        data = load_indicators(cfg.upstream("scores.csv", "efa"), IndicatorSchema(), None)
    else:
        data = _indicators(cfg)
    cols = block.get("columns")
    if cols:
        data = data.select(cols)
    rep = profile_report(post, data)
    if cfg.wants("csv"):
        rep.to_csv(cfg.artifact("profile.csv"))
    if cfg.wants("markdown"):
        rep.to_markdown(cfg.artifact("profile.md"))
    if cfg.wants("json"):
        report.write_json(
            {"metadata": rep.metadata(),
             "rows": [{"name": r.name, "means": r.class_means, "vars": r.class_vars, "effective_n": r.effective_n,
                       "F": None if r.anova is None else r.anova.f, "F_p": None if r.anova is None else r.anova.p,
                       "pairwise": {f"{a + 1} vs {b + 1}": {"t": t.t, "df": t.df, "p": t.p}
                                    for (a, b), t in r.pairwise.items()}}
                      for r in rep.reports]},
            cfg.artifact("profile.json"),
        )
    print(f"profile: {len(rep.reports)} variables, {rep.n_tests} tests (no multiplicity correction)")
    return EXIT_OK


def cmd_fmnl(cfg: RunConfig) -> int:
    post = _posterior(cfg)
    block = cfg.block("fmnl")
    names = list(block.get("covariates", []))
    ref = int(block.get("reference", 1)) - 1
    if names:
        ind = _indicators(cfg).select(names)
        common = [r for r in post.respondent_ids if r in set(ind.respondent_ids)]
        ind = ind.align(common)
        post = post.align(common)
        Z = np.where(ind.missing_mask, np.nan, ind.values)
    else:
        Z = None
    res = estimate_fmnl(post, Z, names, reference=ref)
    if cfg.wants("csv"):
        report.fmnl_table_csv(res, cfg.artifact("fmnl.csv"))
    if cfg.wants("markdown"):
        report.fmnl_table_markdown(res, cfg.artifact("fmnl.md"))
    if cfg.wants("json"):
        report.write_json(res.to_dict(), cfg.artifact("fmnl.json"))
    print(f"fmnl: {len(res.row_names)} rows, status={res.convergence['status']}")
    return EXIT_OK if res.convergence["status"] == "converged" else EXIT_NONCONVERGED


def cmd_efa(cfg: RunConfig) -> int:
    block = cfg.block("efa")
    ind = _indicators(cfg)
    cols = block.get("columns")
    if cols:
        ind = ind.select(cols)
    nf = block.get("n_factors", "auto")
    res = apply_retention(fit_efa(ind, nf), float(block.get("threshold", 0.32)))
    scores = factor_scores(res, ind, unit_variance=bool(block.get("unit_variance", False)))
    cfg.out.mkdir(parents=True, exist_ok=True)
    res.loadings_csv(cfg.artifact("loadings.csv"))
    scores_csv(ind.respondent_ids, scores, cfg.artifact("scores.csv"))
    if cfg.wants("json"):
        report.write_json(res.to_dict(), cfg.artifact("efa.json"))
    print(f"efa: {res.n_factors} factors, {int(res.retained.sum())}/{len(res.item_names)} items retained")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    block = dict(cfg.block("simulate"))
    block["seed"] = cfg.seed
    gspec = generator_from_dict(block)
    paths = generate(gspec).write(cfg.out, gspec)
    print("simulate: wrote " + ", ".join(sorted(Path(p).name for p in paths.values())))
    return EXIT_OK


def cmd_compare(cfg: RunConfig) -> int:
    spec = cfg.model()
    names = cfg.block("compare").get("covariates")
    ind = _indicators(cfg)
    if names:
        ind = ind.select(names)
    panel = join(_choices(cfg), ind)
    cmp = compare_membership_models(panel.choices, panel.indicators, spec, cfg.options())
    cfg.out.mkdir(parents=True, exist_ok=True)
    if cfg.wants("csv"):
        report.rows_csv(cmp.rows(), cfg.artifact("compare.csv"))
    report.write_json(cmp.to_dict(), cfg.artifact("compare.json"))
    s = cmp.summary
    if s["n_strong"]:
        print(f"compare: {s['n_strong']} coefficients with |t| > {s['t_threshold']:g}; "
              f"sign agreement {100 * s['sign_agreement_rate']:.0f}%, max abs difference {s['max_abs_difference']:.4g}")
    else:
        print(f"compare: no coefficients with |t| > {s['t_threshold']:g}")
    ok = cmp.baseline.converged and cmp.simultaneous.converged and cmp.sequential.converged
    return EXIT_OK if ok else EXIT_NONCONVERGED


HANDLERS = {
    "estimate": cmd_estimate,
    "posterior": cmd_posterior,
    "profile": cmd_profile,
    "fmnl": cmd_fmnl,
    "efa": cmd_efa,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lccmkit", description="Latent class choice models with posterior inference.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="random seed (overrides config)")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--threads", type=int, help="worker threads for multi-start estimation")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, seed=args.seed, out=args.out, threads=args.threads)
        cfg.out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("always", JoinWarning)
            return HANDLERS[args.command](cfg)
    except (ConfigError, DataError, EstimationError, KernelError, PosteriorError, FmnlError, EfaError,
            GeneratorError, ValueError, TypeError, OSError) as exc:
        print(f"lccmkit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
