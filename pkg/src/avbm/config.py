"""Strict JSON run configuration.

Top level::

    {"command": ..., "experiment": {...}, "output_path": ..., "output_format": "json"|"csv",
     "verbosity": 0}

``experiment`` keys: family, params, posteriors, n_trials, base_seed, t_grid,
lambdas, stop_rule, n_samples, n_states, quadrature_points. Unknown keys at
any level are rejected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .bounds import E2, BoundParams, ValidationError
from .harness import ExperimentSpec, PosteriorPolicy
from .sim import FamilySpec

COMMANDS = ("simulate", "bound-eval", "coverage", "lln-coverage", "compare", "proof-suite", "lambda-check")
FORMATS = ("json", "csv")

_TOP_KEYS = {"command", "experiment", "output_path", "output_format", "verbosity"}
_EXPERIMENT_KEYS = {"family", "params", "posteriors", "n_trials", "base_seed", "t_grid", "lambdas",
                    "stop_rule", "n_samples", "n_states", "quadrature_points"}
_FAMILY_KEYS = {"n_hypotheses", "horizon", "kind", "increment_bound", "seed", "scales", "schedules",
                "block_length"}
_PARAMS_KEYS = {"delta", "increment_bound", "tau0_variant"}
_POLICY_KEYS = {"point_masses", "uniform", "posthoc_argmax", "gibbs", "fixed", "prior"}


def _strict(d, allowed: set, where: str) -> dict:
    if not isinstance(d, dict):
        raise ValidationError(f"{where}: expected an object, got {type(d).__name__}")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ValidationError(f"{where}: unknown key(s) {', '.join(unknown)}")
    return d


@dataclass
class RunConfig:
    command: str
    family: Optional[FamilySpec] = None
    params: Optional[BoundParams] = None
    posteriors: PosteriorPolicy = field(default_factory=PosteriorPolicy)
    n_trials: int = 1
    base_seed: int = 0
    t_grid: tuple = ()
    lambdas: Optional[tuple] = None
    stop_rule: str = "never"
    n_samples: int = 100_000
    n_states: int = 1_000
    quadrature_points: int = 200
    output_path: Optional[str] = None
    output_format: str = "json"
    verbosity: int = 0

    def experiment(self) -> ExperimentSpec:
        if self.family is None:
            raise ValidationError("experiment.family is required for this command")
        params = self.params or BoundParams(0.05, self.family.increment_bound)
        return ExperimentSpec(self.family, params, self.posteriors, self.n_trials, self.base_seed)

    def to_dict(self) -> dict:
        exp: dict = {}
        if self.family is not None:
            exp["family"] = self.family.to_dict()
        if self.params is not None:
            exp["params"] = {"delta": self.params.delta, "increment_bound": self.params.increment_bound,
                             "tau0_variant": self.params.tau0_variant}
        exp["posteriors"] = self.posteriors.to_dict()
        exp.update(n_trials=self.n_trials, base_seed=self.base_seed, t_grid=list(self.t_grid),
                   lambdas=None if self.lambdas is None else list(self.lambdas),
                   stop_rule=self.stop_rule, n_samples=self.n_samples, n_states=self.n_states,
                   quadrature_points=self.quadrature_points)
        return {"command": self.command, "experiment": exp, "output_path": self.output_path,
                "output_format": self.output_format, "verbosity": self.verbosity}


def _typed(d: dict, key: str, typ, where: str):
    val = d[key]
    if typ is int and (isinstance(val, bool) or not isinstance(val, int)):
        raise ValidationError(f"{where}.{key}: expected an integer, got {val!r}")
    if typ is float and (isinstance(val, bool) or not isinstance(val, (int, float))):
        raise ValidationError(f"{where}.{key}: expected a number, got {val!r}")
    return val


def parse_family(d: dict) -> FamilySpec:
    _strict(d, _FAMILY_KEYS, "experiment.family")
    for k in ("n_hypotheses", "horizon"):
        if k not in d:
            raise ValidationError(f"experiment.family.{k} is required")
    kw = dict(d)
    for k in ("n_hypotheses", "horizon", "seed", "block_length"):
        if k in kw:
            _typed(kw, k, int, "experiment.family")
    if "increment_bound" in kw:
        kw["increment_bound"] = float(_typed(kw, "increment_bound", float, "experiment.family"))
    try:
        return FamilySpec(**kw)
    except ValidationError as exc:
        raise ValidationError(f"experiment.family: {exc}") from None


def parse_params(d: dict, family: Optional[FamilySpec]) -> BoundParams:
    _strict(d, _PARAMS_KEYS, "experiment.params")
    if "delta" not in d:
        raise ValidationError("experiment.params.delta is required")
    c = d.get("increment_bound", family.increment_bound if family else E2)
    try:
        return BoundParams(float(d["delta"]), float(c), d.get("tau0_variant", "thm"))
    except ValidationError as exc:
        raise ValidationError(f"experiment.params: {exc}") from None


def parse_config(doc: dict, command: Optional[str] = None) -> RunConfig:
    _strict(doc, _TOP_KEYS, "config")
    cmd = doc.get("command", command)
    if command is not None and cmd != command:
        raise ValidationError(f"config.command is {cmd!r} but the {command!r} subcommand was invoked")
    if cmd not in COMMANDS:
        raise ValidationError(f"config.command must be one of {COMMANDS}, got {cmd!r}")
    exp = _strict(doc.get("experiment", {}), _EXPERIMENT_KEYS, "experiment")
    cfg = RunConfig(command=cmd)
    if "family" in exp:
        cfg.family = parse_family(exp["family"])
    if "params" in exp:
        cfg.params = parse_params(exp["params"], cfg.family)
    if "posteriors" in exp:
        try:
            cfg.posteriors = PosteriorPolicy(**_strict(exp["posteriors"], _POLICY_KEYS, "experiment.posteriors"))
        except (ValidationError, TypeError) as exc:
            raise ValidationError(f"experiment.posteriors: {exc}") from None
    for k in ("n_trials", "base_seed", "n_samples", "n_states", "quadrature_points"):
        if k in exp:
            setattr(cfg, k, _typed(exp, k, int, "experiment"))
    if "t_grid" in exp:
        cfg.t_grid = tuple(int(t) for t in exp["t_grid"])
    if exp.get("lambdas") is not None:
        cfg.lambdas = tuple(float(x) for x in exp["lambdas"])
    if "stop_rule" in exp:
        cfg.stop_rule = exp["stop_rule"]
    if doc.get("output_path") is not None:
        cfg.output_path = str(doc["output_path"])
    fmt = doc.get("output_format", "json")
    if fmt not in FORMATS:
        raise ValidationError(f"output_format must be one of {FORMATS}, got {fmt!r}")
    cfg.output_format = fmt
    if "verbosity" in doc:
        cfg.verbosity = _typed(doc, "verbosity", int, "config")
    return cfg


def load_config(path, command: Optional[str] = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {p} is not valid JSON: {exc}") from None
    return parse_config(doc, command)


def apply_overrides(cfg: RunConfig, *, delta=None, trials=None, seed=None, horizon=None, out=None,
                    fmt=None, tau0_variant=None, verbosity=None) -> RunConfig:
    if horizon is not None:
        if cfg.family is None:
            raise ValidationError("--horizon given but the config has no experiment.family")
        cfg.family = cfg.family.with_horizon(horizon)
    if seed is not None:
        cfg.base_seed = seed
        if cfg.family is not None and cfg.command == "simulate":
            cfg.family = cfg.family.with_seed(seed)
    if delta is not None or tau0_variant is not None or cfg.params is None:
        base = cfg.params
        c = base.increment_bound if base else (cfg.family.increment_bound if cfg.family else E2)
        d = delta if delta is not None else (base.delta if base else 0.05)
        v = tau0_variant if tau0_variant is not None else (base.tau0_variant if base else "thm")
        if isinstance(d, float) and math.isnan(d):
            raise ValidationError("delta must be a number")
        cfg.params = BoundParams(d, c, v)
    if trials is not None:
        cfg.n_trials = trials
    if out is not None:
        cfg.output_path = out
    if fmt is not None:
        cfg.output_format = fmt
    if verbosity is not None:
        cfg.verbosity = verbosity
    return cfg
