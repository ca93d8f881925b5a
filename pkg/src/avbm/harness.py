"""Monte Carlo experiments: uniform coverage, the uniform LLN, tightness and proof objects.

Each trial draws one PathBundle from a seed derived from ``(base_seed, trial)``,
so results do not depend on how trials are scheduled across workers.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from . import bounds
from .bounds import (
    BERNSTEIN_SCALE,
    LAMBDA0,
    BoundParams,
    ConvergenceError,
    MixtureState,
    Posterior,
    ValidationError,
    evaluate_bound,
    violation_masks,
)
from .sim import FamilySpec, PathBundle, StopRule, generate

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class PosteriorPolicy:
    """Which posteriors a trial is tested against.

    ``fixed`` holds explicit weight vectors; ``gibbs`` holds temperatures for
    posteriors proportional to prior * exp(running_mean / temperature);
    ``posthoc_argmax`` puts a point mass on argmax_h |M_t(h)| at every t.
    """

    point_masses: bool = True
    uniform: bool = True
    posthoc_argmax: bool = True
    gibbs: tuple = ()
    fixed: tuple = ()
    prior: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "gibbs", tuple(float(x) for x in self.gibbs))
        object.__setattr__(self, "fixed", tuple(tuple(float(x) for x in w) for w in self.fixed))
        if self.prior is not None:
            object.__setattr__(self, "prior", tuple(float(x) for x in self.prior))
        if any(not temp > 0 for temp in self.gibbs):
            raise ValidationError("gibbs temperatures must be positive")
        if not (self.point_masses or self.uniform or self.posthoc_argmax or self.gibbs or self.fixed):
            raise ValidationError("posterior policy selects no posteriors")

    def prior_weights(self, n: int) -> np.ndarray:
        if self.prior is None:
            return np.full(n, 1.0 / n)
        p = np.asarray(self.prior)
        if p.size != n:
            raise ValidationError(f"prior has {p.size} entries, family has {n} hypotheses")
        return p

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gibbs"] = list(self.gibbs)
        d["fixed"] = [list(w) for w in self.fixed]
        d["prior"] = None if self.prior is None else list(self.prior)
        return d


@dataclass(frozen=True)
class ExperimentSpec:
    family: FamilySpec
    params: BoundParams
    posteriors: PosteriorPolicy = field(default_factory=PosteriorPolicy)
    n_trials: int = 1
    base_seed: int = 0

    def __post_init__(self):
        if int(self.n_trials) < 1:
            raise ValidationError("n_trials must be >= 1")
        if not 0 <= int(self.base_seed) < 2**64:
            raise ValidationError("base_seed must be a 64-bit unsigned integer")
        if self.params.increment_bound < self.family.increment_bound:
            raise ValidationError(
                "params.increment_bound is smaller than the family's increment bound; "
                "the bound's boundedness hypothesis would not hold"
            )
        # fail early on a bad prior / fixed posterior
        _fixed_posteriors(self.posteriors, self.family.n_hypotheses)

    def trial_seed(self, trial: int) -> int:
        return derive_seed(self.base_seed, trial)

    def trial_family(self, trial: int) -> FamilySpec:
        return self.family.with_seed(self.trial_seed(trial))


def derive_seed(base_seed: int, trial: int) -> int:
    state = np.random.SeedSequence([int(base_seed), int(trial)]).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def _fixed_posteriors(policy: PosteriorPolicy, n: int) -> list[tuple[str, Posterior]]:
    prior = policy.prior_weights(n)
    out = []
    if policy.point_masses:
        out += [(f"point:{h}", Posterior.point_mass(h, n, prior)) for h in range(n)]
    if policy.uniform:
        out.append(("uniform", Posterior(np.full(n, 1.0 / n), prior)))
    for i, w in enumerate(policy.fixed):
        if len(w) != n:
            raise ValidationError(f"fixed posterior {i} has {len(w)} entries, family has {n}")
        out.append((f"fixed:{i}", Posterior(np.asarray(w), prior)))
    return out


@dataclass
class PosteriorTrack:
    """Mixture trajectories for one posterior (fixed or time-varying) over t = 0..T."""

    label: str
    mean_m: np.ndarray
    mean_v: np.ndarray
    kl: np.ndarray
    weights: np.ndarray  # (n,) or (T+1, n)


def posterior_tracks(bundle: PathBundle, policy: PosteriorPolicy) -> list[PosteriorTrack]:
    n, T = bundle.n_hypotheses, bundle.horizon
    prior = policy.prior_weights(n)
    tracks = []
    for label, rho in _fixed_posteriors(policy, n):
        kl = np.full(T + 1, bounds.kl_divergence(rho))
        tracks.append(PosteriorTrack(label, rho.weights @ bundle.m, rho.weights @ bundle.v, kl, rho.weights))
    cols = np.arange(T + 1)
    if policy.posthoc_argmax:
        best = np.argmax(np.abs(bundle.m), axis=0)
        w = np.zeros((T + 1, n))
        w[cols, best] = 1.0
        tracks.append(PosteriorTrack("posthoc-argmax", bundle.m[best, cols], bundle.v[best, cols],
                                     -np.log(prior[best]), w))
    for temp in policy.gibbs:
        running = bundle.m / np.maximum(cols, 1)
        logw = np.log(prior)[:, None] + running / temp
        logw -= logsumexp(logw, axis=0)
        w = np.exp(logw)
        w /= w.sum(axis=0)
        kl = np.sum(w * (logw - np.log(prior)[:, None]), axis=0)
        tracks.append(PosteriorTrack(f"gibbs:{temp!r}", np.sum(w * bundle.m, axis=0),
                                     np.sum(w * bundle.v, axis=0), np.maximum(kl, 0.0), w.T.copy()))
    return tracks


@dataclass
class TrialResult:
    trial: int
    seed: int
    violated: bool = False
    clauses: tuple = ()
    first_violation_t: Optional[int] = None
    witness: Optional[dict] = None
    posterior_violations: tuple = ()
    error: Optional[str] = None


def evaluate_trial(bundle: PathBundle, policy: PosteriorPolicy, params: BoundParams,
                   clauses: Sequence[str] = ("lln", "lil"), variant: Optional[str] = None,
                   trial: int = 0, seed: int = 0) -> TrialResult:
    """Test every posterior at every t >= 1 and keep the earliest violation as witness."""
    res = TrialResult(trial=trial, seed=seed)
    hit_clauses = set()
    hit_posteriors = []
    best = None
    for tr in posterior_tracks(bundle, policy):
        _, lln_fail, lil_fail = violation_masks(tr.mean_m, tr.mean_v, tr.kl, params, variant)
        lln_fail[0] = lil_fail[0] = False
        fails = {"lln": lln_fail, "lil": lil_fail}
        any_fail = np.zeros_like(lln_fail)
        for c in clauses:
            if fails[c].any():
                hit_clauses.add(c)
            any_fail |= fails[c]
        if not any_fail.any():
            continue
        hit_posteriors.append(tr.label)
        t = int(np.argmax(any_fail))
        if best is None or t < best[0]:
            best = (t, tr, [c for c in clauses if fails[c][t]])
    if best is not None:
        t, tr, which = best
        w = tr.weights if tr.weights.ndim == 1 else tr.weights[t]
        res.violated = True
        res.first_violation_t = t
        res.clauses = tuple(sorted(hit_clauses))
        res.posterior_violations = tuple(hit_posteriors)
        res.witness = {
            "t": t,
            "posterior": tr.label,
            "weights": [float(x) for x in w],
            "kl": float(tr.kl[t]),
            "mean_m": float(tr.mean_m[t]),
            "mean_v": float(tr.mean_v[t]),
            "clauses": which,
            "radius": _witness_radius(tr, t, params, which),
        }
    return res


def _witness_radius(tr: PosteriorTrack, t: int, params: BoundParams, which) -> float:
    s = params.scale
    if "lln" in which:
        return float(LAMBDA0 * BERNSTEIN_SCALE * tr.mean_v[t] * s)
    v = tr.mean_v[t] * s * s
    r = bounds.canonical_implicit_radius(v, params.delta, float(tr.kl[t]))
    return float(max(r, 1.0) / s)


def reverify_witness(witness: dict, prior, params: BoundParams, variant: Optional[str] = None) -> bool:
    """Re-evaluate a recorded witness through the scalar bound evaluator."""
    rho = Posterior(np.asarray(witness["weights"]), np.asarray(prior))
    if variant is not None:
        params = BoundParams(params.delta, params.increment_bound, variant)
    state = MixtureState(witness["t"], witness["mean_m"], witness["mean_v"])
    rep = evaluate_bound(state, rho, params, bounds.tau0_reached(state, rho, params))
    flags = {"lln": rep.lln_violated, "lil": rep.lil_violated}
    return all(flags[c] for c in witness["clauses"])


def wilson_upper(k: int, n: int, level: float = 0.95) -> float:
    """Upper end of the two-sided Wilson score interval."""
    z = norm.ppf(0.5 + level / 2.0)
    p = k / n
    centre = p + z * z / (2 * n)
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    # the exact limit is >= p; clamp away rounding at k = n
    return min(1.0, max(p, (centre + half) / (1 + z * z / n)))


def _worker_count(workers: Optional[int]) -> int:
    if workers is None:
        workers = int(os.environ.get("AVBM_WORKERS", "1"))
    if workers < 1:
        raise ValidationError("workers must be >= 1")
    return workers


def _run_chunk(fn: Callable, spec: ExperimentSpec, trials: Sequence[int], kwargs: dict):
    return [fn(spec, i, **kwargs) for i in trials]


def map_trials(fn: Callable, spec: ExperimentSpec, workers: Optional[int] = None, **kwargs) -> list:
    """Apply ``fn(spec, trial, **kwargs)`` to every trial, results in trial order."""
    workers = _worker_count(workers)
    idx = list(range(spec.n_trials))
    if workers == 1 or spec.n_trials == 1:
        return _run_chunk(fn, spec, idx, kwargs)
    n_chunks = min(spec.n_trials, workers * 4)
    chunks = [idx[i::n_chunks] for i in range(n_chunks)]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        parts = list(ex.map(_run_chunk, [fn] * n_chunks, [spec] * n_chunks, chunks, [kwargs] * n_chunks))
    out = [None] * spec.n_trials
    for chunk, part in zip(chunks, parts):
        for i, r in zip(chunk, part):
            out[i] = r
    return out


def _coverage_trial(spec: ExperimentSpec, trial: int, clauses, variant) -> TrialResult:
    seed = spec.trial_seed(trial)
    try:
        bundle = generate(spec.family.with_seed(seed))
        return evaluate_trial(bundle, spec.posteriors, spec.params, clauses, variant, trial, seed)
    except (ValidationError, ConvergenceError, FloatingPointError, AssertionError) as exc:
        return TrialResult(trial=trial, seed=seed, error=f"{type(exc).__name__}: {exc}")


@dataclass
class CoverageReport:
    n_trials: int
    n_violating_trials: int
    empirical_rate: float
    wilson_upper_95: float
    clause_counts: dict
    posterior_counts: dict
    first_violation_histogram: dict
    violating_trials: list
    witnesses: list
    errors: list
    clauses: tuple
    tau0_variant: str

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clauses"] = list(self.clauses)
        d["first_violation_histogram"] = [[t, c] for t, c in sorted(self.first_violation_histogram.items())]
        return d

    def histogram_rows(self) -> list[dict]:
        rows, cum = [], 0
        for t, c in sorted(self.first_violation_histogram.items()):
            cum += c
            rows.append({"t": t, "first_violations": c, "cumulative": cum})
        return rows


def _aggregate(spec: ExperimentSpec, results: list[TrialResult], clauses, variant) -> CoverageReport:
    ok = [r for r in results if r.error is None]
    bad = [r for r in results if r.violated]
    clause_counts = {c: sum(c in r.clauses for r in bad) for c in clauses}
    post_counts: dict = {}
    hist: dict = {}
    for r in bad:
        for p in r.posterior_violations:
            post_counts[p] = post_counts.get(p, 0) + 1
        hist[r.first_violation_t] = hist.get(r.first_violation_t, 0) + 1
    n = len(ok)
    rate = len(bad) / n if n else float("nan")
    return CoverageReport(
        n_trials=spec.n_trials,
        n_violating_trials=len(bad),
        empirical_rate=rate,
        wilson_upper_95=wilson_upper(len(bad), n) if n else float("nan"),
        clause_counts=clause_counts,
        posterior_counts=dict(sorted(post_counts.items())),
        first_violation_histogram=hist,
        violating_trials=[r.trial for r in bad],
        witnesses=[{"trial": r.trial, "seed": r.seed, **r.witness} for r in bad],
        errors=[{"trial": r.trial, "seed": r.seed, "error": r.error} for r in results if r.error],
        clauses=tuple(clauses),
        tau0_variant=variant,
    )


def run_coverage(spec: ExperimentSpec, workers: Optional[int] = None) -> CoverageReport:
    """Trial-level violation rate of both clauses of the time/posterior-uniform bound."""
    variant = spec.params.tau0_variant
    results = map_trials(_coverage_trial, spec, workers, clauses=("lln", "lil"), variant=variant)
    return _aggregate(spec, results, ("lln", "lil"), variant)


def run_lln_coverage(spec: ExperimentSpec, workers: Optional[int] = None) -> CoverageReport:
    """Trial-level violation rate of the uniform LLN event, with the ln(2/delta) threshold."""
    results = map_trials(_coverage_trial, spec, workers, clauses=("lln",), variant="proof")
    return _aggregate(spec, results, ("lln",), "proof")


def run_tightness_comparison(spec: ExperimentSpec, t_grid: Sequence[int]) -> list[dict]:
    """Explicit radius versus the fixed-time baseline along ``t_grid`` on trial 0's path."""
    t_grid = sorted(int(t) for t in t_grid)
    if not t_grid or t_grid[0] < 1 or t_grid[-1] > spec.family.horizon:
        raise ValidationError(f"t_grid must lie within [1, {spec.family.horizon}]")
    bundle = generate(spec.trial_family(0))
    params = spec.params
    rows = []
    for tr in posterior_tracks(bundle, spec.posteriors):
        for t in t_grid:
            state = MixtureState(t, float(tr.mean_m[t]), float(tr.mean_v[t]))
            kl = float(tr.kl[t])
            v = state.mean_v * params.scale**2
            ours = bounds.canonical_explicit_radius(v, params.delta, kl) if v > 0 else None
            base = bounds.canonical_seldin_radius(v, t, params.delta, kl)
            ours = None if ours is None else ours / params.scale
            base = None if base is None else base / params.scale
            lil_norm = None
            if ours is not None and state.mean_v > math.e:
                lil_norm = ours / math.sqrt(2.0 * state.mean_v * math.log(math.log(state.mean_v)))
            rows.append({
                "posterior": tr.label,
                "t": t,
                "mean_v": state.mean_v,
                "kl": kl,
                "lil_radius_explicit": ours,
                "seldin_fixed_time_radius": base,
                "ratio": None if ours is None or base is None else ours / base,
                "lil_normalized_ratio": lil_norm,
            })
    return rows


def _mean_se(x) -> dict:
    x = np.asarray(x, dtype=float)
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return {"estimate": float(x.mean()), "std_error": se}


def _proof_trial(spec: ExperimentSpec, trial: int, lambdas, stop_rule: StopRule) -> dict:
    seed = spec.trial_seed(trial)
    bundle = generate(spec.family.with_seed(seed))
    params = spec.params
    s = params.scale
    out = {"z": {}, "abs": {}, "x_final": {}, "in_b": True}
    for tr in posterior_tracks(bundle, spec.posteriors):
        tau = int(stop_rule.stopping_index(tr.mean_m))
        m = s * tr.mean_m[tau]
        u = BERNSTEIN_SCALE * s * s * tr.mean_v[tau]
        kl = float(tr.kl[tau])
        with np.errstate(over="ignore"):
            out["z"][tr.label] = {repr(lam): float(np.exp(lam * m - 0.5 * lam * lam * u)) for lam in lambdas}
            out["abs"][tr.label] = float(np.exp(LAMBDA0 * abs(m) - 0.5 * LAMBDA0**2 * u))
        out.setdefault("kl", {})[tr.label] = kl
        out["x_final"][tr.label] = abs(float(tr.mean_m[-1]))
        _, lln_fail, _ = violation_masks(tr.mean_m, tr.mean_v, tr.kl, params, "proof")
        lln_fail[0] = False
        if lln_fail.any():
            out["in_b"] = False
    return out


def run_proof_object_suite(spec: ExperimentSpec, lambdas: Sequence[float] = (LAMBDA0, -LAMBDA0),
                           stop_rule="never", workers: Optional[int] = None) -> dict:
    """Monte Carlo estimates of the moment bounds used in the proof, each with its inequality.

    * ``mgf``: E[exp(lam <M_tau> - lam^2/2 <U_tau> - KL)] <= 1 for every posterior
      (for fixed posteriors also E[exp(...)] <= e^KL).
    * ``two_point``: E[exp(lambda0 |<M_tau>| - lambda0^2/2 <U_tau> - KL)] <= 2.
    * ``restriction``: E[X | B] <= E[X] / (1 - delta) with X = |<M_T>|, B the LLN event.
    """
    for lam in lambdas:
        if not abs(lam) <= math.exp(-2.0):
            raise ValidationError(f"|lambda| must be <= e^-2, got {lam!r}")
    rule = stop_rule if isinstance(stop_rule, StopRule) else StopRule.parse(stop_rule)
    results = map_trials(_proof_trial, spec, workers, lambdas=tuple(lambdas), stop_rule=rule)
    labels = list(results[0]["z"])
    checks = []
    for label in labels:
        kls = np.array([r["kl"][label] for r in results])
        fixed = bool(np.all(kls == kls[0]))
        for lam in lambdas:
            z = np.array([r["z"][label][repr(lam)] for r in results])
            est = _mean_se(z * np.exp(-kls))
            checks.append({"object": "mgf", "posterior": label, "lambda": lam, "bound": 1.0, **est,
                           "holds": est["estimate"] <= 1.0 + 2 * est["std_error"]})
            if fixed:
                raw = _mean_se(z)
                bound = math.exp(kls[0])
                checks.append({"object": "mgf_raw", "posterior": label, "lambda": lam, "bound": bound, **raw,
                               "holds": raw["estimate"] <= bound + 2 * raw["std_error"]})
        a = np.array([r["abs"][label] for r in results]) * np.exp(-kls)
        est = _mean_se(a)
        checks.append({"object": "two_point", "posterior": label, "lambda": LAMBDA0, "bound": 2.0, **est,
                       "holds": est["estimate"] <= 2.0 + 2 * est["std_error"]})
    in_b = np.array([r["in_b"] for r in results])
    delta = spec.params.delta
    for label in labels:
        x = np.array([r["x_final"][label] for r in results])
        full = _mean_se(x)
        if in_b.any():
            restricted = _mean_se(x[in_b])
            bound = full["estimate"] / (1.0 - delta)
            se = math.hypot(restricted["std_error"], full["std_error"] / (1.0 - delta))
            checks.append({"object": "restriction", "posterior": label, "bound": bound,
                           "estimate": restricted["estimate"], "std_error": se,
                           "p_b": float(in_b.mean()),
                           "holds": restricted["estimate"] <= bound + 2 * se})
    return {
        "n_paths": spec.n_trials,
        "stop_rule": "never" if rule.level is None else f"cross:{rule.level!r}",
        "lambdas": list(lambdas),
        "p_b": float(in_b.mean()),
        "checks": checks,
        "all_hold": all(c["holds"] for c in checks),
    }
