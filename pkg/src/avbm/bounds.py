"""Closed-form quantities for the time-uniform PAC-Bayes Bernstein bound.

All radius formulas are stated for martingale families whose increments are
bounded by ``e**2``. Families with a different increment bound ``c`` are mapped
onto that canonical scale (``M' = (e^2/c) M``, ``V' = (e^2/c)^2 V``) before the
formulas are applied, and radii are mapped back by ``c/e^2``.

The scalar helpers prefixed ``canonical_`` work directly on canonical-scale
numbers and take ``delta`` as a plain positive float, so they can be probed
outside the ``(0, 1)`` range (e.g. ``delta = 2`` zeroes ``ln(2/delta)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

E = math.e
E2 = math.exp(2.0)
BERNSTEIN_SCALE = 2.0 * (E - 2.0)
K = 1.0 / 3.0
SELDIN_CONST = (1.0 + E) ** 2 * (E - 2.0)

TAU0_VARIANTS = ("thm", "proof")


class ValidationError(ValueError):
    """Invalid user-supplied parameters or inputs."""


class ConvergenceError(ArithmeticError):
    """A numeric routine failed to converge."""


def lambda0_value(k: float = K) -> float:
    return 1.0 / (E2 * (1.0 + math.sqrt(k)))


LAMBDA0 = lambda0_value()


@dataclass(frozen=True)
class BoundParams:
    """Failure probability, increment bound and the derived constants.

    ``tau0_variant`` selects the log term of the variance threshold:
    ``"thm"`` uses ln(4/delta), ``"proof"`` uses ln(2/delta).
    """

    delta: float
    increment_bound: float = E2
    tau0_variant: str = "thm"
    k: float = field(default=K, init=False)
    lambda0: float = field(default=LAMBDA0, init=False)
    bernstein_scale: float = field(default=BERNSTEIN_SCALE, init=False)

    def __post_init__(self):
        if not (0.0 < self.delta < 1.0) or math.isnan(self.delta):
            raise ValidationError(f"delta must lie in (0, 1), got {self.delta!r}")
        if not (self.increment_bound > 0.0) or not math.isfinite(self.increment_bound):
            raise ValidationError(
                f"increment_bound must be positive and finite, got {self.increment_bound!r}"
            )
        if self.tau0_variant not in TAU0_VARIANTS:
            raise ValidationError(
                f"tau0_variant must be one of {TAU0_VARIANTS}, got {self.tau0_variant!r}"
            )

    @property
    def scale(self) -> float:
        """Multiplier taking user-scale M onto the canonical e^2 scale."""
        return E2 / self.increment_bound

    def with_delta(self, delta: float) -> "BoundParams":
        return BoundParams(delta, self.increment_bound, self.tau0_variant)


@dataclass(frozen=True)
class Posterior:
    """A posterior ``weights`` over hypotheses 0..n-1 and its prior."""

    weights: np.ndarray
    prior_weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        p = np.asarray(self.prior_weights, dtype=float)
        if w.ndim != 1 or w.shape != p.shape or w.size == 0:
            raise ValidationError(
                f"weights and prior_weights must be 1-d of equal length, got {w.shape} and {p.shape}"
            )
        if not (np.all(np.isfinite(w)) and np.all(w >= 0.0)):
            raise ValidationError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValidationError(f"weights must sum to 1, got {w.sum()!r}")
        if not (np.all(np.isfinite(p)) and np.all(p > 0.0)):
            raise ValidationError("prior_weights must be finite and strictly positive")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValidationError(f"prior_weights must sum to 1, got {p.sum()!r}")
        w.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "prior_weights", p)

    @property
    def n(self) -> int:
        return self.weights.size

    @classmethod
    def uniform(cls, n: int) -> "Posterior":
        u = np.full(n, 1.0 / n)
        return cls(u, u.copy())

    @classmethod
    def point_mass(cls, h: int, n: int, prior=None) -> "Posterior":
        w = np.zeros(n)
        w[h] = 1.0
        prior = np.full(n, 1.0 / n) if prior is None else prior
        return cls(w, prior)


@dataclass(frozen=True)
class MixtureState:
    """Posterior means of M_t and V_t at time ``t`` (user scale)."""

    t: int
    mean_m: float
    mean_v: float

    def __post_init__(self):
        if self.mean_v < 0.0 or math.isnan(self.mean_v):
            raise ValidationError(f"mean_v must be nonnegative, got {self.mean_v!r}")

    @property
    def mean_u(self) -> float:
        return BERNSTEIN_SCALE * self.mean_v


@dataclass(frozen=True)
class RadiusReport:
    t: int
    tau0_reached: bool
    lln_radius: float
    lil_radius_implicit: Optional[float]
    lil_radius_explicit: Optional[float]
    zeta: Optional[float]
    lln_violated: bool
    lil_violated: bool

    @property
    def violated(self) -> bool:
        return self.lln_violated or self.lil_violated


def _canonical(state: MixtureState, params: BoundParams) -> tuple[float, float]:
    s = params.scale
    return s * state.mean_m, s * s * state.mean_v


def kl_divergence(rho: Posterior) -> float:
    w, p = rho.weights, rho.prior_weights
    mask = w > 0.0
    kl = float(np.sum(w[mask] * np.log(w[mask] / p[mask])))
    return max(kl, 0.0)


def lambda0(params: BoundParams) -> float:
    return lambda0_value(params.k)


def log_term(delta: float, variant: str = "thm") -> float:
    """ln(4/delta) for the default "thm" threshold, ln(2/delta) for the "proof" variant."""
    if variant == "thm":
        return math.log(4.0 / delta)
    if variant == "proof":
        return math.log(2.0 / delta)
    raise ValidationError(f"unknown tau0 variant {variant!r}")


def canonical_tau0_threshold(delta: float, kl: float, variant: str = "thm") -> float:
    return 2.0 / LAMBDA0**2 * (log_term(delta, variant) + kl)


def tau0_threshold(rho: Posterior, params: BoundParams) -> float:
    """Value the canonical mixture ``<U_s>`` must reach for the bound to apply.

    Returned on the canonical scale; compare against ``params.scale**2 * U``.
    """
    return canonical_tau0_threshold(params.delta, kl_divergence(rho), params.tau0_variant)


def tau0_reached(state: MixtureState, rho: Posterior, params: BoundParams) -> bool:
    # <V_s> is nondecreasing, so "t >= tau0" is the same as crossing at t.
    _, v = _canonical(state, params)
    return BERNSTEIN_SCALE * v >= tau0_threshold(rho, params)


def lln_bound_holds(state: MixtureState, params: BoundParams) -> bool:
    m, v = _canonical(state, params)
    u = BERNSTEIN_SCALE * v
    if u == 0.0:
        return m == 0.0
    return abs(m) <= params.lambda0 * u


def _safe_loglog(x):
    """ln ln x clamped to 0 for x <= e (where the term would be negative or undefined)."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    ok = x > E
    out[ok] = np.log(np.log(x[ok]))
    return out


def canonical_lil_rhs(r, v, delta: float, kl):
    """Right side of the implicit clause evaluated at deviation ``r``.

    sqrt(6(e-2) v (2 lnln(3(e-2) v / r) + ln(2/delta) + KL)), with the
    iterated-log term clamped at 0 when its argument is at most e.
    Nonincreasing in ``r``.
    """
    r = np.asarray(r, dtype=float)
    v = np.asarray(v, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        arg = 3.0 * (E - 2.0) * v / r
    # v == 0 gives a zero radius; r == 0 < v gives an infinite one
    arg = np.where(v > 0, np.where(r > 0, arg, np.inf), 0.0)
    inner = 2.0 * _safe_loglog(arg) + math.log(2.0 / delta) + kl
    out = np.sqrt(6.0 * (E - 2.0) * v * np.maximum(inner, 0.0))
    return out if out.ndim else float(out)


def canonical_implicit_radius(
    v: float, delta: float, kl: float, max_iter: int = 200, lo: float = 1e-12
) -> float:
    """Fixed point r = canonical_lil_rhs(r) by bisection.

    ``r - rhs(r)`` is strictly increasing, so the root is unique. The bracket
    is [lo, rhs(lo)]: rhs(lo) >= lo implies rhs(rhs(lo)) <= rhs(lo).
    """
    if not v > 0.0:
        raise ValidationError(f"mean_v must be positive for the implicit radius, got {v!r}")

    def h(r):
        return r - float(canonical_lil_rhs(r, v, delta, kl))

    hi = float(canonical_lil_rhs(lo, v, delta, kl))
    if h(lo) >= 0.0:
        return lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if h(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    else:
        if hi - lo > 1e-12 * hi:
            raise ConvergenceError(
                f"bisection did not converge in {max_iter} iterations, residual {h(hi)!r}"
            )
    return hi


def canonical_explicit_radius(v: float, delta: float, kl: float) -> Optional[float]:
    """Explicit radius, or None while 3(e-2)v <= e (pre-loglog regime)."""
    x = 3.0 * (E - 2.0) * v
    if not x > E:
        return None
    return math.sqrt(6.0 * (E - 2.0) * v * (2.0 * math.log(math.log(x)) + math.log(2.0 / delta) + kl))


def canonical_zeta(m: float, u: float, delta: float, kl: float, k: float = K) -> Optional[float]:
    """Proof-level radius; None at m == 0 or where the log argument is below 1."""
    if m == 0.0 or not u > 0.0:
        return None
    lg = math.log(u / ((1.0 - math.sqrt(k)) * abs(m)))
    if lg == 0.0:
        return None
    inner = math.log(2.0 * lg * lg / delta) + kl
    if inner < 0.0:
        return None
    return math.sqrt(2.0 * u / (1.0 - k) * inner)


def canonical_seldin_radius(v: float, t: int, delta: float, kl: float) -> Optional[float]:
    """Fixed-time baseline; None where (e-2)t/ln(2/delta) <= e."""
    arg = (E - 2.0) * t / math.log(2.0 / delta)
    if not arg > E:
        return None
    return math.sqrt(SELDIN_CONST * v * (math.log(math.log(arg)) + math.log(2.0 / delta) + kl))


def lil_radius_implicit(state: MixtureState, rho: Posterior, params: BoundParams) -> Optional[float]:
    """Implicit iterated-log radius on the user scale (None when mean_v == 0)."""
    _, v = _canonical(state, params)
    if v == 0.0:
        return None
    return canonical_implicit_radius(v, params.delta, kl_divergence(rho)) / params.scale


def lil_radius_explicit(state: MixtureState, rho: Posterior, params: BoundParams) -> Optional[float]:
    _, v = _canonical(state, params)
    r = canonical_explicit_radius(v, params.delta, kl_divergence(rho))
    return None if r is None else r / params.scale


def zeta(state: MixtureState, rho: Posterior, params: BoundParams) -> Optional[float]:
    m, v = _canonical(state, params)
    z = canonical_zeta(m, BERNSTEIN_SCALE * v, params.delta, kl_divergence(rho), params.k)
    return None if z is None else z / params.scale


def seldin_fixed_time_radius(
    state: MixtureState, rho: Posterior, params: BoundParams, t: Optional[int] = None
) -> Optional[float]:
    t = state.t if t is None else t
    _, v = _canonical(state, params)
    r = canonical_seldin_radius(v, t, params.delta, kl_divergence(rho))
    return None if r is None else r / params.scale


def dv_inequality_check(f_values, rho: Posterior) -> tuple[float, float, bool]:
    """Donsker-Varadhan: <f>_rho <= KL(rho||pi) + ln <e^f>_pi."""
    f = np.asarray(f_values, dtype=float)
    if f.shape != rho.weights.shape:
        raise ValidationError(f"f_values has shape {f.shape}, posterior has {rho.weights.shape}")
    if not np.all(np.isfinite(f)):
        raise ValidationError("f_values must be finite")
    lhs = float(np.dot(rho.weights, f))
    rhs = kl_divergence(rho) + float(logsumexp(f, b=rho.prior_weights))
    return lhs, rhs, lhs <= rhs + 1e-12


def gibbs_posterior(f_values, prior) -> np.ndarray:
    """Maximiser of <f>_rho - KL(rho||pi), proportional to pi * e^f."""
    f = np.asarray(f_values, dtype=float)
    logw = np.log(np.asarray(prior, dtype=float)) + f
    w = np.exp(logw - logsumexp(logw))
    return w / w.sum()


def evaluate_bound(
    state: MixtureState, rho: Posterior, params: BoundParams, tau0_reached: bool
) -> RadiusReport:
    m, v = _canonical(state, params)
    u = BERNSTEIN_SCALE * v
    kl = kl_divergence(rho)
    s = params.scale
    lln_radius = params.lambda0 * u / s
    explicit = canonical_explicit_radius(v, params.delta, kl) if v > 0 else None
    implicit = canonical_implicit_radius(v, params.delta, kl) if v > 0 else None
    z = canonical_zeta(m, u, params.delta, kl, params.k)

    lln_violated = lil_violated = False
    if tau0_reached:
        lln_violated = not lln_bound_holds(state, params)
        if implicit is None:
            lil_violated = abs(m) > 1.0
        else:
            lil_violated = abs(m) > max(implicit, 1.0)
    return RadiusReport(
        t=state.t,
        tau0_reached=bool(tau0_reached),
        lln_radius=lln_radius,
        lil_radius_implicit=None if implicit is None else implicit / s,
        lil_radius_explicit=None if explicit is None else explicit / s,
        zeta=None if z is None else z / s,
        lln_violated=bool(lln_violated),
        lil_violated=bool(lil_violated),
    )


def violation_masks(mean_m, mean_v, kl, params: BoundParams, variant: Optional[str] = None):
    """Vectorised clause tests over arrays of (user-scale) mixture states.

    Returns boolean arrays ``(gate, lln_fail, lil_fail)``. ``gate`` marks
    t >= tau0. The clause arrays are already gated. The implicit clause is
    tested without solving for the radius: since ``r - rhs(r)`` is strictly
    increasing, |m| exceeds the fixed point exactly when |m| > rhs(|m|).
    """
    s = params.scale
    m = np.abs(np.asarray(mean_m, dtype=float)) * s
    v = np.asarray(mean_v, dtype=float) * s * s
    kl = np.asarray(kl, dtype=float)
    u = BERNSTEIN_SCALE * v
    variant = params.tau0_variant if variant is None else variant
    thr = 2.0 / LAMBDA0**2 * (log_term(params.delta, variant) + kl)
    gate = (u >= thr) & (u > 0)
    lln_fail = gate & (m > params.lambda0 * u)
    lil_fail = gate & (m > 1.0) & (m > canonical_lil_rhs(m, v, params.delta, kl))
    return gate, lln_fail, lil_fail
