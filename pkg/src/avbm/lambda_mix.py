"""The mixing measure over the scale parameter lambda and checks built on it.

The measure has density 1/(|l| ln^2(1/|l|)) on [-e^-2, e^-2] minus {0}. Under
the substitution w = 1/ln(1/|l|) each half-line becomes the uniform measure on
(0, 1/2], which is how both the sampler and the quadratures work.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate, stats

from .bounds import (
    BERNSTEIN_SCALE,
    LAMBDA0,
    BoundParams,
    ConvergenceError,
    MixtureState,
    ValidationError,
    canonical_tau0_threshold,
)

SUPPORT = math.exp(-2.0)


def density(lam):
    a = np.abs(np.asarray(lam, dtype=float))
    out = np.zeros_like(a)
    ok = (a > 0) & (a <= SUPPORT)
    out[ok] = 1.0 / (a[ok] * np.log(1.0 / a[ok]) ** 2)
    return out


def half_mass(x: float) -> float:
    """Closed-form mass of (0, x] for x in (0, e^-2]."""
    return 1.0 / math.log(1.0 / x)


def cdf(x):
    """Distribution function of lambda (sign symmetric)."""
    x = np.asarray(x, dtype=float)
    a = np.clip(np.abs(x), 0.0, SUPPORT)
    with np.errstate(divide="ignore"):
        m = np.where(a > 0, -1.0 / np.log(np.where(a > 0, a, 1.0)), 0.0)
    return np.where(x < 0, 0.5 - m, 0.5 + m)


def quad_mass(a: float, b: float) -> float:
    """Quadrature of the density over [a, b] within (0, e^-2], in the log variable."""
    if not 0.0 <= a <= b <= SUPPORT:
        raise ValidationError(f"interval [{a}, {b}] must lie in [0, e^-2]")
    lo = math.log(a) if a > 0 else -np.inf
    # dl / (l ln^2(1/l)) = ds / s^2 with s = -ln l
    val, err = integrate.quad(lambda y: 1.0 / (y * y), -math.log(b), -lo if a > 0 else np.inf,
                              epsabs=1e-14, epsrel=1e-13, limit=200)
    if not math.isfinite(val) or err > 1e-9:
        raise ConvergenceError(f"quadrature error estimate {err} too large")
    return val


def total_mass() -> float:
    pos = quad_mass(0.0, SUPPORT)
    return 2.0 * pos


def sample(rng: np.random.Generator, size=None):
    """Draw lambda: uniform sign, magnitude exp(-1/w) with w uniform on (0, 1/2].

    Magnitudes below the smallest normal double (w < ~1/708, probability
    about 0.14% per draw) are clamped to it so no draw is exactly zero.
    """
    w = 0.5 * (1.0 - rng.random(size))  # (0, 1/2]
    sign = np.where(rng.random(size) < 0.5, -1.0, 1.0)
    return sign * np.maximum(np.exp(-1.0 / w), np.finfo(float).tiny)


def log_mixture_integral(m: float, u: float, quadrature_points: int = 200) -> float:
    """ln of the P_lambda-average of exp(lambda m - lambda^2 u / 2), canonical scale.

    The Gaussian factor is centred at lambda* = m/u; that peak is factored out
    analytically and the remainder integrated in w = 1/ln(1/|lambda|).
    """
    if not u > 0:
        raise ValidationError("u must be positive")
    peak = m / u
    width = 1.0 / math.sqrt(u)

    def integrand(w):
        a = math.exp(-1.0 / w) if w > 0 else 0.0
        return math.exp(-0.5 * u * (a - peak) ** 2) + math.exp(-0.5 * u * (a + peak) ** 2)

    def to_w(a):
        return 1.0 / math.log(1.0 / a)

    breaks = set()
    for k in (0.0, -8.0, -3.0, -1.0, 1.0, 3.0, 8.0):
        a = abs(peak) + k * width
        if 0.0 < a < SUPPORT:
            breaks.add(to_w(a))
    for a in (width, 3.0 * width, 8.0 * width):
        if 0.0 < a < SUPPORT:
            breaks.add(to_w(a))
    edges = [0.0] + sorted(breaks) + [0.5]
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi <= lo:
            continue
        val, err = integrate.quad(integrand, lo, hi, epsabs=0.0, epsrel=1e-12, limit=quadrature_points)
        if not math.isfinite(val) or err > 1e-8 * max(val, 1e-300) + 1e-300:
            raise ConvergenceError(f"mixture quadrature on [{lo}, {hi}] did not converge (err {err})")
        total += val
    if total <= 0.0:
        raise ConvergenceError("mixture quadrature underflowed to zero")
    return 0.5 * m * m / u + math.log(total)


def log_averaging_lower_bound(m: float, u: float, k: float = 1.0 / 3.0) -> float:
    """ln of 2 exp(m^2 (1-k) / (2u)) / ln^2(u / ((1 - sqrt k)|m|))."""
    lg = math.log(u / ((1.0 - math.sqrt(k)) * abs(m)))
    return math.log(2.0) + 0.5 * m * m * (1.0 - k) / u - 2.0 * math.log(abs(lg))


def averaged_process_lower_bound_check(
    state: MixtureState, params: BoundParams, quadrature_points: int = 200
) -> tuple[float, float, bool]:
    """Pathwise check of the lambda-averaging lower bound inside the LLN event.

    Returns ``(ln lhs, ln rhs, holds)``; values are logarithms because both
    sides overflow for large variances. ``holds`` is lhs >= rhs (1 - 1e-9).
    """
    s = params.scale
    m = s * state.mean_m
    u = BERNSTEIN_SCALE * s * s * state.mean_v
    if m == 0.0:
        raise ValidationError("mean_m must be nonzero")
    if not abs(m) <= params.lambda0 * u:
        raise ValidationError("state lies outside the LLN event |m| <= lambda0 u")
    lhs = log_mixture_integral(m, u, quadrature_points)
    rhs = log_averaging_lower_bound(m, u, params.k)
    return lhs, rhs, lhs >= rhs + math.log1p(-1e-9)


def two_point_mixture_bound_check(state: MixtureState, params: BoundParams) -> tuple[float, float, bool]:
    """Y = mean over lambda in {+-lambda0} versus half of exp(lambda0 |m| - lambda0^2 u / 2)."""
    s = params.scale
    m = s * state.mean_m
    u = BERNSTEIN_SCALE * s * s * state.mean_v
    x = abs(LAMBDA0 * m)
    base = -0.5 * LAMBDA0**2 * u
    log_y = base + x + math.log1p(math.exp(-2.0 * x)) - math.log(2.0)
    log_lower = base + x - math.log(2.0)
    with np.errstate(over="ignore"):
        y, lower = float(np.exp(log_y)), float(np.exp(log_lower))
    return y, lower, log_y >= log_lower


def random_lln_states(rng: np.random.Generator, n: int, params: BoundParams, u_max: float = 1e6):
    """Random canonical (m, u) pairs inside the LLN event with u in [threshold, u_max]."""
    lo = canonical_tau0_threshold(params.delta, 0.0, params.tau0_variant)
    u = np.exp(rng.uniform(math.log(lo), math.log(u_max), n))
    frac = np.exp(rng.uniform(math.log(1e-6), 0.0, n))
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    return sign * frac * LAMBDA0 * u, u


def run_lambda_checks(params: BoundParams, n_samples: int = 1_000_000, n_states: int = 10_000,
                      quadrature_points: int = 200, seed: int = 0) -> dict:
    """Mass, CDF, sampler and averaging-bound checks for the mixing measure."""
    xs = np.exp(-np.linspace(2.0, 60.0, 100))
    cdf_err = max(abs(quad_mass(0.0, x) - half_mass(x)) for x in xs)
    rng = np.random.default_rng(seed)
    draws = sample(rng, n_samples)
    ks = stats.kstest(draws, cdf)
    m, u = random_lln_states(rng, n_states, params)
    canon = BoundParams(params.delta, math.exp(2.0), params.tau0_variant)
    worst = math.inf
    failures = []
    for mi, ui in zip(m, u):
        st = MixtureState(0, float(mi), float(ui) / BERNSTEIN_SCALE)
        lhs, rhs, ok = averaged_process_lower_bound_check(st, canon, quadrature_points)
        worst = min(worst, lhs - rhs)
        if not ok:
            failures.append({"m": float(mi), "u": float(ui), "log_lhs": lhs, "log_rhs": rhs})
    return {
        "total_mass": total_mass(),
        "max_cdf_error": cdf_err,
        "ks_statistic": float(ks.statistic),
        "n_samples": n_samples,
        "averaging_bound": {"n_states": n_states, "min_log_margin": worst, "failures": failures},
    }
