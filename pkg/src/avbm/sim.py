"""Seeded simulation of finite families of dependent bounded-increment martingales.

Every preset builds increments as ``scale_t(h) * noise_t(h)`` where the noise
is Rademacher (+-1) and the scale is F_{t-1}-measurable, so each step is
mean zero, bounded by the scale, and has conditional variance scale**2.

Randomness: numpy ``PCG64`` seeded through ``SeedSequence([seed])`` (or
``SeedSequence([seed, stream])`` for chunked Monte Carlo); noise is drawn as
``rng.integers(0, 2, size)`` mapped to {-1, +1}.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .bounds import E2, BoundParams, MixtureState, Posterior, ValidationError

KINDS = ("rademacher", "scaled-rademacher", "shared-noise-linear", "variance-switching")

MAGIC = b"AVBM"
FORMAT_VERSION = 1


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


@dataclass(frozen=True)
class FamilySpec:
    """Generative description of a martingale family.

    ``scales`` is per-hypothesis step size (scaled-rademacher), or
    per-hypothesis coefficient on the shared noise (shared-noise-linear).
    ``schedules`` lists, per hypothesis, step sizes cycled in blocks of
    ``block_length`` steps (variance-switching).
    """

    n_hypotheses: int
    horizon: int
    kind: str = "rademacher"
    increment_bound: float = 1.0
    seed: int = 0
    scales: Optional[tuple] = None
    schedules: Optional[tuple] = None
    block_length: int = 100

    def __post_init__(self):
        if int(self.n_hypotheses) < 1:
            raise ValidationError("n_hypotheses must be a positive integer")
        if int(self.horizon) < 1:
            raise ValidationError("horizon must be a positive integer")
        if self.kind not in KINDS:
            raise ValidationError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not (self.increment_bound > 0 and math.isfinite(self.increment_bound)):
            raise ValidationError("increment_bound must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        if int(self.block_length) < 1:
            raise ValidationError("block_length must be positive")
        if self.scales is not None:
            object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if self.schedules is not None:
            object.__setattr__(self, "schedules", tuple(tuple(float(x) for x in s) for s in self.schedules))

        n, c = self.n_hypotheses, self.increment_bound
        if self.kind == "rademacher":
            if c < 1.0:
                raise ValidationError("rademacher steps are +-1; increment_bound must be >= 1")
        elif self.kind in ("scaled-rademacher", "shared-noise-linear"):
            if self.scales is None or len(self.scales) != n:
                raise ValidationError(f"{self.kind} needs one entry of 'scales' per hypothesis")
            if max(abs(s) for s in self.scales) > c:
                raise ValidationError("every |scale| must be <= increment_bound")
        elif self.kind == "variance-switching":
            if self.schedules is None or len(self.schedules) != n or any(len(s) == 0 for s in self.schedules):
                raise ValidationError("variance-switching needs a non-empty schedule per hypothesis")
            if max(abs(x) for s in self.schedules for x in s) > c:
                raise ValidationError("every schedule entry must be <= increment_bound in magnitude")

    def with_seed(self, seed: int) -> "FamilySpec":
        return _replace(self, seed=seed)

    def with_horizon(self, horizon: int) -> "FamilySpec":
        return _replace(self, horizon=horizon)

    def to_dict(self) -> dict:
        d = {
            "n_hypotheses": self.n_hypotheses,
            "horizon": self.horizon,
            "kind": self.kind,
            "increment_bound": self.increment_bound,
            "seed": self.seed,
        }
        if self.scales is not None:
            d["scales"] = list(self.scales)
        if self.schedules is not None:
            d["schedules"] = [list(s) for s in self.schedules]
            d["block_length"] = self.block_length
        return d


def _replace(spec: FamilySpec, **kw) -> FamilySpec:
    d = dict(
        n_hypotheses=spec.n_hypotheses, horizon=spec.horizon, kind=spec.kind,
        increment_bound=spec.increment_bound, seed=spec.seed, scales=spec.scales,
        schedules=spec.schedules, block_length=spec.block_length,
    )
    d.update(kw)
    return FamilySpec(**d)


@dataclass(frozen=True)
class PathBundle:
    """One realisation: ``m[h, t]`` = M_t(h) and ``v[h, t]`` = V_t(h), t = 0..T."""

    m: np.ndarray
    v: np.ndarray
    increment_bound: float = 1.0
    times: np.ndarray = field(init=False)

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if m.ndim != 2 or m.shape != v.shape:
            raise ValidationError(f"m and v must be 2-d with equal shapes, got {m.shape}, {v.shape}")
        for a in (m, v):
            a.setflags(write=False)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "times", np.arange(m.shape[1]))

    @property
    def n_hypotheses(self) -> int:
        return self.m.shape[0]

    @property
    def horizon(self) -> int:
        return self.m.shape[1] - 1

    def __eq__(self, other):
        if not isinstance(other, PathBundle):
            return NotImplemented
        return (
            self.increment_bound == other.increment_bound
            and np.array_equal(self.m, other.m)
            and np.array_equal(self.v, other.v)
        )

    __hash__ = None


def step_scales(spec: FamilySpec, horizon: Optional[int] = None) -> np.ndarray:
    """Deterministic step sizes, shape (n_hypotheses, horizon); step t is column t-1."""
    T = spec.horizon if horizon is None else horizon
    n = spec.n_hypotheses
    if spec.kind == "rademacher":
        return np.ones((n, T))
    if spec.kind in ("scaled-rademacher", "shared-noise-linear"):
        return np.repeat(np.asarray(spec.scales, dtype=float)[:, None], T, axis=1)
    out = np.empty((n, T))
    block = np.arange(T) // spec.block_length
    for h, sched in enumerate(spec.schedules):
        s = np.asarray(sched)
        out[h] = s[block % s.size]
    return out


def draw_noise(spec: FamilySpec, rng: np.random.Generator, n_paths: Optional[int] = None,
               horizon: Optional[int] = None) -> np.ndarray:
    """Rademacher noise, shape ([n_paths,] n_hypotheses, horizon).

    For shared-noise-linear a single row is drawn and broadcast to every
    hypothesis.
    """
    T = spec.horizon if horizon is None else horizon
    rows = 1 if spec.kind == "shared-noise-linear" else spec.n_hypotheses
    shape = (rows, T) if n_paths is None else (n_paths, rows, T)
    noise = rng.integers(0, 2, size=shape, dtype=np.int8).astype(float) * 2.0 - 1.0
    if rows == 1:
        noise = np.broadcast_to(noise, shape[:-2] + (spec.n_hypotheses, T)).copy()
    return noise


def increments_from_noise(spec: FamilySpec, noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map noise to (increments, conditional variances of each increment)."""
    scales = step_scales(spec, noise.shape[-1])
    return scales * noise, np.broadcast_to(scales * scales, noise.shape)


def bundle_from_noise(spec: FamilySpec, noise: np.ndarray) -> PathBundle:
    xi, dv = increments_from_noise(spec, noise)
    n = spec.n_hypotheses
    m = np.zeros((n, xi.shape[-1] + 1))
    v = np.zeros_like(m)
    np.cumsum(xi, axis=-1, out=m[:, 1:])
    np.cumsum(dv, axis=-1, out=v[:, 1:])
    return PathBundle(m, v, spec.increment_bound)


def generate(spec: FamilySpec) -> PathBundle:
    """Sample one PathBundle; a pure function of ``spec`` (seed included)."""
    noise = draw_noise(spec, make_rng(spec.seed))
    xi, _ = increments_from_noise(spec, noise)
    if np.abs(xi).max() > spec.increment_bound:
        raise AssertionError("generated increment exceeds the declared bound")
    return bundle_from_noise(spec, noise)


def mixture_state(bundle: PathBundle, rho: Posterior, t: int, params: Optional[BoundParams] = None) -> MixtureState:
    if rho.n != bundle.n_hypotheses:
        raise ValidationError(f"posterior has {rho.n} entries, bundle has {bundle.n_hypotheses} hypotheses")
    if not 0 <= t <= bundle.horizon:
        raise ValidationError(f"t={t} outside [0, {bundle.horizon}]")
    mean_m = float(np.dot(rho.weights, bundle.m[:, t]))
    mean_v = float(np.dot(rho.weights, bundle.v[:, t]))
    return MixtureState(t=t, mean_m=mean_m, mean_v=mean_v)


def _check_lambda(lam: float, spec: FamilySpec):
    if not abs(lam) <= math.exp(-2.0):
        raise ValidationError(f"|lambda| must be <= e^-2 on the canonical scale, got {lam!r}")


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    if x.size < 2:
        return float(x.mean()), 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def _chunks(n_paths: int, chunk: int):
    for i, start in enumerate(range(0, n_paths, chunk)):
        yield i, min(chunk, n_paths - start)


def empirical_supermartingale_check(
    spec: FamilySpec, lam: float, t: int, n_paths: int, hypothesis: int = 0, chunk: int = 10_000
) -> tuple[float, float]:
    """Monte Carlo mean of X_t / X_{t-1} for X = exp(lam M' - lam^2 (e-2) V').

    M' and V' are on the canonical e^2 scale. Fresh paths come from
    ``spec.seed``; the supermartingale property predicts mean <= 1.
    """
    _check_lambda(lam, spec)
    if not 1 <= t <= spec.horizon:
        raise ValidationError(f"t must lie in [1, {spec.horizon}]")
    if n_paths < 1:
        raise ValidationError("n_paths must be positive")
    s = E2 / spec.increment_bound
    ratios = []
    for i, n in _chunks(n_paths, chunk):
        noise = draw_noise(spec, make_rng(spec.seed, i), n, horizon=t)
        xi, dv = increments_from_noise(spec, noise)
        step, var = s * xi[:, hypothesis, t - 1], s * s * dv[:, hypothesis, t - 1]
        ratios.append(np.exp(lam * step - lam * lam * (math.e - 2.0) * var))
    return _mean_se(np.concatenate(ratios))


@dataclass(frozen=True)
class StopRule:
    """First t with |M_t(h)| >= level (user scale), capped at the horizon.

    ``level=None`` never stops early, so tau is the horizon.
    """

    level: Optional[float] = None

    @classmethod
    def parse(cls, text) -> "StopRule":
        if text in (None, "never", "fixed"):
            return cls(None)
        if isinstance(text, (int, float)):
            return cls(float(text))
        if isinstance(text, str) and text.startswith("cross:"):
            return cls(float(text.split(":", 1)[1]))
        raise ValidationError(f"unrecognised stop rule {text!r}; use 'never' or 'cross:<level>'")

    def stopping_index(self, m: np.ndarray) -> np.ndarray:
        """Per-path stopping time for trajectories ``m[..., 0..T]`` (last axis is time)."""
        T = m.shape[-1] - 1
        if self.level is None:
            return np.full(m.shape[:-1], T)
        hit = np.abs(m) >= self.level
        first = np.argmax(hit, axis=-1)
        return np.where(hit.any(axis=-1), first, T)


def stopped_expectation_check(
    spec: FamilySpec, lam: float, stop_rule, n_paths: int, hypothesis: int = 0, chunk: int = 2_000
) -> tuple[float, float]:
    """Monte Carlo mean of X_tau for the canonical exponential process; X_0 = 1."""
    _check_lambda(lam, spec)
    rule = stop_rule if isinstance(stop_rule, StopRule) else StopRule.parse(stop_rule)
    s = E2 / spec.increment_bound
    vals = []
    for i, n in _chunks(n_paths, chunk):
        noise = draw_noise(spec, make_rng(spec.seed, i), n)
        xi, dv = increments_from_noise(spec, noise)
        m = np.zeros((n, spec.horizon + 1))
        v = np.zeros_like(m)
        np.cumsum(xi[:, hypothesis], axis=-1, out=m[:, 1:])
        np.cumsum(dv[:, hypothesis], axis=-1, out=v[:, 1:])
        tau = rule.stopping_index(m)
        idx = np.arange(n)
        vals.append(np.exp(lam * s * m[idx, tau] - lam * lam * (math.e - 2.0) * s * s * v[idx, tau]))
    return _mean_se(np.concatenate(vals))


def write_csv(bundle: PathBundle, path_or_buf) -> None:
    """Columnar CSV with header ``t,h,m,v``; floats in shortest round-trip form."""
    own = isinstance(path_or_buf, (str, Path))
    f = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "h", "m", "v"])
        for h in range(bundle.n_hypotheses):
            for t in range(bundle.horizon + 1):
                w.writerow([t, h, repr(float(bundle.m[h, t])), repr(float(bundle.v[h, t]))])
    finally:
        if own:
            f.close()


def read_csv(path_or_buf, increment_bound: float = 1.0) -> PathBundle:
    own = isinstance(path_or_buf, (str, Path))
    f = open(path_or_buf, newline="") if own else path_or_buf
    try:
        rows = list(csv.DictReader(f))
    finally:
        if own:
            f.close()
    if not rows:
        raise ValidationError("empty path CSV")
    n = max(int(r["h"]) for r in rows) + 1
    T = max(int(r["t"]) for r in rows)
    m = np.zeros((n, T + 1))
    v = np.zeros((n, T + 1))
    for r in rows:
        h, t = int(r["h"]), int(r["t"])
        m[h, t] = float(r["m"])
        v[h, t] = float(r["v"])
    return PathBundle(m, v, increment_bound)


# Binary layout: b"AVBM", u8 version, u32 n_hypotheses, u32 horizon,
# f64 increment_bound, then m and v as row-major little-endian f64.
_HEADER = struct.Struct("<4sBIId")


def dump_binary(bundle: PathBundle) -> bytes:
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, bundle.n_hypotheses, bundle.horizon, bundle.increment_bound)
    return head + bundle.m.astype("<f8").tobytes() + bundle.v.astype("<f8").tobytes()


def load_binary(data: bytes) -> PathBundle:
    if len(data) < _HEADER.size:
        raise ValidationError("truncated AVBM dump")
    magic, version, n, T, c = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValidationError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported AVBM version {version}")
    count = n * (T + 1)
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if body.size != 2 * count:
        raise ValidationError("AVBM payload size does not match header")
    return PathBundle(body[:count].reshape(n, T + 1).copy(), body[count:].reshape(n, T + 1).copy(), c)
