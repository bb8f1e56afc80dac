"""Closed-form Symphony functions with hand-derived gradients.

Every function comes as a value/gradient pair operating on numpy arrays.
:class:`DiffFn` bundles such a pair into a single-input callable so that
:func:`finite_diff_check` can compare the analytic gradient against central
differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

RESINE_GATE = 1.5
CLIP_LO = 1e-3
CLIP_HI = 1.0 - 1e-3


class DomainError(ValueError):
    """Raised when a barrier or log function is evaluated outside its domain."""


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _bounded_sigmoid(x):
    return 0.5 + 0.5 * np.tanh(0.5 * x)


# --------------------------------------------------------------------------
# ReSine
# --------------------------------------------------------------------------

def resine(x, s):
    """Rectified sine with learnable per-unit scale ``sigmoid(s)``.

    ``f = scale * sin(x / scale)`` gated by ``sigmoid(1.5 / scale * f)``.
    ``s`` broadcasts against ``x`` along the trailing axis.
    """
    scale = sigmoid(s)
    f = scale * np.sin(x / scale)
    # the gate argument (1.5 / scale) * f equals 1.5 * sin(x / scale), so it is bounded
    return f * _bounded_sigmoid(RESINE_GATE / scale * f)


def resine_grad(x, s, upstream):
    """Return ``(d/dx, d/ds)`` of ``sum(upstream * resine(x, s))``.

    ``d/ds`` is reduced over the leading axes so it has the shape of ``s``.
    """
    x = np.asarray(x, dtype=float)
    s = np.asarray(s, dtype=float)
    scale = sigmoid(s)
    u = x / scale
    sin_u = np.sin(u)
    gate = _bounded_sigmoid(RESINE_GATE * sin_u)
    g = sin_u * gate
    dg = np.cos(u) * (gate + RESINE_GATE * sin_u * gate * (1.0 - gate))
    dx = upstream * dg
    ds_full = upstream * (g - u * dg) * scale * (1.0 - scale)
    ds = _reduce_to_shape(ds_full, s.shape)
    return dx, ds


def _reduce_to_shape(arr, shape):
    while arr.ndim > len(shape):
        arr = arr.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and arr.shape[axis] != 1:
            arr = arr.sum(axis=axis, keepdims=True)
    return arr


# --------------------------------------------------------------------------
# Rectified Huber errors
# --------------------------------------------------------------------------

def rehse(x) -> float:
    """Mean of ``x * tanh(x / 2)``; quadratic near zero, linear far out."""
    x = np.asarray(x, dtype=float)
    return float(np.mean(x * np.tanh(0.5 * x)))


def rehse_grad(x):
    x = np.asarray(x, dtype=float)
    t = np.tanh(0.5 * x)
    return (t + 0.5 * x * (1.0 - t * t)) / x.size


def rehae(x) -> float:
    """Mean of ``|x| * tanh(x / 2)``; keeps the sign of each error."""
    x = np.asarray(x, dtype=float)
    return float(np.mean(np.abs(x) * np.tanh(0.5 * x)))


def rehae_grad(x):
    x = np.asarray(x, dtype=float)
    t = np.tanh(0.5 * x)
    return (np.abs(t) + 0.5 * np.abs(x) * (1.0 - t * t)) / x.size


# --------------------------------------------------------------------------
# Swaddling pieces
# --------------------------------------------------------------------------

def omega_barrier(x):
    """``ln((1 + x) / (1 - x))``, i.e. ``2 * atanh(x)``, on the open interval (-1, 1)."""
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) >= 1.0) or np.any(~np.isfinite(x)):
        raise DomainError("omega_barrier requires -1 < x < 1")
    return np.log1p(x) - np.log1p(-x)


def omega_barrier_grad(x):
    x = np.asarray(x, dtype=float)
    return 2.0 / (1.0 - x * x)


def omega_helper(x):
    """``x * ln(x)``; minimum ``-1/e`` at ``x = 1/e``."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0) or np.any(~np.isfinite(x)):
        raise DomainError("omega_helper requires x > 0")
    return x * np.log(x)


def omega_helper_grad(x):
    x = np.asarray(x, dtype=float)
    return np.log(x) + 1.0


def _check_clipped(name, v):
    if np.any(v < CLIP_LO) or np.any(v > CLIP_HI) or np.any(~np.isfinite(v)):
        raise DomainError(f"{name} must lie in [{CLIP_LO}, {CLIP_HI}]")


def full_swaddling(sigma, beta, beta_detached=None) -> float:
    """Mean of ``Ω(σ^(1/β*)) + β ω(σ) + Ω(β²)``.

    ``beta_detached`` is the gradient-stopped copy used in the exponent; it
    defaults to ``beta``. Passing it separately lets a finite-difference check
    hold the exponent fixed, which is what the analytic gradient assumes.
    """
    sigma = np.asarray(sigma, dtype=float)
    beta = np.asarray(beta, dtype=float)
    beta_det = beta if beta_detached is None else np.asarray(beta_detached, dtype=float)
    _check_clipped("sigma", sigma)
    _check_clipped("beta", beta)
    _check_clipped("beta_detached", beta_det)
    terms = (
        omega_barrier(sigma ** (1.0 / beta_det))
        + beta * omega_helper(sigma)
        + omega_barrier(beta * beta)
    )
    return float(np.mean(terms))


def full_swaddling_grad(sigma, beta, beta_detached=None):
    """Return ``(d/dσ, d/dβ)``; nothing flows through the detached exponent."""
    sigma = np.asarray(sigma, dtype=float)
    beta = np.asarray(beta, dtype=float)
    beta_det = beta if beta_detached is None else np.asarray(beta_detached, dtype=float)
    n = np.broadcast(sigma, beta).size
    p = 1.0 / beta_det
    pw = sigma ** p
    d_sigma = omega_barrier_grad(pw) * p * sigma ** (p - 1.0) + beta * omega_helper_grad(sigma)
    d_beta = omega_helper(sigma) + omega_barrier_grad(beta * beta) * 2.0 * beta
    return d_sigma / n, d_beta / n


def fixed_beta_swaddling(sigma, beta: float) -> float:
    """Swaddling with a constant temperature: mean of ``Ω(σ^(1/β)) + β ω(σ)``."""
    sigma = np.asarray(sigma, dtype=float)
    _check_clipped("sigma", sigma)
    return float(np.mean(omega_barrier(sigma ** (1.0 / beta)) + beta * omega_helper(sigma)))


def fixed_beta_swaddling_grad(sigma, beta: float):
    sigma = np.asarray(sigma, dtype=float)
    p = 1.0 / beta
    d = omega_barrier_grad(sigma ** p) * p * sigma ** (p - 1.0) + beta * omega_helper_grad(sigma)
    return d / sigma.size


def control_cost_baseline(a, beta: float) -> float:
    """Reference control-cost penalty ``β * mean(a²)``."""
    a = np.asarray(a, dtype=float)
    return float(beta * np.mean(a * a))


def control_cost_baseline_grad(a, beta: float):
    a = np.asarray(a, dtype=float)
    return 2.0 * beta * a / a.size


# --------------------------------------------------------------------------
# Weight schedules
# --------------------------------------------------------------------------

class ScheduleKind(str, Enum):
    BUFFER = "buffer"
    TARGET_CRITIC = "target_critic"
    BUFFER_DIMPLED = "buffer_dimpled"
    TARGET_CRITIC_DIMPLED = "target_critic_dimpled"
    UNIFORM = "uniform"  # testing hook


DIMPLE_AMPLITUDE = 0.02
DIMPLE_WIDTH = 0.02


def raw_schedule(i_n, kind: ScheduleKind | str):
    """Un-normalized schedule values at normalized indices ``i_n`` in (0, 1]."""
    kind = ScheduleKind(kind)
    i_n = np.asarray(i_n, dtype=float)
    if kind is ScheduleKind.BUFFER:
        return np.tanh((math.pi * i_n) ** math.e)
    if kind is ScheduleKind.TARGET_CRITIC:
        return np.tanh((math.pi * (1.0 - i_n)) ** math.e)
    if kind is ScheduleKind.BUFFER_DIMPLED:
        return np.tanh((math.pi * i_n) ** math.pi) - DIMPLE_AMPLITUDE * np.exp(
            -(((i_n - 1.0) / DIMPLE_WIDTH) ** 2)
        )
    if kind is ScheduleKind.TARGET_CRITIC_DIMPLED:
        return np.tanh((math.pi * (1.0 - i_n)) ** math.pi) - DIMPLE_AMPLITUDE * np.exp(
            -((i_n / DIMPLE_WIDTH) ** 2)
        )
    return np.ones_like(i_n)


@dataclass(frozen=True)
class WeightSchedule:
    """Normalized, non-negative weights indexed by position."""

    weights: np.ndarray
    kind: ScheduleKind
    raw: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.weights)


def weight_schedule(L: int, kind: ScheduleKind | str) -> WeightSchedule:
    """Fixed tanh-shaped weights over ``L`` positions, clamped at 0 and summing to 1."""
    if isinstance(L, bool) or not isinstance(L, (int, np.integer)) or L < 2:
        raise ValueError(f"schedule length must be an integer >= 2, got {L!r}")
    kind = ScheduleKind(kind)
    i_n = np.arange(1, L + 1, dtype=float) / L
    raw = raw_schedule(i_n, kind)
    w = np.clip(raw, 0.0, None)
    w = w / w.sum()
    w.setflags(write=False)
    raw.setflags(write=False)
    return WeightSchedule(weights=w, kind=kind, raw=raw)


# --------------------------------------------------------------------------
# Finite-difference oracle
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffFn:
    """A vector function with its vector-Jacobian product.

    ``vjp(x, upstream)`` returns ``upstream @ J(x)``, shaped like ``x``.
    Scalar-valued functions return a 1-element array from ``evaluate``.
    """

    name: str
    evaluate: Callable[[np.ndarray], np.ndarray]
    vjp: Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class FDReport:
    name: str
    rel_errors: np.ndarray
    tol: float

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0

    @property
    def passed(self) -> bool:
        return bool(np.all(np.isfinite(self.rel_errors))) and self.max_rel_error <= self.tol


FD_STEP = 1e-5


def finite_diff_check(f: DiffFn, x, tol: float = 1e-4, h: float = FD_STEP,
                      floor: float = 1e-8) -> FDReport:
    """Compare ``f.vjp`` with central differences, one input coordinate at a time.

    The relative error per coordinate is the worst entry of
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)`` over all outputs.
    """
    x = np.array(x, dtype=float).ravel()
    y0 = np.atleast_1d(f.evaluate(x))
    m = y0.size
    analytic = np.empty((m, x.size))
    for k in range(m):
        e = np.zeros(m)
        e[k] = 1.0
        analytic[k] = np.ravel(f.vjp(x, e))
    numeric = np.empty_like(analytic)
    for j in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        numeric[:, j] = (np.ravel(f.evaluate(xp)) - np.ravel(f.evaluate(xm))) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = (np.abs(analytic - numeric) / denom).max(axis=0)
    return FDReport(name=f.name, rel_errors=rel, tol=tol)


def _scalar(v):
    return np.atleast_1d(np.asarray(v, dtype=float))


def _split(x):
    half = x.size // 2
    return x[:half], x[half:]


IDENTITY = DiffFn("identity", lambda x: np.array(x, dtype=float), lambda x, u: np.array(u, dtype=float))

RESINE = DiffFn(
    "resine",
    lambda x: resine(*_split(x)),
    lambda x, u: np.concatenate(resine_grad(*_split(x), u)),
)

REHSE = DiffFn("rehse", lambda x: _scalar(rehse(x)), lambda x, u: u[0] * rehse_grad(x))
REHAE = DiffFn("rehae", lambda x: _scalar(rehae(x)), lambda x, u: u[0] * rehae_grad(x))
OMEGA_BARRIER = DiffFn("omega_barrier", omega_barrier, lambda x, u: u * omega_barrier_grad(x))
OMEGA_HELPER = DiffFn("omega_helper", omega_helper, lambda x, u: u * omega_helper_grad(x))


def full_swaddling_fn(beta_detached) -> DiffFn:
    """Full Swaddling over ``[σ..., β...]`` with the exponent pinned to ``beta_detached``."""
    bd = np.asarray(beta_detached, dtype=float)

    def ev(x):
        s, b = _split(x)
        return _scalar(full_swaddling(s, b, bd))

    def vjp(x, u):
        s, b = _split(x)
        ds, db = full_swaddling_grad(s, b, bd)
        return u[0] * np.concatenate([ds, db])

    return DiffFn("full_swaddling", ev, vjp)


def control_cost_fn(beta: float) -> DiffFn:
    return DiffFn(
        "control_cost_baseline",
        lambda x: _scalar(control_cost_baseline(x, beta)),
        lambda x, u: u[0] * control_cost_baseline_grad(x, beta),
    )
