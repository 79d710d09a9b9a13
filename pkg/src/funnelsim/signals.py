"""Performance-funnel functions and reference trajectories.

A funnel is a positive weight phi(t); the closed loop keeps the tracking
error inside the time-varying ball phi(t) * ||e(t)|| < 1, so 1/phi(t) is
the admissible error radius.  References are smooth curves with an
analytic first derivative; the derivative is only consumed by
diagnostics, never by the controller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Tuple

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import ValidationError

FUNNEL_KINDS = ("benchmark", "exponential", "table")
REFERENCE_KINDS = ("benchmark", "sinusoid", "constant", "polynomial")

# Coefficients of the built-in benchmark funnel
#   phi(t) = 1 / (2.1 (exp(-3t) + 0.05) + 2 exp(-t) + 0.05)
_BM_A1, _BM_B1 = 2.1, 3.0
_BM_A2, _BM_B2 = 2.0, 1.0
_BM_OFFSET = 2.1 * 0.05 + 0.05  # 0.155


def _benchmark_funnel(t: float) -> Tuple[float, float]:
    den = _BM_A1 * math.exp(-_BM_B1 * t) + _BM_A2 * math.exp(-_BM_B2 * t) + _BM_OFFSET
    num = _BM_A1 * _BM_B1 * math.exp(-_BM_B1 * t) + _BM_A2 * _BM_B2 * math.exp(-_BM_B2 * t)
    return 1.0 / den, num / (den * den)


@dataclass
class FunnelSpec:
    """Performance weight phi with closed-form value and derivative.

    Kinds:
      benchmark          -- the built-in tightening profile used by the
                            bundled demo configuration
      exponential        -- phi(t) = 1 / (a exp(-b t) + c)
      table              -- monotone cubic interpolation of (times, values)
    """

    kind: str
    a: float = 0.0
    b: float = 1.0
    c: float = 2.0
    times: np.ndarray | None = None
    values: np.ndarray | None = None
    _fn: Callable[[float], Tuple[float, float]] = field(init=False, repr=False)
    _value: Callable[[float], float] = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind == "benchmark":
            self._fn = _benchmark_funnel

            def value(t):
                return 1.0 / (
                    _BM_A1 * math.exp(-_BM_B1 * t) + _BM_A2 * math.exp(-_BM_B2 * t) + _BM_OFFSET
                )

            self._value = value
        elif self.kind == "exponential":
            a, b, c = float(self.a), float(self.b), float(self.c)

            def fn(t, a=a, b=b, c=c):
                den = a * math.exp(-b * t) + c
                return 1.0 / den, a * b * math.exp(-b * t) / (den * den)

            self._fn = fn
            self._value = lambda t, a=a, b=b, c=c: 1.0 / (a * math.exp(-b * t) + c)
        elif self.kind == "table":
            times = np.asarray(self.times, dtype=float)
            values = np.asarray(self.values, dtype=float)
            if times.ndim != 1 or times.shape != values.shape or times.size < 2:
                raise ValidationError("[funnel] table needs matching 1-d times/values with >= 2 points")
            if np.any(np.diff(times) <= 0):
                raise ValidationError("[funnel] table times must be strictly increasing")
            interp = PchipInterpolator(times, values)
            dinterp = interp.derivative()
            lo, hi = times[0], times[-1]

            def fn(t, interp=interp, dinterp=dinterp, lo=lo, hi=hi):
                if t < lo or t > hi:
                    raise ValueError(
                        f"funnel table lookup out of range: t={t:.6g} not in [{lo:.6g}, {hi:.6g}]"
                    )
                return float(interp(t)), float(dinterp(t))

            self._fn = fn
            self._value = lambda t: fn(t)[0]
        else:
            raise ValidationError(f"[funnel] unknown kind '{self.kind}'")

    def eval(self, t: float) -> Tuple[float, float]:
        return self._fn(t)

    def limit_value(self) -> float | None:
        """Analytic t -> infinity limit of phi, or None if not closed-form."""
        if self.kind == "benchmark":
            return 1.0 / _BM_OFFSET
        if self.kind == "exponential":
            if self.b > 0:
                return 1.0 / self.c if self.c > 0 else 0.0
            if self.b == 0:
                den = self.a + self.c
                return 1.0 / den if den > 0 else 0.0
            # b < 0: a exp(-b t) grows without bound (or crosses zero)
            return 0.0 if self.a != 0 else (1.0 / self.c if self.c > 0 else 0.0)
        return None


@dataclass
class ReferenceSpec:
    """Reference trajectory with componentwise analytic derivative.

    Kinds:
      benchmark    -- (exp(-(t-5)^2), sin t), two channels
      sinusoid     -- per-channel amplitude * sin(frequency * t + phase)
      constant     -- fixed vector
      polynomial   -- per-channel coefficients, ascending powers of t
    """

    kind: str
    n: int = 0
    amplitude: np.ndarray | None = None
    frequency: np.ndarray | None = None
    phase: np.ndarray | None = None
    value: np.ndarray | None = None
    coeffs: list | None = None
    _fn: Callable[[float], Tuple[np.ndarray, np.ndarray]] = field(init=False, repr=False)
    _value: Callable[[float], np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind == "benchmark":
            self.n = 2

            def fn(t):
                g = math.exp(-((t - 5.0) ** 2))
                y = np.array([g, math.sin(t)])
                dy = np.array([-2.0 * (t - 5.0) * g, math.cos(t)])
                return y, dy

            def value(t):
                out = np.empty(2)
                out[0] = math.exp(-((t - 5.0) ** 2))
                out[1] = math.sin(t)
                return out

            self._fn = fn
            self._value = value
        elif self.kind == "sinusoid":
            amp = np.atleast_1d(np.asarray(self.amplitude, dtype=float))
            freq = np.atleast_1d(np.asarray(self.frequency, dtype=float))
            ph = (
                np.zeros_like(amp)
                if self.phase is None
                else np.atleast_1d(np.asarray(self.phase, dtype=float))
            )
            if not (amp.shape == freq.shape == ph.shape):
                raise ValidationError("[reference] sinusoid amplitude/frequency/phase shapes differ")
            self.n = amp.size

            def fn(t, amp=amp, freq=freq, ph=ph):
                arg = freq * t + ph
                return amp * np.sin(arg), amp * freq * np.cos(arg)

            self._fn = fn
            self._value = lambda t, amp=amp, freq=freq, ph=ph: amp * np.sin(freq * t + ph)
        elif self.kind == "constant":
            vec = np.atleast_1d(np.asarray(self.value, dtype=float))
            self.n = vec.size
            zero = np.zeros_like(vec)

            def fn(t, vec=vec, zero=zero):
                return vec.copy(), zero.copy()

            self._fn = fn
            self._value = lambda t, vec=vec: vec
        elif self.kind == "polynomial":
            if not self.coeffs:
                raise ValidationError("[reference] polynomial needs per-channel coeffs")
            coeffs = [np.asarray(ck, dtype=float) for ck in self.coeffs]
            self.n = len(coeffs)
            dcoeffs = [np.arange(1, ck.size) * ck[1:] for ck in coeffs]

            def fn(t, coeffs=coeffs, dcoeffs=dcoeffs, n=self.n):
                y = np.empty(n)
                dy = np.empty(n)
                for i in range(n):
                    y[i] = _polyval(coeffs[i], t)
                    dy[i] = _polyval(dcoeffs[i], t)
                return y, dy

            def value(t, coeffs=coeffs, n=self.n):
                y = np.empty(n)
                for i in range(n):
                    y[i] = _polyval(coeffs[i], t)
                return y

            self._fn = fn
            self._value = value
        else:
            raise ValidationError(f"[reference] unknown kind '{self.kind}'")

    def eval(self, t: float) -> Tuple[np.ndarray, np.ndarray]:
        return self._fn(t)


def _polyval(c: np.ndarray, t: float) -> float:
    # Horner on ascending coefficients
    acc = 0.0
    for ck in c[::-1]:
        acc = acc * t + ck
    return acc


def funnel_eval(spec: FunnelSpec, t: float) -> Tuple[float, float]:
    """Value and analytic first derivative of phi at time t."""
    return spec._fn(t)


def reference_eval(spec: ReferenceSpec, t: float) -> Tuple[np.ndarray, np.ndarray]:
    """Reference vector and its analytic derivative at time t."""
    return spec._fn(t)


def validate_funnel(spec: FunnelSpec, t0: float, t_end: float, samples: int = 10_000) -> float:
    """Check positivity and boundedness of phi over the horizon.

    Samples the funnel densely on [t0, t_end] and, for closed-form kinds,
    also checks the analytic t -> infinity limit.  Returns the sampled
    minimum of phi; raises ValidationError if the funnel is inadmissible.
    """
    errors = []
    ts = np.linspace(t0, t_end, samples)
    try:
        vals = np.array([spec._fn(t) for t in ts])
    except ValueError as exc:
        raise ValidationError(f"[funnel] horizon not covered: {exc}") from exc
    phis, dphis = vals[:, 0], vals[:, 1]
    if not np.all(np.isfinite(phis)) or not np.all(np.isfinite(dphis)):
        errors.append("[funnel] phi or its derivative is non-finite on the horizon")
    else:
        if phis.min() <= 0.0:
            errors.append(f"[funnel] min sampled phi = {phis.min():.3e} is not > 0")
        lim = spec.limit_value()
        if lim is not None and lim <= 0.0:
            errors.append("[funnel] analytic limit of phi is not > 0")
    if errors:
        raise ValidationError(errors)
    return float(phis.min())


def validate_reference(spec: ReferenceSpec, n: int, t0: float, t_end: float, samples: int = 1_000) -> float:
    """Check dimension and horizon boundedness of the reference.

    Returns the sampled sup-norm over value and derivative.
    """
    errors = []
    if spec.n != n:
        errors.append(f"[reference] dimension {spec.n} does not match plant output dimension {n}")
    ts = np.linspace(t0, t_end, samples)
    sup = 0.0
    for t in ts:
        y, dy = spec._fn(t)
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(dy))):
            errors.append(f"[reference] non-finite value or derivative at t={t:.6g}")
            break
        sup = max(sup, float(np.max(np.abs(y))), float(np.max(np.abs(dy))))
    if errors:
        raise ValidationError(errors)
    return sup
