"""Local-variance surface families with certified bounds and time-average envelopes.

Three families are provided:

* ``constant``:       sigma2(s, t) = alpha
* ``seasonal``:       sigma2(s, t) = alpha * (1 + a sin(omega t))
* ``decaying_smile``: sigma2(s, t) = alpha * (1 + a sin(omega t)) * (1 + b exp(-t/tau) psi(s))

with ``psi(s) = (s - s_ref) / (1 + |s - s_ref|)``. Each family's time average of
``sigma2`` converges to ``alpha`` at rate ``theta / T`` with

    theta = 2 alpha |a| / omega + alpha (1 + |a|) b tau.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

from .errors import ConfigurationError, DomainError, ParameterError

if TYPE_CHECKING:
    from .engine import PathEnsemble


class Family(str, enum.Enum):
    CONSTANT = "constant"
    SEASONAL = "seasonal"
    DECAYING_SMILE = "decaying_smile"

    @classmethod
    def parse(cls, value: "Family | str") -> "Family":
        if isinstance(value, Family):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"decayingsmile": "decaying_smile", "smile": "decaying_smile"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ParameterError(f"unknown surface family {value!r}") from None


@dataclass(frozen=True)
class QVParams:
    """Constants of the bound ``|QV/T - alpha| <= theta / T**gamma`` for ``T >= T0``."""

    alpha: float
    theta: float
    gamma: float
    T0: float

    def __post_init__(self):
        for name in ("alpha", "theta", "gamma", "T0"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be > 0, got {getattr(self, name)!r}")

    def bound(self, T):
        return self.theta / np.power(T, self.gamma)


@dataclass(frozen=True)
class TimeAverageEnvelope:
    lower: float
    upper: float
    V: float
    T: float


@dataclass(frozen=True)
class VolSurface:
    family: Family
    alpha: float
    a: float = 0.0
    omega: float = 2 * math.pi
    b: float = 0.0
    tau: float = 1.0
    s_ref: float = 100.0
    M: float = field(init=False)
    K: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        _validate(self)
        object.__setattr__(self, "M", self.alpha * (1 + abs(self.a)) * (1 + self.b))
        object.__setattr__(self, "K", self.alpha * (1 + abs(self.a)) * self.b)

    @property
    def price_dependent(self) -> bool:
        return self.family is Family.DECAYING_SMILE and self.b > 0

    @property
    def theta(self) -> float:
        """Envelope convergence coefficient (gamma = 1)."""
        th = 0.0
        if self.a:
            th += 2 * self.alpha * abs(self.a) / self.omega
        if self.b:
            th += self.alpha * (1 + abs(self.a)) * self.b * self.tau
        return th

    def qv_params(self, T0: float = 1.0, theta_floor: float = 1e-12) -> QVParams:
        return QVParams(self.alpha, max(self.theta, theta_floor), 1.0, T0)

    def sigma2(self, s, t):
        """Local variance at price ``s`` and time ``t`` (broadcasting)."""
        s_arr = np.asarray(s, dtype=float)
        t_arr = np.asarray(t, dtype=float)
        if np.any(s_arr <= 0):
            raise DomainError("price must be > 0")
        if np.any(t_arr < 0):
            raise DomainError("time must be >= 0")
        return self._sigma2(s_arr, t_arr)

    def _sigma2(self, s, t):
        # unchecked variant for the simulation inner loop
        out = self.alpha
        if self.a:
            out = out * (1 + self.a * np.sin(self.omega * t))
        if self.b:
            d = s - self.s_ref
            out = out * (1 + self.b * np.exp(-t / self.tau) * d / (1 + np.abs(d)))
        return np.broadcast_to(out, np.broadcast_shapes(np.shape(s), np.shape(t))) * 1.0

    def time_sigma2(self, t):
        """``sigma2`` for price-independent families as a function of time alone."""
        if self.price_dependent:
            raise ConfigurationError("surface depends on price")
        return self._sigma2(np.ones_like(np.asarray(t, dtype=float)), np.asarray(t, dtype=float))

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.family.value, "alpha": self.alpha, "a": self.a,
                "omega": self.omega, "b": self.b, "tau": self.tau, "s_ref": self.s_ref}


def _validate(sf: VolSurface) -> None:
    if not sf.alpha > 0:
        raise ParameterError(f"alpha out of range: need alpha > 0, got {sf.alpha}")
    if not abs(sf.a) < 1:
        raise ParameterError(f"a out of range: need |a| < 1, got {sf.a}")
    if not sf.omega > 0:
        raise ParameterError(f"omega out of range: need omega > 0, got {sf.omega}")
    if not 0 <= sf.b < 1:
        raise ParameterError(f"b out of range: need 0 <= b < 1, got {sf.b}")
    if not sf.tau > 0:
        raise ParameterError(f"tau out of range: need tau > 0, got {sf.tau}")
    if not sf.s_ref > 0:
        raise ParameterError(f"s_ref out of range: need s_ref > 0, got {sf.s_ref}")
    if sf.family is Family.CONSTANT and (sf.a or sf.b):
        raise ParameterError("constant family takes no a or b")
    if sf.family is Family.SEASONAL and sf.b:
        raise ParameterError("seasonal family takes no b")


def make_surface(family: Family | str, **params) -> VolSurface:
    """Build a surface, rejecting parameters outside the family's admissible range."""
    allowed = {"alpha", "a", "omega", "b", "tau", "s_ref"}
    unknown = set(params) - allowed
    if unknown:
        raise ParameterError(f"unknown surface parameters: {sorted(unknown)}")
    if "alpha" not in params:
        raise ParameterError("alpha is required")
    return VolSurface(Family.parse(family), **{k: float(v) for k, v in params.items()})


def eval_sigma2(surface: VolSurface, s, t):
    return surface.sigma2(s, t)


def _sin_integral(omega: float, t0: float, t1: float) -> float:
    return (math.cos(omega * t0) - math.cos(omega * t1)) / omega


def _exp_integral(tau: float, t0: float, t1: float) -> float:
    return tau * (math.exp(-t0 / tau) - math.exp(-t1 / tau))


def _exp_sin_integral(omega: float, tau: float, t0: float, t1: float) -> float:
    # antiderivative of exp(c t) sin(w t) is exp(c t)(c sin(w t) - w cos(w t))/(c^2 + w^2)
    c = -1.0 / tau

    def F(t):
        return math.exp(c * t) * (c * math.sin(omega * t) - omega * math.cos(omega * t)) / (c * c + omega * omega)

    return F(t1) - F(t0)


def _seasonal_smile_integral(sf: VolSurface, k: float, V: float, T: float) -> float:
    """Integral over [V, V+T] of alpha (1 + a sin(w t)) (1 + k exp(-t/tau))."""
    total = T
    if sf.a:
        total += sf.a * _sin_integral(sf.omega, V, V + T)
    if k:
        total += k * _exp_integral(sf.tau, V, V + T)
        if sf.a:
            total += sf.a * k * _exp_sin_integral(sf.omega, sf.tau, V, V + T)
    return sf.alpha * total


def time_average_envelope(surface: VolSurface, V: float, T: float) -> TimeAverageEnvelope:
    """Time averages over ``[V, V+T]`` of ``inf_s sigma2`` and ``sup_s sigma2``."""
    if not T > 0:
        raise DomainError(f"window length must be > 0, got {T}")
    if V < 0:
        raise DomainError(f"window start must be >= 0, got {V}")
    if surface.family is Family.CONSTANT:
        return TimeAverageEnvelope(surface.alpha, surface.alpha, V, T)
    # psi ranges over (-s_ref/(1+s_ref), 1) on s > 0
    k_up = surface.b
    k_lo = -surface.b * surface.s_ref / (1 + surface.s_ref)
    upper = _seasonal_smile_integral(surface, k_up, V, T) / T
    lower = _seasonal_smile_integral(surface, k_lo, V, T) / T
    return TimeAverageEnvelope(min(lower, upper), max(lower, upper), V, T)


def integrated_variance(surface: VolSurface, V: float, T: float) -> float:
    """Exact integral of ``sigma2`` over ``[V, V+T]`` for a price-independent surface."""
    if surface.price_dependent:
        raise ConfigurationError("integrated variance along a path needs the path for a price-dependent surface")
    return _seasonal_smile_integral(surface, 0.0, V, T)


class LambdaCurve:
    """Cumulative expected variance ``Lambda(t) = E int_0^t sigma2(S(w), w) dw``.

    Analytic for price-independent surfaces; for price-dependent surfaces it is a
    Monte Carlo estimate on the ensemble grid, linearly interpolated.
    """

    def __init__(self, surface: VolSurface, ensemble: "PathEnsemble | None" = None):
        self.surface = surface
        self.alpha = surface.alpha
        self._times = None
        if surface.price_dependent:
            if ensemble is None:
                raise ConfigurationError(
                    "price-dependent surface: Lambda needs an ensemble of physical price paths")
            self._from_ensemble(ensemble)

    def _from_ensemble(self, ens: "PathEnsemble") -> None:
        from .engine import EnsembleKind

        if ens.kind is not EnsembleKind.PRICE:
            raise ConfigurationError("Lambda estimate needs price paths")
        if not ens.full_record:
            raise ConfigurationError("Lambda estimate needs every grid node recorded")
        times = ens.times
        sig2 = self.surface._sigma2(ens.values[:, :-1], times[:-1])
        cum = np.zeros((ens.n_paths, times.size))
        np.cumsum(sig2 * ens.grid.dt, axis=1, out=cum[:, 1:])
        self._times = times
        self._values = cum.mean(axis=0)
        self._se = cum.std(axis=0, ddof=1) / math.sqrt(ens.n_paths) if ens.n_paths > 1 else np.zeros(times.size)
        self._rates = sig2.mean(axis=0)

    @property
    def analytic(self) -> bool:
        return self._times is None

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise DomainError("Lambda is defined for t >= 0")
        if not self.analytic and np.any(t > self._times[-1] + 1e-9 * max(1.0, self._times[-1])):
            raise DomainError(f"Lambda estimate covers t <= {self._times[-1]}")
        return t

    def __call__(self, t):
        t = self._check(t)
        sf = self.surface
        if self.analytic:
            out = sf.alpha * t
            if sf.a:
                out = out + sf.alpha * sf.a * (1 - np.cos(sf.omega * t)) / sf.omega
            return out
        return np.interp(t, self._times, self._values)

    def std_err(self, t):
        t = self._check(t)
        if self.analytic:
            return np.zeros_like(t)
        return np.interp(t, self._times, self._se)

    def rate(self, t):
        """Derivative ``E sigma2(S(t), t)``."""
        t = self._check(t)
        if self.analytic:
            return self.surface.time_sigma2(t)
        idx = np.clip(np.searchsorted(self._times, t, side="right") - 1, 0, self._rates.size - 1)
        return self._rates[idx]


def capital_lambda(surface: VolSurface, t, mc_ctx: "PathEnsemble | None" = None):
    """``Lambda(t)``; ``mc_ctx`` (physical price paths) is required for price-dependent surfaces."""
    return LambdaCurve(surface, mc_ctx)(t)
