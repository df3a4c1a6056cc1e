"""Path simulation: price paths in log space and centered log returns.

Price paths follow ``dS/S = mu dt + sigma dB`` discretised with Euler-Maruyama
on ``log S``, so every node is strictly positive and a constant-variance surface
is simulated exactly. Centered log returns follow the wide-sense-Markov
dynamics ``dX = (g'/g) X dt + sigma dB``.

Noise for path ``i`` comes from :func:`qvlab.rng.substream` and is drawn in time
blocks, so results never depend on chunking or on the worker count.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from . import rng
from .errors import (ConfigurationError, DomainError, MisuseError, ParameterError,
                     ParseError, RangeError)
from .surfaces import LambdaCurve, VolSurface

PATH_CHUNK = 4096
TIME_BLOCK = 512
_TIME_TOL = 1e-9


class EnsembleKind(str, enum.Enum):
    PRICE = "price"
    CENTERED_LOG_RETURN = "centered_log_return"


class Measure(str, enum.Enum):
    PHYSICAL = "physical"
    RISK_NEUTRAL = "risk_neutral"
    CANONICAL = "canonical"


@dataclass(frozen=True)
class PathGrid:
    t_start: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise DomainError(f"dt must be > 0, got {self.dt}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise DomainError(f"n_steps must be an integer >= 1, got {self.n_steps}")
        if self.t_start < 0:
            raise DomainError(f"t_start must be >= 0, got {self.t_start}")
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @classmethod
    def covering(cls, t_end: float, dt: float, t_start: float = 0.0) -> "PathGrid":
        n = round((t_end - t_start) / dt)
        grid = cls(t_start, dt, max(n, 1))
        grid.index_of(t_end)
        return grid

    @property
    def times(self) -> np.ndarray:
        return self.t_start + np.arange(self.n_steps + 1) * self.dt

    @property
    def t_end(self) -> float:
        return self.t_start + self.n_steps * self.dt

    def index_of(self, t: float) -> int:
        k = round((t - self.t_start) / self.dt)
        if not 0 <= k <= self.n_steps or abs(self.t_start + k * self.dt - t) > _TIME_TOL * max(1.0, abs(t)):
            raise RangeError(f"time {t} is not a node of the grid "
                             f"[{self.t_start}, {self.t_end}] with step {self.dt}")
        return k


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Simulated trajectories, one row per path, one column per recorded node.

    ``cum_qv`` (price ensembles) holds the realized quadratic variation of
    ``log S`` accumulated on the full simulation grid up to each recorded node,
    so variance payoffs stay exact when only a few nodes are stored.
    """

    grid: PathGrid
    kind: EnsembleKind
    measure: Measure
    values: np.ndarray
    seed: int
    record: np.ndarray
    cum_qv: np.ndarray | None = None
    s0: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times[self.record]

    @property
    def full_record(self) -> bool:
        return self.record.size == self.grid.n_steps + 1

    def position(self, t: float) -> int:
        k = self.grid.index_of(t)
        pos = np.searchsorted(self.record, k)
        if pos >= self.record.size or self.record[pos] != k:
            raise RangeError(f"time {t} was not recorded in this ensemble")
        return int(pos)

    def at(self, t: float) -> np.ndarray:
        return self.values[:, self.position(t)]

    def qv_between(self, t0: float, t1: float) -> np.ndarray:
        """Per-path realized QV of ``log S`` over ``[t0, t1]``."""
        if self.kind is not EnsembleKind.PRICE:
            raise MisuseError("quadratic variation of log price needs a price ensemble")
        i0, i1 = self.position(t0), self.position(t1)
        if self.cum_qv is not None:
            return self.cum_qv[:, i1] - self.cum_qv[:, i0]
        inc = np.diff(np.log(self.values[:, i0:i1 + 1]), axis=1)
        return np.sum(inc * inc, axis=1)


@dataclass(frozen=True)
class CovParams:
    """Wide-sense-Markov covariance parameters.

    ``beta < 0`` is only admissible on a bounded domain ``[0, domain_end]``.
    """

    alpha: float
    beta: float
    domain_end: float | None = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be > 0, got {self.alpha}")
        if self.domain_end is None and self.beta < 0:
            raise ParameterError("beta < 0 needs a bounded domain (set domain_end)")
        if self.domain_end is not None and not self.domain_end > 0:
            raise ParameterError("domain_end must be > 0")


class GrowthFunction:
    """``g(t) = 1 + (beta / alpha**2) Lambda(t)``."""

    def __init__(self, cov: CovParams, lam: LambdaCurve):
        self.cov = cov
        self.lam = lam
        self.k = cov.beta / cov.alpha ** 2
        if cov.domain_end is not None and cov.beta < 0:
            floor = -cov.alpha ** 2 / float(lam(cov.domain_end))
            if not cov.beta > floor:
                raise ParameterError(
                    f"beta = {cov.beta} must exceed -alpha^2/Lambda(R) = {floor:.6g}")

    def __call__(self, t):
        return 1 + self.k * self.lam(t)

    def derivative(self, t):
        return self.k * self.lam.rate(t)

    def log_derivative(self, t):
        return self.derivative(t) / self(t)

    def check_positive(self, times) -> None:
        times = np.asarray(times, dtype=float)
        if self.cov.domain_end is not None and times.max() > self.cov.domain_end * (1 + _TIME_TOL):
            raise ParameterError(f"grid extends beyond the domain end {self.cov.domain_end}")
        g = self(times)
        if np.any(g <= 0):
            bad = times[np.argmax(g <= 0)]
            raise ParameterError(f"g(t) <= 0 at t = {bad}: beta = {self.cov.beta} is not admissible")


class DriftForm(str, enum.Enum):
    CONSTANT_MU = "constant_mu"
    RISK_NEUTRAL = "risk_neutral"
    GROWTH_IMPLIED = "growth_implied"


@dataclass(frozen=True)
class DriftSpec:
    form: DriftForm
    mu: float = 0.0
    r: float = 0.0
    growth: GrowthFunction | None = None
    m: Callable[[float], float] | float = 0.0
    lambda0: Callable[[float], float] | None = None
    s0: float | None = None

    @classmethod
    def constant(cls, mu: float) -> "DriftSpec":
        return cls(DriftForm.CONSTANT_MU, mu=mu)

    @classmethod
    def risk_neutral(cls, r: float) -> "DriftSpec":
        return cls(DriftForm.RISK_NEUTRAL, r=r)

    @property
    def state_dependent(self) -> bool:
        return self.form is DriftForm.GROWTH_IMPLIED and self.growth.cov.beta != 0

    def m_at(self, t):
        return self.m(t) if callable(self.m) else self.m

    def lambda0_at(self, t):
        if self.lambda0 is not None:
            return self.lambda0(t)
        return self.m * t

    def rate(self, s, t, sig2):
        """Expected instantaneous return ``mu(s, t)``."""
        if self.form is DriftForm.CONSTANT_MU:
            return self.mu + 0 * sig2
        if self.form is DriftForm.RISK_NEUTRAL:
            return self.r + 0 * sig2
        out = self.m_at(t) + sig2 / 2
        if self.growth.cov.beta != 0:
            out = out + self.growth.log_derivative(t) * (np.log(s / self.s0) - self.lambda0_at(t))
        return out


def drift_from_growth(cov: CovParams, surface: VolSurface, m: Callable | float = 0.0,
                      s0: float = 100.0, *, lam: LambdaCurve | None = None) -> DriftSpec:
    """Physical drift whose centered log returns follow the canonical dynamics.

    ``m`` is the mean-log-return rate, ``lambda0(t) = int_0^t m``; the drift is
    ``(g'/g)(log(s/s0) - lambda0(t)) + m(t) + sigma2(s, t)/2``.
    """
    if not s0 > 0:
        raise DomainError("s0 must be > 0")
    lam = lam if lam is not None else LambdaCurve(surface)
    growth = GrowthFunction(cov, lam)
    if callable(m):
        fn = m

        def lambda0(t):
            t_arr = np.atleast_1d(np.asarray(t, dtype=float))
            vals = np.array([integrate.quad(fn, 0.0, ti, limit=200)[0] for ti in t_arr])
            return vals.reshape(np.shape(t))
    else:
        lambda0 = None
    return DriftSpec(DriftForm.GROWTH_IMPLIED, growth=growth, m=m, lambda0=lambda0, s0=s0)


class _Noise:
    """Per-path standard normals for a chunk, served in time blocks."""

    def __init__(self, seed, i0, i1, label, forced):
        self.forced = forced
        self.i0, self.i1 = i0, i1
        self.pos = 0
        if forced is None:
            self.gens = [rng.substream(seed, i, label) for i in range(i0, i1)]

    def take(self, n: int) -> np.ndarray:
        if self.forced is not None:
            out = np.asarray(self.forced[self.i0:self.i1, self.pos:self.pos + n], dtype=float)
            if out.shape[1] != n:
                raise ConfigurationError("forced noise has too few columns for the grid")
        else:
            out = np.empty((self.i1 - self.i0, n))
            for row, g in enumerate(self.gens):
                out[row] = g.standard_normal(n)
        self.pos += n
        return out


def _record_indices(grid: PathGrid, record: Sequence[float] | None) -> np.ndarray:
    if record is None:
        return np.arange(grid.n_steps + 1)
    idx = {0, grid.n_steps}
    idx.update(grid.index_of(t) for t in record)
    return np.array(sorted(idx))


def _check_noise(noise, n_paths, n_steps):
    if noise is None:
        return None
    noise = np.asarray(noise, dtype=float)
    if noise.ndim != 2 or noise.shape[0] != n_paths or noise.shape[1] < n_steps:
        raise ConfigurationError(f"forced noise must have shape ({n_paths}, >= {n_steps})")
    return noise


def _run_chunks(n_paths, step_fn, threads):
    chunks = rng.chunk_bounds(n_paths, PATH_CHUNK)
    parts = rng.ordered_map(step_fn, chunks, threads)
    return [np.concatenate([p[j] for p in parts], axis=0) if parts[0][j] is not None else None
            for j in range(len(parts[0]))]


def simulate_price(surface: VolSurface, drift: DriftSpec, s0: float, grid: PathGrid,
                   n_paths: int, seed: int, *, record: Sequence[float] | None = None,
                   noise=None, threads: int | None = None, label: str = "price") -> PathEnsemble:
    """Simulate price paths under ``drift`` (physical or risk-neutral).

    ``record`` restricts the stored nodes (first and last are always kept);
    ``noise`` injects a deterministic ``(n_paths, n_steps)`` array of standard
    normals in place of the random substreams.
    """
    if not s0 > 0:
        raise DomainError(f"s0 must be > 0, got {s0}")
    if n_paths < 1:
        raise DomainError("n_paths must be >= 1")
    noise = _check_noise(noise, n_paths, grid.n_steps)
    rec = _record_indices(grid, record)
    times = grid.times
    n = grid.n_steps
    dt = grid.dt
    log_s0 = math.log(s0)
    fast = not surface.price_dependent and not drift.state_dependent

    if fast:
        sig2 = surface.time_sigma2(times[:-1])
        mean_inc = (drift.rate(np.ones(n), times[:-1], sig2) - sig2 / 2) * dt
        vol = np.sqrt(sig2 * dt)

    def run(bounds):
        i0, i1 = bounds
        width = i1 - i0
        src = _Noise(seed, i0, i1, label, noise)
        vals = np.empty((width, rec.size))
        cq = np.empty((width, rec.size))
        x = np.full(width, log_s0)
        q = np.zeros(width)
        vals[:, 0], cq[:, 0] = s0, 0.0
        r_pos = 1
        k = 0
        while k < n:
            blk = min(TIME_BLOCK, n - k)
            Z = src.take(blk)
            if fast:
                inc = mean_inc[k:k + blk] + vol[k:k + blk] * Z
                path = x[:, None] + np.cumsum(inc, axis=1)
                qpath = q[:, None] + np.cumsum(inc * inc, axis=1)
                while r_pos < rec.size and rec[r_pos] <= k + blk:
                    j = rec[r_pos] - k - 1
                    vals[:, r_pos] = np.exp(path[:, j])
                    cq[:, r_pos] = qpath[:, j]
                    r_pos += 1
                x, q = path[:, -1].copy(), qpath[:, -1].copy()
            else:
                for j in range(blk):
                    t = grid.t_start + (k + j) * dt
                    s = np.exp(x)
                    s2 = surface._sigma2(s, t)
                    inc = (drift.rate(s, t, s2) - s2 / 2) * dt + np.sqrt(s2 * dt) * Z[:, j]
                    x = x + inc
                    q = q + inc * inc
                    if r_pos < rec.size and rec[r_pos] == k + j + 1:
                        vals[:, r_pos] = np.exp(x)
                        cq[:, r_pos] = q
                        r_pos += 1
            k += blk
        return vals, cq

    values, cum_qv = _run_chunks(n_paths, run, threads)
    measure = Measure.RISK_NEUTRAL if drift.form is DriftForm.RISK_NEUTRAL else Measure.PHYSICAL
    return PathEnsemble(grid, EnsembleKind.PRICE, measure, values, seed, rec, cum_qv, s0,
                        meta={"r": drift.r if measure is Measure.RISK_NEUTRAL else None})


def _growth_for(cov, surface, lam, times):
    if lam is None:
        lam = LambdaCurve(surface)
    growth = GrowthFunction(cov, lam)
    growth.check_positive(times)
    return growth


def simulate_centered_returns(cov: CovParams, surface: VolSurface, grid: PathGrid,
                              n_paths: int, seed: int, *, lam: LambdaCurve | None = None,
                              s0: float | None = None, m: float = 0.0,
                              scheme: str = "canonical", record: Sequence[float] | None = None,
                              noise=None, threads: int | None = None,
                              label: str = "centered") -> PathEnsemble:
    """Simulate centered log returns ``X(t)`` with ``X(0) = 0``.

    ``scheme="canonical"`` steps ``Y = X / g`` (a driftless process) and maps
    back with ``X = g Y``; for price-independent surfaces each step uses the exact
    clock increment ``(Lambda(t+dt) - Lambda(t)) / (g(t) g(t+dt))``, so the
    result has the exact law on the grid. ``scheme="euler"`` applies
    Euler-Maruyama to ``dX = (g'/g) X dt + sigma dB`` directly.

    Price-dependent surfaces need ``lam`` (an estimate of Lambda) and evaluate
    ``sigma`` at ``S = s0 exp(m t + X)``.
    """
    if grid.t_start != 0:
        raise DomainError("centered returns start at t = 0")
    if n_paths < 1:
        raise DomainError("n_paths must be >= 1")
    if scheme not in ("canonical", "euler"):
        raise ConfigurationError(f"unknown scheme {scheme!r}")
    times = grid.times
    growth = _growth_for(cov, surface, lam, times)
    lam = growth.lam
    noise = _check_noise(noise, n_paths, grid.n_steps)
    rec = _record_indices(grid, record)
    n, dt = grid.n_steps, grid.dt
    g = growth(times)
    s0 = surface.s_ref if s0 is None else s0
    dep = surface.price_dependent

    if not dep:
        sig2 = surface.time_sigma2(times[:-1])
        if scheme == "canonical":
            clock = np.diff(lam(times)) / (g[:-1] * g[1:])
            step_vol = np.sqrt(np.maximum(clock, 0.0))
        else:
            step_vol = np.sqrt(sig2 * dt)
    gl = growth.log_derivative(times[:-1])

    def run(bounds):
        i0, i1 = bounds
        width = i1 - i0
        src = _Noise(seed, i0, i1, label, noise)
        vals = np.zeros((width, rec.size))
        x = np.zeros(width)
        y = np.zeros(width)
        r_pos = 1
        k = 0
        while k < n:
            blk = min(TIME_BLOCK, n - k)
            Z = src.take(blk)
            if not dep and scheme == "canonical":
                ypath = y[:, None] + np.cumsum(step_vol[k:k + blk] * Z, axis=1)
                while r_pos < rec.size and rec[r_pos] <= k + blk:
                    j = rec[r_pos] - k - 1
                    vals[:, r_pos] = g[rec[r_pos]] * ypath[:, j]
                    r_pos += 1
                y = ypath[:, -1].copy()
            else:
                for j in range(blk):
                    kk = k + j
                    t = times[kk]
                    if dep:
                        s = s0 * np.exp(m * t + x)
                        vol = np.sqrt(surface._sigma2(s, t) * dt)
                    else:
                        vol = step_vol[kk]
                    if scheme == "canonical":
                        y = y + vol / g[kk] * Z[:, j]
                        x = g[kk + 1] * y
                    else:
                        x = x + gl[kk] * x * dt + vol * Z[:, j]
                    if r_pos < rec.size and rec[r_pos] == kk + 1:
                        vals[:, r_pos] = x
                        r_pos += 1
            k += blk
        return (vals,)

    (values,) = _run_chunks(n_paths, run, threads)
    return PathEnsemble(grid, EnsembleKind.CENTERED_LOG_RETURN, Measure.CANONICAL, values, seed,
                        rec, None, s0, meta={"alpha": cov.alpha, "beta": cov.beta, "scheme": scheme})


@dataclass(frozen=True, eq=False)
class ConditionalSamples:
    """Samples of ``X`` at ``horizons`` given ``X(z) = x``; one row per sample."""

    horizons: np.ndarray
    samples: np.ndarray
    condition: tuple[float, float]
    binned: bool = False
    n_accepted: int | None = None


def simulate_canonical_conditional(cov: CovParams, surface: VolSurface,
                                   condition: tuple[float, float], horizons: Sequence[float],
                                   n_paths: int, seed: int, *, lam: LambdaCurve | None = None,
                                   dt: float | None = None, bandwidth: float | None = None,
                                   threads: int | None = None,
                                   label: str = "conditional") -> ConditionalSamples:
    """Exact conditional sampling through the time change ``X(t) = g(t) B*(Lambda(t)/g(t))``.

    ``B*`` is pinned at clock ``Lambda(z)/g(z)`` to ``x / g(z)`` and extended
    with independent Gaussian increments. Price-dependent surfaces have no exact
    time change; they fall back to keeping simulated paths whose ``X(z)`` falls
    within ``bandwidth`` of ``x`` and the result is flagged ``binned``.
    """
    z, x = map(float, condition)
    if not z > 0:
        raise DomainError("conditioning time must be > 0")
    hz = np.asarray(sorted(horizons), dtype=float)
    if hz.size == 0 or hz[0] < z:
        raise DomainError("horizons must be non-empty and >= the conditioning time")
    if surface.price_dependent:
        return _binned_conditional(cov, surface, z, x, hz, n_paths, seed, lam, dt, bandwidth,
                                   threads, label)
    growth = _growth_for(cov, surface, lam, np.concatenate([[0.0, z], hz]))
    lam = growth.lam
    g_z, g_h = float(growth(z)), growth(hz)
    clock = np.concatenate([[lam(z) / g_z], lam(hz) / g_h])
    step_sd = np.sqrt(np.maximum(np.diff(clock), 0.0))

    def run(bounds):
        i0, i1 = bounds
        Z = rng.normal_block(seed, i0, i1, hz.size, label)
        b = x / g_z + np.cumsum(step_sd * Z, axis=1)
        return (g_h * b,)

    (samples,) = _run_chunks(n_paths, run, threads)
    return ConditionalSamples(hz, samples, (z, x), False, n_paths)


def _binned_conditional(cov, surface, z, x, hz, n_paths, seed, lam, dt, bandwidth, threads, label):
    if lam is None:
        raise ConfigurationError("binned conditioning on a price-dependent surface needs lam")
    dt = dt if dt is not None else z / 100
    grid = PathGrid.covering(hz[-1], dt)
    ens = simulate_centered_returns(cov, surface, grid, n_paths, seed, lam=lam,
                                    record=[z, *hz], threads=threads, label=label)
    xz = ens.at(z)
    h = bandwidth if bandwidth is not None else 0.1 * math.sqrt(float(lam(z)))
    keep = np.abs(xz - x) <= h
    cols = np.stack([ens.at(t) for t in hz], axis=1)[keep]
    return ConditionalSamples(hz, cols, (z, x), True, int(keep.sum()))


def write_ensemble_csv(ens: PathEnsemble, path: str | Path, preamble: str = "") -> None:
    """``path_id,t,value`` with 17 significant digits; ``preamble`` lines are written as ``#`` comments."""
    times = ens.times
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in preamble.splitlines():
            fh.write(f"# {line}\n" if line else "#\n")
        fh.write("path_id,t,value\n")
        t_str = [f"{t:.17g}" for t in times]
        for i in range(ens.n_paths):
            row = ens.values[i]
            fh.write("".join(f"{i},{t_str[j]},{row[j]:.17g}\n" for j in range(times.size)))


def read_ensemble_csv(path: str | Path, kind: EnsembleKind = EnsembleKind.PRICE,
                      measure: Measure = Measure.PHYSICAL, seed: int = 0) -> PathEnsemble:
    """Inverse of :func:`write_ensemble_csv`; recorded times must be uniformly spaced."""
    rows: dict[int, list[tuple[float, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [(n, ln) for n, ln in enumerate(fh, start=1) if not ln.startswith("#")]
    if not lines or lines[0][1].strip() != "path_id,t,value":
        raise ParseError("expected header 'path_id,t,value'", lines[0][0] if lines else 1)
    for lineno, raw in lines[1:]:
        if not raw.strip():
            continue
        parts = next(csv.reader([raw]))
        try:
            pid, t, v = int(parts[0]), float(parts[1]), float(parts[2])
        except (ValueError, IndexError):
            raise ParseError(f"malformed row {raw.strip()!r}", lineno) from None
        rows.setdefault(pid, []).append((t, v))
    if not rows:
        raise ParseError("no data rows")
    ids = sorted(rows)
    times = np.array([t for t, _ in rows[ids[0]]])
    values = np.array([[v for _, v in rows[i]] for i in ids])
    if values.ndim != 2 or values.shape[1] != times.size:
        raise ParseError("paths have differing node counts")
    if times.size < 2:
        raise ParseError("need at least two nodes per path")
    steps = np.diff(times)
    dt = float(steps[0])
    if np.any(np.abs(steps - dt) > 1e-9 * max(1.0, abs(times[-1]))):
        raise ParseError("recorded times are not uniformly spaced")
    grid = PathGrid(float(times[0]), dt, times.size - 1)
    return PathEnsemble(grid, kind, measure, values, seed, np.arange(times.size),
                        None, float(values[0, 0]) if kind is EnsembleKind.PRICE else None)
