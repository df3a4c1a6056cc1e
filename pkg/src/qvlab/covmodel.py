"""Wide-sense-Markov covariance model, its asymptotics, and estimation from simulated paths.

Under the model the centered log return ``X`` started at reference time ``z``
has covariance

    r(t1, t2) = (Lambda(z+t1) - Lambda(z)) * (1 + (beta/alpha**2) (Lambda(z+t2) - Lambda(z)))

for ``0 <= t1 <= t2``. With ``Lambda = alpha t`` this is ``alpha t1 + beta t1 t2``
for every ``z``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .engine import CovParams, EnsembleKind, PathEnsemble
from .errors import (ConfigurationError, DomainError, InsufficientDataError, MisuseError,
                     ParameterError, SingularError)
from .surfaces import LambdaCurve, make_surface


class AutocorrKind(str, enum.Enum):
    RETURNS = "returns"
    SQUARED_RETURNS = "squared_returns"


@dataclass(frozen=True, eq=False)
class CovarianceModel:
    cov: CovParams
    lambda_fn: LambdaCurve

    @classmethod
    def linear(cls, cov: CovParams) -> "CovarianceModel":
        """Model with ``Lambda(t) = alpha t`` (constant surface at ``cov.alpha``)."""
        return cls(cov, LambdaCurve(make_surface("constant", alpha=cov.alpha)))

    def r(self, t1: float, t2: float, z: float = 0.0) -> float:
        return model_covariance(self, z, t1, t2)

    def matrix(self, times: Sequence[float], z: float = 0.0) -> np.ndarray:
        ts = np.asarray(times, dtype=float)
        lo, hi = np.minimum.outer(ts, ts), np.maximum.outer(ts, ts)
        return _model_cov(self, z, lo, hi)


def _model_cov(model: CovarianceModel, z, t1, t2):
    lam = model.lambda_fn
    base = lam(z)
    k = model.cov.beta / model.cov.alpha ** 2
    return (lam(z + t1) - base) * (1 + k * (lam(z + t2) - base))


def model_covariance(model: CovarianceModel, z: float, t1: float, t2: float) -> float:
    """Exact ``r^(z)(t1, t2)`` for ``0 <= t1 <= t2``."""
    if z < 0:
        raise DomainError("reference time z must be >= 0")
    if t1 < 0:
        raise DomainError("offsets must be >= 0")
    if t1 > t2:
        raise DomainError(f"need t1 <= t2, got t1={t1}, t2={t2}; sort the arguments")
    return float(_model_cov(model, z, t1, t2))


def increment_covariance(cov_fn: Callable[[float, float], float], a: float, b: float,
                         c: float, d: float) -> float:
    """``Cov(X(b) - X(a), X(d) - X(c))`` from a covariance accessor ``r(s, t)``, ``s <= t``."""
    def r(p, q):
        return cov_fn(min(p, q), max(p, q))
    return r(b, d) - r(b, c) - r(a, d) + r(a, c)


@dataclass(frozen=True)
class AsymptoticCovariance:
    value: float
    regime: str
    error_order: float


def asymptotic_covariance(cov: CovParams, z: float, t1: float, t2: float, T: float,
                          gamma: float) -> AsymptoticCovariance:
    """Leading large-``T`` term of ``r^(z)(t1 T, t2 T)``.

    ``error_order`` is the exponent ``p`` of the remainder ``O(T**p)``. The
    leading term does not depend on ``z``.
    """
    if cov.beta < 0 and cov.domain_end is None:
        raise ParameterError("beta < 0 is not admissible on an unbounded domain")
    if cov.beta < 0:
        raise ParameterError("large-T asymptotics need beta >= 0")
    if not 0 < t1 <= t2:
        raise DomainError("need 0 < t1 <= t2")
    if not (T > 0 and gamma > 0):
        raise DomainError("need T > 0 and gamma > 0")
    a, b = cov.alpha, cov.beta
    if b == 0:
        return AsymptoticCovariance(a * t1 * T, "beta_zero", 1 - gamma)
    if gamma > 1:
        return AsymptoticCovariance(t1 * T * (a + b * t2 * T), "gamma_gt_1", 2 - gamma)
    return AsymptoticCovariance(b * t1 * t2 * T * T, "gamma_le_1", 2 - gamma)


def autocorr_asymptotic(cov: CovParams, kind: AutocorrKind | str, s: float, t: float, u: float,
                        T: float, gamma: float) -> float:
    """Leading term of the autocorrelation of returns (or squared returns) over scale ``sT``
    at times ``tT`` and ``(t+u)T``."""
    kind = AutocorrKind(kind)
    if not t > 1:
        raise DomainError(f"need t > 1, got {t}")
    if not (s > 0 and u >= s):
        raise DomainError(f"need u >= s > 0, got s={s}, u={u}")
    if not (T > 0 and gamma > 0):
        raise DomainError("need T > 0 and gamma > 0")
    if cov.beta < 0:
        raise ParameterError("autocorrelation asymptotics need beta >= 0")
    if cov.beta == 0:
        return 0.0
    if gamma <= 1:
        return 1.0
    c = 1.0 if kind is AutocorrKind.RETURNS else 2.0
    return 1 - c * cov.alpha / (cov.beta * s * T)


def autocorr_exact(model: CovarianceModel, kind: AutocorrKind | str, s: float, t: float,
                   u: float, T: float, z: float = 0.0) -> float:
    """Exact autocorrelation under the Gaussian model (squared returns use ``rho**2``)."""
    kind = AutocorrKind(kind)
    a, b = t * T, (t + s) * T
    c, d = (t + u) * T, (t + u + s) * T

    def r(p, q):
        return model_covariance(model, z, p, q)

    cxy = increment_covariance(r, a, b, c, d)
    vx = increment_covariance(r, a, b, a, b)
    vy = increment_covariance(r, c, d, c, d)
    rho = cxy / math.sqrt(vx * vy)
    return rho if kind is AutocorrKind.RETURNS else rho * rho


def _loo_cov(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Leave-one-out sample covariances of ``(x, y)`` (columns centered beforehand)."""
    n = x.shape[0]
    sx, sy, sxy = x.sum(0), y.sum(0), (x * y).sum(0)
    return (sxy - x * y - (sx - x) * (sy - y) / (n - 1)) / (n - 2)


@dataclass(frozen=True, eq=False)
class EmpiricalCovariance:
    """Sample covariance of ``X(z + t_i) - X(z)`` across paths with jackknife errors.

    ``entry_cov`` is the jackknife covariance of the upper-triangle entries
    (row-major, ``i <= j``), used to propagate errors into fits.
    """

    z: float
    times: np.ndarray
    matrix: np.ndarray
    std_err_matrix: np.ndarray
    n_paths: int
    entry_cov: np.ndarray

    def r(self, t1: float, t2: float) -> float:
        i, j = self._index(t1), self._index(t2)
        return float(self.matrix[i, j])

    def _index(self, t: float) -> int:
        hit = np.flatnonzero(np.abs(self.times - t) <= 1e-9 * max(1.0, abs(t)))
        if hit.size == 0:
            raise DomainError(f"offset {t} is not among the estimated times")
        return int(hit[0])


def empirical_covariance(ens: PathEnsemble, z: float, times: Sequence[float]) -> EmpiricalCovariance:
    if ens.kind is not EnsembleKind.CENTERED_LOG_RETURN:
        raise MisuseError("empirical covariance needs a centered-log-return ensemble")
    n = ens.n_paths
    if n < 30:
        raise InsufficientDataError(f"need at least 30 paths, got {n}")
    ts = np.asarray(times, dtype=float)
    base = ens.at(z)
    X = np.stack([ens.at(z + t) - base for t in ts], axis=1)
    X = X - X.mean(axis=0)
    p = ts.size
    mat = (X.T @ X) / (n - 1)
    iu = np.triu_indices(p)
    loo = _loo_cov(X[:, iu[0]], X[:, iu[1]])
    dev = loo - loo.mean(axis=0)
    entry_cov = (n - 1) / n * (dev.T @ dev)
    se = np.zeros((p, p))
    se[iu] = np.sqrt(np.diag(entry_cov))
    se = se + np.triu(se, 1).T
    return EmpiricalCovariance(float(z), ts, mat, se, n, entry_cov)


def wsm_residual(cov_fn, t1: float, t2: float, t3: float) -> float:
    """``q = y(t1,t2) y(t2,t3) - y(t1,t3)`` with ``y(a,b) = r(a,b)/r(a,a)``.

    ``cov_fn`` is a callable ``r(a, b)`` or an object with an ``r`` method
    (:class:`CovarianceModel`, :class:`EmpiricalCovariance`). The residual
    vanishes exactly for a wide-sense-Markov covariance.
    """
    if not 0 < t1 <= t2 <= t3:
        raise DomainError("need 0 < t1 <= t2 <= t3")
    r = cov_fn.r if hasattr(cov_fn, "r") else cov_fn
    r11, r22 = r(t1, t1), r(t2, t2)
    if r11 == 0 or r22 == 0:
        raise SingularError("r(t, t) = 0: residual undefined")
    return r(t1, t2) / r11 * (r(t2, t3) / r22) - r(t1, t3) / r11


@dataclass(frozen=True)
class CovFit:
    params: CovParams
    alpha_se: float
    beta_se: float
    residual_rms: float
    clamped: bool
    beta_raw: float

    def to_json(self) -> dict:
        return {"alpha": self.params.alpha, "beta": self.params.beta,
                "alpha_se": self.alpha_se, "beta_se": self.beta_se,
                "residual_rms": self.residual_rms, "clamped": self.clamped,
                "beta_raw": self.beta_raw}


def fit_cov_params(emp: EmpiricalCovariance, lam: LambdaCurve | None = None,
                   domain_end: float | None = None) -> CovFit:
    """Least-squares fit of ``alpha u1 + beta u1 u2`` to the upper-triangle entries.

    ``u_i = (Lambda(z + t_i) - Lambda(z)) / alpha_L`` with ``alpha_L`` the level
    of ``lam``; without ``lam``, ``u_i = t_i`` and ``z`` must be 0. For
    seasonal surfaces the fitted ``alpha`` is the time-averaged level.
    Standard errors propagate the jackknife covariance of the entries.
    """
    if lam is None:
        if emp.z != 0:
            raise ConfigurationError("z != 0 needs the Lambda curve of the simulating surface")
        u = emp.times
    else:
        u = (lam(emp.z + emp.times) - lam(emp.z)) / lam.alpha
    if np.unique(emp.times[emp.times > 0]).size < 3:
        raise InsufficientDataError("need at least 3 distinct positive times")
    iu = np.triu_indices(emp.times.size)
    A = np.column_stack([u[iu[0]], u[iu[0]] * u[iu[1]]])
    y = emp.matrix[iu]
    if np.linalg.matrix_rank(A) < 2:
        raise InsufficientDataError("design matrix is singular")
    P = np.linalg.pinv(A)
    a_hat, b_raw = P @ y
    C = P @ emp.entry_cov @ P.T
    resid = y - A @ np.array([a_hat, b_raw])
    rms = float(np.sqrt(np.mean(resid ** 2)))
    b_hat, clamped = float(b_raw), False
    if domain_end is None and b_hat < 0:
        b_hat, clamped = 0.0, True
    elif domain_end is not None:
        floor = -a_hat ** 2 / (a_hat * domain_end) if lam is None else -a_hat ** 2 / float(lam(domain_end))
        if b_hat <= floor:
            b_hat, clamped = floor * (1 - 1e-9), True
    if not a_hat > 0:
        raise InsufficientDataError(f"fitted alpha {a_hat} is not positive")
    params = CovParams(float(a_hat), b_hat, domain_end)
    return CovFit(params, float(math.sqrt(C[0, 0])), float(math.sqrt(C[1, 1])), rms, clamped,
                  float(b_raw))


@dataclass(frozen=True)
class AutocorrReport:
    kind: AutocorrKind
    s: float
    t: float
    u: float
    T: float
    value: float
    std_err: float
    asymptotic: float
    exact: float | None = None


def _loo_corr(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    n = x.size
    x = x - x.mean()
    y = y - y.mean()
    sx, sy = x.sum(), y.sum()
    sxx, syy, sxy = (x * x).sum(), (y * y).sum(), (x * y).sum()
    m = n - 1
    lx, ly = sx - x, sy - y
    cxy = (sxy - x * y) - lx * ly / m
    cxx = (sxx - x * x) - lx * lx / m
    cyy = (syy - y * y) - ly * ly / m
    return cxy / np.sqrt(cxx * cyy)


def empirical_autocorr(ens: PathEnsemble, kind: AutocorrKind | str, s: float, t: float,
                       u: float, T: float, *, z: float = 0.0, gamma: float = 2.0,
                       model: CovarianceModel | None = None) -> AutocorrReport:
    """Cross-path correlation of returns over ``[tT, (t+s)T]`` and ``[(t+u)T, (t+u+s)T]``.

    Squared returns use the product-moment correlation of the squares. The
    standard error is the leave-one-out jackknife.
    """
    if ens.kind is not EnsembleKind.CENTERED_LOG_RETURN:
        raise MisuseError("autocorrelation needs a centered-log-return ensemble")
    kind = AutocorrKind(kind)
    x = ens.at(z + (t + s) * T) - ens.at(z + t * T)
    y = ens.at(z + (t + u + s) * T) - ens.at(z + (t + u) * T)
    if kind is AutocorrKind.SQUARED_RETURNS:
        x, y = x * x, y * y
    n = x.size
    if n < 30:
        raise InsufficientDataError(f"need at least 30 paths, got {n}")
    value = float(np.corrcoef(x, y)[0, 1])
    loo = _loo_corr(x, y)
    se = float(math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))
    cov = CovParams(ens.meta["alpha"], ens.meta["beta"]) if "alpha" in ens.meta else None
    asym = autocorr_asymptotic(cov, kind, s, t, u, T, gamma) if cov is not None else math.nan
    exact = autocorr_exact(model, kind, s, t, u, T, z) if model is not None else None
    return AutocorrReport(kind, s, t, u, T, value, se, asym, exact)


def write_covariance_csv(emp: EmpiricalCovariance, path: str | Path, preamble: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in preamble.splitlines():
            fh.write(f"# {line}\n")
        fh.write("t_i,t_j,value,std_err\n")
        for i, ti in enumerate(emp.times):
            for j, tj in enumerate(emp.times):
                fh.write(f"{ti:.17g},{tj:.17g},{emp.matrix[i, j]:.17g},{emp.std_err_matrix[i, j]:.17g}\n")


def fit_to_json(fit: CovFit) -> str:
    return json.dumps(fit.to_json(), sort_keys=True, indent=2)
