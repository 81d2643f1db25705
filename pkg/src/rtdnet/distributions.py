"""Parametric runtime distribution families.

Four families are supported, each with the parameterisation used throughout
the package:

========  ==============  =============================================
family    theta           density
========  ==============  =============================================
``N``     (mu, sigma)     normal
``LOG``   (s, sigma)      lognormal with *scale* ``s`` (median), i.e.
                          ``log x ~ Normal(log s, sigma)``
``EXP``   (beta,)         exponential with mean ``beta``
``INV``   (mu, lambda)    inverse Gaussian (Wald) with mean ``mu`` and
                          shape ``lambda``
========  ==============  =============================================

Densities that are zero (e.g. ``x <= 0`` for the positive families) or that
underflow report a log-density of ``LOG_DENSITY_FLOOR`` instead of ``-inf``.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

LOG_DENSITY_FLOOR = -1e15
SCALE_FLOOR = 1e-6
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class InvalidParams(ValueError):
    pass


class DegenerateSample(ValueError):
    pass


class Family(str, enum.Enum):
    N = "N"
    LOG = "LOG"
    EXP = "EXP"
    INV = "INV"

    @property
    def n_params(self) -> int:
        return 1 if self is Family.EXP else 2

    @property
    def param_names(self) -> tuple[str, ...]:
        return _PARAM_NAMES[self]

    @classmethod
    def parse(cls, value) -> "Family":
        if isinstance(value, Family):
            return value
        try:
            return cls(str(value).strip().upper())
        except ValueError:
            raise ValueError(
                f"unknown distribution family {value!r}; choose from {', '.join(f.value for f in cls)}"
            ) from None

    def __str__(self) -> str:
        return self.value


_PARAM_NAMES = {
    Family.N: ("mu", "sigma"),
    Family.LOG: ("s", "sigma"),
    Family.EXP: ("beta",),
    Family.INV: ("mu", "lambda"),
}


@dataclass(frozen=True)
class RtdParams:
    family: Family
    theta: tuple[float, ...]

    def __post_init__(self):
        fam = Family.parse(self.family)
        theta = tuple(float(v) for v in np.atleast_1d(self.theta))
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "theta", theta)
        if len(theta) != fam.n_params:
            raise InvalidParams(f"{fam} takes {fam.n_params} parameters, got {len(theta)}")
        if not all(math.isfinite(v) for v in theta):
            raise InvalidParams(f"{fam} parameters must be finite: {theta}")
        # only N's location may be non-positive
        positive = theta[1:] if fam is Family.N else theta
        if any(v <= 0 for v in positive):
            raise InvalidParams(f"{fam} parameters must be positive: {theta}")

    def to_dict(self) -> dict:
        return {"family": self.family.value, "theta": list(self.theta)}

    @classmethod
    def from_dict(cls, d: dict) -> "RtdParams":
        return cls(Family.parse(d["family"]), tuple(d["theta"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "RtdParams":
        return cls.from_dict(json.loads(s))


def _scalar_or_array(x, out):
    return float(out) if np.ndim(x) == 0 else out


def log_pdf(params: RtdParams, x):
    """Natural log density at ``x`` (scalar or array)."""
    fam, theta = params.family, params.theta
    xa = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if fam is Family.N:
            mu, sigma = theta
            out = -math.log(sigma) - _HALF_LOG_2PI - 0.5 * ((xa - mu) / sigma) ** 2
        else:
            pos = xa > 0
            xs = np.where(pos, xa, 1.0)
            lx = np.log(xs)
            if fam is Family.LOG:
                s, sigma = theta
                out = -math.log(sigma) - lx - _HALF_LOG_2PI - 0.5 * ((lx - math.log(s)) / sigma) ** 2
            elif fam is Family.EXP:
                (beta,) = theta
                out = -math.log(beta) - xs / beta
            else:
                mu, lam = theta
                out = (
                    0.5 * math.log(lam) - _HALF_LOG_2PI - 1.5 * lx
                    - lam * (xs - mu) ** 2 / (2.0 * xs * mu * mu)
                )
            out = np.where(pos, out, LOG_DENSITY_FLOOR)
    out = np.where(np.isnan(out) | (out < LOG_DENSITY_FLOOR), LOG_DENSITY_FLOOR, out)
    return _scalar_or_array(x, out)


def pdf(params: RtdParams, x):
    return np.exp(log_pdf(params, x))


def cdf(params: RtdParams, x):
    fam, theta = params.family, params.theta
    xa = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if fam is Family.N:
            mu, sigma = theta
            out = special.ndtr((xa - mu) / sigma)
        else:
            pos = xa > 0
            xs = np.where(pos, xa, 1.0)
            if fam is Family.LOG:
                s, sigma = theta
                out = special.ndtr((np.log(xs) - math.log(s)) / sigma)
            elif fam is Family.EXP:
                (beta,) = theta
                out = -np.expm1(-xs / beta)
            else:
                mu, lam = theta
                r = np.sqrt(lam / xs)
                # second term computed in log space: exp(2 lam/mu) overflows for large shape
                out = special.ndtr(r * (xs / mu - 1.0)) + np.exp(
                    2.0 * lam / mu + special.log_ndtr(-r * (xs / mu + 1.0))
                )
            out = np.where(pos, out, 0.0)
    return _scalar_or_array(x, np.clip(out, 0.0, 1.0))


def ppf(params: RtdParams, q):
    """Quantile function (inverse CDF)."""
    fam, theta = params.family, params.theta
    qa = np.asarray(q, dtype=float)
    if np.any((qa < 0) | (qa > 1)):
        raise ValueError("quantile levels must lie in [0, 1]")
    with np.errstate(divide="ignore"):
        if fam is Family.N:
            out = theta[0] + theta[1] * special.ndtri(qa)
        elif fam is Family.LOG:
            out = theta[0] * np.exp(theta[1] * special.ndtri(qa))
        elif fam is Family.EXP:
            out = -theta[0] * np.log1p(-qa)
        else:
            mu, lam = theta
            out = stats.invgauss.ppf(qa, mu / lam, scale=lam)
    return _scalar_or_array(q, out)


def mle_fit(family, times) -> RtdParams:
    """Closed-form maximum-likelihood fit.

    Variances use the 1/k (likelihood-maximising) estimator. Zero-spread
    samples are fitted with the spread parameter floored at ``SCALE_FLOOR``
    (for INV: coefficient of variation ``sqrt(mu/lambda)`` floored).
    """
    fam = Family.parse(family)
    t = np.asarray(times, dtype=float).ravel()
    k = t.size
    if k < fam.n_params:
        raise DegenerateSample(f"{fam} fit needs at least {fam.n_params} observations, got {k}")
    if not np.all(np.isfinite(t)) or np.any(t <= 0):
        raise ValueError("runtimes must be positive and finite")
    if fam is Family.EXP:
        return RtdParams(fam, (t.mean(),))
    if fam is Family.N:
        return RtdParams(fam, (t.mean(), max(t.std(), SCALE_FLOOR)))
    if fam is Family.LOG:
        lt = np.log(t)
        return RtdParams(fam, (math.exp(lt.mean()), max(lt.std(), SCALE_FLOOR)))
    mu = t.mean()
    denom = np.sum(1.0 / t - 1.0 / mu)
    lam_cap = mu / SCALE_FLOOR**2
    lam = k / denom if denom > k / lam_cap else lam_cap
    return RtdParams(fam, (mu, lam))


def sample(params: RtdParams, n: int, seed, *, positive: bool = True) -> np.ndarray:
    """Draw ``n`` i.i.d. values.

    For ``N`` with ``positive=True`` non-positive draws are rejected and redrawn
    (i.e. the normal is truncated to ``(0, inf)``) so the result is usable as
    runtimes.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    fam, theta = params.family, params.theta
    if fam is Family.LOG:
        return theta[0] * np.exp(theta[1] * rng.standard_normal(n))
    if fam is Family.EXP:
        return rng.exponential(theta[0], n)
    if fam is Family.INV:
        return rng.wald(theta[0], theta[1], n)
    mu, sigma = theta
    out = rng.normal(mu, sigma, n)
    if not positive:
        return out
    if special.ndtr(mu / sigma) < 1e-6:
        raise InvalidParams(f"N{theta} has almost no mass on positive runtimes")
    bad = out <= 0
    while bad.any():
        out[bad] = rng.normal(mu, sigma, int(bad.sum()))
        bad = out <= 0
    return out


def rescale_params(params: RtdParams, c: float) -> RtdParams:
    """Parameters of ``c * X`` for ``X ~ params``."""
    if not (c > 0 and math.isfinite(c)):
        raise ValueError(f"scale factor must be positive and finite, got {c}")
    fam, theta = params.family, params.theta
    if fam is Family.LOG:
        return RtdParams(fam, (theta[0] * c, theta[1]))
    return RtdParams(fam, tuple(v * c for v in theta))
