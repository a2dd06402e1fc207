"""Normal quantiles, the pooled two-sample t-test and minimum sample sizes."""

from __future__ import annotations

import enum
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import stats as _sps


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of a function."""


class IndicatorKind(str, enum.Enum):
    MEAN = "mean"
    PROPORTION = "proportion"


# Wichura (1988), algorithm AS241 PPND16: rational approximations in three
# regions, relative accuracy about 1e-16.
_A = (
    3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
    1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
    3.3430575583588128105e4, 2.5090809287301226727e3,
)
_B = (
    1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
    2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4,
    5.2264952788528545610e3,
)
_C = (
    1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
    3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
    2.27238449892691845833e-2, 7.74545014278341407640e-4,
)
_D = (
    1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
    1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
    1.05075007164441684324e-9,
)
_E = (
    6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
    2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
    2.71155556874348757815e-5, 2.01033439929228813265e-7,
)
_F = (
    1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
    7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
    2.04426310338993978564e-15,
)


def _poly(coeffs: Sequence[float], x: float) -> float:
    acc = 0.0
    for c in reversed(coeffs):
        acc = acc * x + c
    return acc


def normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def normal_quantile(q: float) -> float:
    """Inverse of the standard normal CDF.

    Raises:
        DomainError: if ``q`` is not strictly inside (0, 1).
    """
    if not 0.0 < q < 1.0:
        raise DomainError(f"normal_quantile needs 0 < q < 1, got {q!r}")
    r = q - 0.5
    if abs(r) <= 0.425:
        s = 0.180625 - r * r
        return r * _poly(_A, s) / _poly(_B, s)
    s = q if r < 0 else 1.0 - q
    s = math.sqrt(-math.log(s))
    if s <= 5.0:
        s -= 1.6
        z = _poly(_C, s) / _poly(_D, s)
    else:
        s -= 5.0
        z = _poly(_E, s) / _poly(_F, s)
    return -z if r < 0 else z


def t_quantile(q: float, df: float) -> float:
    if df < 1:
        raise DomainError(f"t distribution needs df >= 1, got {df}")
    return float(_sps.t.ppf(q, df))


@dataclass(frozen=True)
class IndicatorEstimate:
    """Summary of one group's valid samples: count, mean and variance.

    For proportion indicators the variance is ``p * (1 - p)``.
    """

    kind: IndicatorKind
    count: int
    mean: float
    variance: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", IndicatorKind(self.kind))
        if self.variance < 0:
            raise DomainError("variance must be non-negative")
        if self.kind is IndicatorKind.MEAN and self.count < 2:
            raise DomainError("mean indicators need at least 2 samples")
        if self.kind is IndicatorKind.PROPORTION:
            if self.count < 1:
                raise DomainError("proportion indicators need at least 1 sample")
            if not 0.0 <= self.mean <= 1.0:
                raise DomainError("a proportion must lie in [0, 1]")

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    @classmethod
    def from_values(cls, kind: IndicatorKind | str, values: np.ndarray) -> "IndicatorEstimate":
        kind = IndicatorKind(kind)
        values = np.asarray(values, dtype=float)
        n = values.size
        if kind is IndicatorKind.PROPORTION:
            p = float(values.mean()) if n else 0.0
            return cls(kind, n, p, p * (1.0 - p))
        var = float(values.var(ddof=1)) if n >= 2 else 0.0
        return cls(kind, n, float(values.mean()) if n else 0.0, var)


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    pooled_std: float
    critical: float
    reject: bool


def pooled_t_test(a: IndicatorEstimate, b: IndicatorEstimate, alpha: float) -> TTestResult:
    """Two-sided pooled-variance t-test of equal means.

    With zero pooled variance the statistic is 0 for equal means and a signed
    infinity otherwise (which always rejects).
    """
    if a.kind is not b.kind:
        raise DomainError("both estimates must be of the same kind")
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must be in (0, 1), got {alpha}")
    df = a.count + b.count - 2
    crit = t_quantile(1.0 - alpha / 2.0, df)
    sp2 = ((a.count - 1) * a.variance + (b.count - 1) * b.variance) / df
    sp = math.sqrt(sp2)
    diff = a.mean - b.mean
    if sp == 0.0:
        t = 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    else:
        t = diff / (sp * math.sqrt(1.0 / a.count + 1.0 / b.count))
    return TTestResult(t=t, df=df, pooled_std=sp, critical=crit, reject=abs(t) > crit)


@dataclass(frozen=True)
class SampleSizeResult:
    n1: int
    n2: int
    z_alpha: float
    z_beta: float


def _check_common(k: float, alpha: float, beta: float, delta: float) -> tuple[float, float]:
    if not delta > 0:
        raise DomainError(f"delta must be positive, got {delta}")
    if not k > 0:
        raise DomainError(f"k must be positive, got {k}")
    if not (0 < alpha < 1 and 0 < beta < 1):
        raise DomainError("alpha and beta must lie in (0, 1)")
    return normal_quantile(1.0 - alpha / 2.0), normal_quantile(1.0 - beta)


def _sizes(raw: float, k: float, za: float, zb: float) -> SampleSizeResult:
    n1 = max(1, math.ceil(raw))
    return SampleSizeResult(n1=n1, n2=max(1, math.ceil(k * n1)), z_alpha=za, z_beta=zb)


def min_sample_size_mean(
    s1: float, s2: float, k: float, alpha: float, beta: float, delta: float
) -> SampleSizeResult:
    """Minimum group sizes for detecting a mean gap ``delta``; ``n2 = ceil(k * n1)``."""
    za, zb = _check_common(k, alpha, beta, delta)
    if s1 < 0 or s2 < 0 or (s1 == 0 and s2 == 0):
        raise DomainError("standard deviations must be >= 0 and not both zero")
    raw = (s1 * s1 + s2 * s2 / k) * (za + zb) ** 2 / (delta * delta)
    return _sizes(raw, k, za, zb)


def min_sample_size_proportion(
    p1: float, p2: float, k: float, alpha: float, beta: float, delta: float
) -> SampleSizeResult:
    """Minimum group sizes for detecting a gap ``delta`` between two rates.

    The null term uses the weighted average rate ``(p1 + k p2) / (1 + k)``.
    """
    za, zb = _check_common(k, alpha, beta, delta)
    for p in (p1, p2):
        if not 0.0 < p < 1.0:
            raise DomainError(f"proportions must lie in (0, 1), got {p}")
    q1, q2 = 1.0 - p1, 1.0 - p2
    p_bar = (p1 + k * p2) / (1.0 + k)
    q_bar = 1.0 - p_bar
    root = math.sqrt(p_bar * q_bar * (1.0 + 1.0 / k)) * za + math.sqrt(p1 * q1 + p2 * q2 / k) * zb
    return _sizes(root * root / (delta * delta), k, za, zb)
