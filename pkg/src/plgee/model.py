"""Marginal GLM layer: canonical links with three derivatives, the
longitudinal dataset container, and per-subject model evaluation.

Canonical links mean the per-cell variance equals the first derivative of
the mean function, so ``d1`` doubles as the variance everywhere downstream.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .errors import InvalidInputError, LinkOverflowError

LINK_KINDS = ("identity", "log", "logit", "probit")

LOG_THETA_LIMIT = 700.0

# Smallest positive normal double; saturated logit/probit variances are
# clamped here instead of underflowing to zero.
_TINY = np.finfo(float).tiny

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gauss_pdf(x):
    x = np.asarray(x, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gauss_cdf(x):
    x = np.asarray(x, dtype=float)
    return 0.5 * erfc(-x / _SQRT2)


def gauss_quantile_array(q):
    """Vectorized standard normal quantile: Acklam's rational approximation
    as the starting point, polished with two Newton steps against gauss_cdf
    so quantiles and CDF come from the same expansion."""
    q = np.asarray(q, dtype=float)
    if np.any((q <= 0.0) | (q >= 1.0)):
        raise InvalidInputError("quantile arguments must be in (0,1)")
    a = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
         1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
    b = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
         6.680131188771972e+01, -1.328068155288572e+01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
         -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
         3.754408661907416e+00)
    p_low = 0.02425

    def _tail(u):
        return (((((c[0] * u + c[1]) * u + c[2]) * u + c[3]) * u + c[4]) * u + c[5]) / \
               ((((d[0] * u + d[1]) * u + d[2]) * u + d[3]) * u + 1.0)

    qc = np.clip(q, p_low, 1.0 - p_low)
    u = qc - 0.5
    r = u * u
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * u / \
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    lo = q < p_low
    if np.any(lo):
        x = np.where(lo, _tail(np.sqrt(-2.0 * np.log(np.where(lo, q, 0.5)))), x)
    hi = q > 1.0 - p_low
    if np.any(hi):
        x = np.where(hi, -_tail(np.sqrt(-2.0 * np.log1p(-np.where(hi, q, 0.5)))), x)
    for _ in range(2):
        x = x - (gauss_cdf(x) - q) / np.maximum(gauss_pdf(x), _TINY)
    return x


def gauss_quantile(q):
    return float(gauss_quantile_array(float(q)))


@dataclass(frozen=True)
class LinkFamily:
    kind: str

    def __post_init__(self):
        if self.kind not in LINK_KINDS:
            raise InvalidInputError(
                f"unknown link kind {self.kind!r}; expected one of {LINK_KINDS}"
            )


IDENTITY = LinkFamily("identity")
LOG = LinkFamily("log")
LOGIT = LinkFamily("logit")
PROBIT = LinkFamily("probit")


@dataclass(frozen=True)
class LinkValues:
    mu: float
    d1: float
    d2: float
    d3: float


def _link_arrays(family, theta):
    """Vectorized mean function with three derivatives.

    Returns (mu, d1, d2, d3) arrays.  d1 is clamped to the smallest positive
    normal so saturated logit/probit cells keep strictly positive variance.
    """
    theta = np.asarray(theta, dtype=float)
    kind = family.kind
    if kind == "identity":
        one = np.ones_like(theta)
        zero = np.zeros_like(theta)
        return theta.copy(), one, zero, zero
    if kind == "log":
        if np.any(np.abs(theta) > LOG_THETA_LIMIT):
            raise LinkOverflowError(
                f"log link overflow: |theta| > {LOG_THETA_LIMIT:g}"
            )
        e = np.exp(theta)
        return e, e.copy(), e.copy(), e.copy()
    if kind == "logit":
        # stable sigmoid; variance in a form that underflows gracefully
        mu = np.where(theta >= 0,
                      1.0 / (1.0 + np.exp(-np.abs(theta))),
                      np.exp(-np.abs(theta)) / (1.0 + np.exp(-np.abs(theta))))
        z = np.exp(-np.abs(theta))
        d1 = np.maximum(z / np.square(1.0 + z), _TINY)
        d2 = d1 * (1.0 - 2.0 * mu)
        d3 = d1 * (1.0 - 6.0 * mu + 6.0 * mu * mu)
        return mu, d1, d2, d3
    # probit
    mu = gauss_cdf(theta)
    phi = np.maximum(gauss_pdf(theta), _TINY)
    d2 = -theta * phi
    d3 = (theta * theta - 1.0) * phi
    return mu, phi, d2, d3


def link_eval(family, theta):
    """Mean function and first three derivatives at a single theta."""
    theta = float(theta)
    if not np.isfinite(theta):
        raise InvalidInputError(f"theta must be finite, got {theta}")
    mu, d1, d2, d3 = _link_arrays(family, np.float64(theta))
    return LinkValues(mu=float(mu), d1=float(d1), d2=float(d2), d3=float(d3))


class LongitudinalDataset:
    """n subjects, each with an m x p design X_i and an m-vector response y_i.

    Subjects are stored in a fixed order; that order is the filtration index
    under which the residual vectors are assumed to be martingale
    differences, and every estimator iterates in it.  Responses are kept
    real-valued even for count/binary links (quasi-likelihood: only the
    first two marginal moments are modeled).
    """

    __slots__ = ("X", "y")

    def __init__(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim != 3:
            raise InvalidInputError(f"X must be (n, m, p), got shape {X.shape}")
        if y.shape != X.shape[:2]:
            raise InvalidInputError(
                f"y shape {y.shape} does not match X subjects/times {X.shape[:2]}"
            )
        n, m, p = X.shape
        if n < 1 or m < 1 or p < 1:
            raise InvalidInputError(f"need n, m, p >= 1, got {(n, m, p)}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise InvalidInputError("dataset contains non-finite entries")
        self.X = X
        self.y = y

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def m(self):
        return self.X.shape[1]

    @property
    def p(self):
        return self.X.shape[2]

    def subset(self, n_head):
        """Prefix of the first n_head subjects, in stored order."""
        if not 1 <= n_head <= self.n:
            raise InvalidInputError(f"prefix size {n_head} out of range [1, {self.n}]")
        return LongitudinalDataset(self.X[:n_head], self.y[:n_head])

    def permuted(self, order):
        order = np.asarray(order, dtype=int)
        if sorted(order.tolist()) != list(range(self.n)):
            raise InvalidInputError("order must be a permutation of subject indices")
        return LongitudinalDataset(self.X[order], self.y[order])


@dataclass(frozen=True)
class ModelEval:
    """Per-cell model quantities at a given beta; arrays are (n, m)."""

    theta: np.ndarray
    mu: np.ndarray
    var: np.ndarray   # diagonal of A_i, one row per subject
    eps: np.ndarray

    @property
    def sd(self):
        return np.sqrt(self.var)


def eval_model(data, family, beta):
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (data.p,):
        raise InvalidInputError(f"beta must have length {data.p}, got shape {beta.shape}")
    if not np.all(np.isfinite(beta)):
        raise InvalidInputError("beta has non-finite entries")
    theta = data.X @ beta
    try:
        mu, var, _, _ = _link_arrays(family, theta)
    except LinkOverflowError:
        bad = np.argwhere(np.abs(theta) > LOG_THETA_LIMIT)
        i, j = (int(bad[0][0]), int(bad[0][1])) if len(bad) else (None, None)
        raise LinkOverflowError(
            f"log link overflow at subject {i}, time {j}", subject=i, time=j
        ) from None
    return ModelEval(theta=theta, mu=mu, var=var, eps=data.y - mu)
