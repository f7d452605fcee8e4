"""Log-gamma, digamma and trigamma on the positive real axis.

All three kernels shift the argument upward with the functional recurrence
until it exceeds ``_SHIFT`` and then evaluate the asymptotic (Stirling-type)
series.  They accept scalars or arrays and return the same shape.
"""

import math

import numpy as np

_SHIFT = 10.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# Bernoulli-number coefficients B_{2n} / (2n (2n - 1)) for log-gamma.
_LGAMMA_COEF = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
    1.0 / 156.0,
)
# B_{2n} / (2n) for digamma.
_DIGAMMA_COEF = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)
# B_{2n} for trigamma.
_TRIGAMMA_COEF = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
)


class DomainError(ValueError):
    """Argument outside the positive real axis."""


def _as_positive(x):
    arr = np.asarray(x, dtype=float)
    if not np.all(arr > 0.0):
        raise DomainError("argument must be strictly positive and finite")
    return arr


def _wrap(arr, x):
    if np.ndim(x) == 0:
        return float(arr)
    return arr


def _shift_up(x):
    """Return ``(z, n)`` with ``z = x + n`` and ``n`` the smallest count making ``z >= _SHIFT``."""
    n = np.ceil(np.maximum(_SHIFT - x, 0.0))
    return x + n, n


def log_gamma(x):
    """Natural log of the gamma function for ``x > 0``."""
    arr = _as_positive(x)
    z, n = _shift_up(arr)
    inv = 1.0 / z
    inv2 = inv * inv
    series = np.zeros_like(z)
    power = inv.copy()
    for c in _LGAMMA_COEF:
        series += c * power
        power = power * inv2
    out = (z - 0.5) * np.log(z) - z + _HALF_LOG_2PI + series
    kmax = int(n.max(initial=0.0))
    if kmax:
        # log Gamma(x) = log Gamma(x + n) - log(x (x + 1) ... (x + n - 1))
        prod = np.ones_like(z)
        for k in range(kmax):
            prod *= np.where(k < n, arr + k, 1.0)
        out = out - np.log(prod)
    return _wrap(out, x)


def digamma(x):
    """Digamma function, the derivative of :func:`log_gamma`."""
    arr = _as_positive(x)
    z, n = _shift_up(arr)
    inv2 = 1.0 / (z * z)
    series = np.zeros_like(z)
    power = inv2.copy()
    for c in _DIGAMMA_COEF:
        series += c * power
        power = power * inv2
    out = np.log(z) - 0.5 / z - series
    # smallest arguments last so their large terms do not swamp the rest
    for k in range(int(n.max(initial=0.0)) - 1, -1, -1):
        out -= np.where(k < n, 1.0 / (arr + k), 0.0)
    return _wrap(out, x)


def trigamma(x):
    """Trigamma function, the derivative of :func:`digamma`."""
    arr = _as_positive(x)
    z, n = _shift_up(arr)
    inv = 1.0 / z
    inv2 = inv * inv
    series = np.zeros_like(z)
    power = inv2 * inv
    for c in _TRIGAMMA_COEF:
        series += c * power
        power = power * inv2
    out = inv + 0.5 * inv2 + series
    for k in range(int(n.max(initial=0.0)) - 1, -1, -1):
        out += np.where(k < n, 1.0 / ((arr + k) * (arr + k)), 0.0)
    return _wrap(out, x)




# Shifted differences f(a + x) - f(a).  Subtracting two kernel values loses
# about log10(a) digits, which is fatal once a reaches 1e8 or so.  For
# a >= _DIFF_SWITCH the asymptotic series are therefore differenced term by
# term as z**-p * expm1(-p * log1p(x / a)), which keeps full relative
# accuracy; below it the plain difference is already accurate to round-off
# in f(a).
_DIFF_SWITCH = 20.0


def _wrap_pair(out, a, x):
    if np.ndim(a) == 0 and np.ndim(x) == 0:
        return float(out)
    return out


def _diff_args(a, x):
    a = _as_positive(a)
    x = np.asarray(x, dtype=float)
    if not np.all(x >= 0.0):
        raise DomainError("increment must be nonnegative")
    a, x = np.broadcast_arrays(a, x)
    a = a.astype(float)
    x = x.astype(float)
    return a, x, a >= _DIFF_SWITCH


def log_gamma_diff(a, x):
    """``log_gamma(a + x) - log_gamma(a)`` for ``a > 0``, ``x >= 0``, accurate for huge ``a``."""
    aa, xx, big = _diff_args(a, x)
    out = np.empty(aa.shape)
    small = ~big
    if np.any(small):
        out[small] = log_gamma(aa[small] + xx[small]) - log_gamma(aa[small])
    if np.any(big):
        z, y = aa[big], xx[big]
        lz = np.log1p(y / z)
        val = (z - 0.5) * lz + y * np.log(z + y) - y
        for k, c in enumerate(_LGAMMA_COEF[:4]):
            p = 2 * k + 1
            val += c * z**-p * np.expm1(-p * lz)
        out[big] = val
    return _wrap_pair(out, a, x)


def digamma_diff(a, x):
    """``digamma(a + x) - digamma(a)``, accurate for huge ``a``."""
    aa, xx, big = _diff_args(a, x)
    out = np.empty(aa.shape)
    small = ~big
    if np.any(small):
        out[small] = digamma(aa[small] + xx[small]) - digamma(aa[small])
    if np.any(big):
        z, y = aa[big], xx[big]
        lz = np.log1p(y / z)
        val = lz + 0.5 * y / z / (z + y)
        for k, c in enumerate(_DIGAMMA_COEF[:4]):
            p = 2 * k + 2
            val -= c * z**-p * np.expm1(-p * lz)
        out[big] = val
    return _wrap_pair(out, a, x)


def trigamma_diff(a, x):
    """``trigamma(a + x) - trigamma(a)``, accurate for huge ``a``."""
    aa, xx, big = _diff_args(a, x)
    out = np.empty(aa.shape)
    small = ~big
    if np.any(small):
        out[small] = trigamma(aa[small] + xx[small]) - trigamma(aa[small])
    if np.any(big):
        z, y = aa[big], xx[big]
        lz = np.log1p(y / z)
        val = -y / z / (z + y) + 0.5 * z**-2 * np.expm1(-2 * lz)
        for k, c in enumerate(_TRIGAMMA_COEF[:4]):
            p = 2 * k + 3
            val += c * z**-p * np.expm1(-p * lz)
        out[big] = val
    return _wrap_pair(out, a, x)
