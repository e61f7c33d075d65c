"""Scalar special functions underpinning all kernel evaluations.

Thin wrappers around scipy.special that pin down the domain checks and
limiting conventions the covariance kernels rely on. Everything accepts
scalars or numpy arrays and broadcasts like a ufunc. All downstream kernels
call the modified Bessel function through this module so accuracy is
centralized in one place.
"""

from __future__ import annotations

import numpy as np
from scipy import special as _sp

__all__ = [
    "log_gamma",
    "bessel_k",
    "bessel_k_scaled",
    "std_normal_pdf",
    "std_normal_cdf",
]


def _return(x: np.ndarray):
    # 0-d arrays come back as python-friendly scalars
    return x[()] if isinstance(x, np.ndarray) and x.ndim == 0 else x


def log_gamma(x):
    """Natural logarithm of the gamma function.

    Parameters
    ----------
    x : float or ndarray
        Argument(s), strictly positive.

    Returns
    -------
    float or ndarray
        ln Gamma(x).

    Raises
    ------
    ValueError
        If any element of x is <= 0.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0):
        raise ValueError("log_gamma requires x > 0")
    return _return(_sp.gammaln(x))


def bessel_k(nu, x):
    """Modified Bessel function of the second kind K_nu(x).

    Symmetric in the order (K_{-nu} = K_nu), so negative orders are mapped
    through their absolute value. Underflows to 0 for large x instead of
    raising.

    Parameters
    ----------
    nu : float or ndarray
        Order.
    x : float or ndarray
        Argument(s), strictly positive.

    Raises
    ------
    ValueError
        If any element of x is <= 0.
    """
    nu = np.abs(np.asarray(nu, dtype=float))
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0):
        raise ValueError("bessel_k requires x > 0")
    return _return(_sp.kv(nu, x))


def bessel_k_scaled(nu, x):
    """Exponentially scaled Bessel function, K_nu(x) * exp(x).

    Useful for log-space kernel evaluation: log K_nu(x) =
    log(bessel_k_scaled(nu, x)) - x stays finite far beyond the point where
    K_nu itself underflows.
    """
    nu = np.abs(np.asarray(nu, dtype=float))
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0):
        raise ValueError("bessel_k_scaled requires x > 0")
    return _return(_sp.kve(nu, x))


def std_normal_pdf(x):
    """Standard normal density phi(x) = exp(-x^2/2) / sqrt(2 pi)."""
    x = np.asarray(x, dtype=float)
    return _return(np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi))


def std_normal_cdf(x):
    """Standard normal distribution function Phi(x)."""
    x = np.asarray(x, dtype=float)
    return _return(_sp.ndtr(x))
