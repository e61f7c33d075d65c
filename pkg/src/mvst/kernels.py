"""Covariance kernels for multivariate space-time Gaussian random fields.

This module implements a non-separable matrix-valued covariance family built
from three ingredients:

* a spatial correlation kernel, either Matern

      M(h; r, nu) = 2^(1-nu)/Gamma(nu) * (r h)^nu * K_nu(r h),

  with K_nu the modified Bessel function of the second kind, or generalized
  Cauchy

      C(h; r, nu, lambda) = (1 + r h^lambda)^(-nu),      0 < lambda <= 2;

* a Bernstein function psi(x) = (alpha x^a + 1)^b with alpha > 0, 0 < a <= 1
  and 0 <= b <= 1 that couples space and time (b = 0 decouples them);

* cross-kernel parameters derived from the marginal parameters. Writing
  nu_ij = (nu_i + nu_j)/2, the Matern family uses the quadratic-mean scale

      r_ij = sqrt((r_i^2 + r_j^2)/2),
      rho_ij = beta_ij * Gamma(nu_ij)/sqrt(Gamma(nu_i) Gamma(nu_j))
               * r_i^nu_i r_j^nu_j / r_ij^(2 nu_ij),

  while the Cauchy family uses the harmonic-mean scale

      r_ij = ((r_i^-1 + r_j^-1)/2)^-1,
      rho_ij = beta_ij * Gamma(nu_ij)/sqrt(Gamma(nu_i) Gamma(nu_j))
               * r_ij^nu_ij / sqrt(r_i^nu_i r_j^nu_j),

  where [beta_ij] is any correlation matrix. rho_ij is the co-located
  cross-correlation; it collapses to beta_ij when the marginals coincide.

The assembled cross-covariance between variable i at (s, t) and variable j at
(s', t'), with h = ||s - s'|| and u = t - t', is

    C_ij(h, u) = sigma_i sigma_j rho_ij (alpha |u|^(2a) + 1)^(-tau)
                 * F(h / (alpha |u|^(2a) + 1)^(b/2); r_ij, nu_ij[, lambda])

with F the Matern or Cauchy correlation and tau >= b d / 2 (d the spatial
dimension) required for validity. The family is fully symmetric:
C_ij(h, u) = C_ji(h, u) = C_ij(h, -u).

Both spatial kernels are scale mixtures of Gaussians resp. exponentials:
M(h; r, nu) integrates exp(-h^2 xi) against an inverse-gamma-type density
m_M(xi; r, nu) and the Cauchy kernel integrates exp(-h^lambda xi) against a
Gamma(nu, r) density m_C(xi; r, nu); the cross kernels correspond to mixing
against beta_ij sqrt(m_i m_j). These densities are exposed for verification.

Kernels are normalized as correlations (value 1 at the origin); all sigma
factors appear only in :func:`cov`. Variable indices are 0-based throughout.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .specialfn import bessel_k_scaled, log_gamma

__all__ = [
    "Family",
    "MarginalParams",
    "TemporalParams",
    "CrossParams",
    "ModelSpec",
    "ValidityReport",
    "matern_corr",
    "cauchy_corr",
    "bernstein",
    "cross_params_matern",
    "cross_params_cauchy",
    "cross_param_tables",
    "cov",
    "cov_pairs",
    "mixture_density_matern",
    "mixture_density_cauchy",
    "validate",
]

MODEL_SCHEMA_VERSION = 1

# below this value of r*h the Matern correlation is evaluated by its limit 1
_MATERN_ORIGIN_EPS = 1e-12


class Family(str, enum.Enum):
    """Cross-covariance family selector."""

    MATERN = "gneiting-matern"
    CAUCHY = "gneiting-cauchy"


@dataclass(frozen=True)
class MarginalParams:
    """Per-variable marginal parameters.

    sigma : standard deviation, > 0
    nu    : smoothness, > 0
    r     : spatial scale in 1/km (inverse of the range 1/r), > 0
    """

    sigma: float
    nu: float
    r: float


@dataclass(frozen=True)
class TemporalParams:
    """Temporal and space-time interaction parameters.

    alpha : temporal scale, > 0
    a     : temporal smoothness, in (0, 1]
    b     : space-time separability, in [0, 1]; b = 0 is separable
    tau   : temporal decay exponent, >= b*d/2 for validity
    """

    alpha: float
    a: float
    b: float
    tau: float


@dataclass(frozen=True)
class CrossParams:
    """Derived cross-kernel parameters for one variable pair."""

    r: float
    nu: float
    rho: float


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Full parameter set of a p-variate space-time model.

    Serialized as a JSON document (schema_version 1) with fields::

        {
          "schema_version": 1,
          "family": "gneiting-matern" | "gneiting-cauchy",
          "p": <int>, "d": <int>,
          "sigma": [..p..], "nu": [..p..], "inv_range_km": [..p..],
          "beta": [[..p x p..]],
          "alpha": <float>, "a": <float>, "b": <float>, "tau": <float>,
          "lambda": <float> | null
        }

    inv_range_km holds 1/r_i in km; internally the scale r_i (1/km) is used.
    """

    family: Family
    p: int
    d: int
    marginals: tuple[MarginalParams, ...]
    beta: np.ndarray
    temporal: TemporalParams
    lam: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "marginals", tuple(self.marginals))
        beta = np.array(self.beta, dtype=float)
        if beta.shape != (self.p, self.p):
            raise ValueError(f"beta must be {self.p}x{self.p}, got {beta.shape}")
        if len(self.marginals) != self.p:
            raise ValueError(f"need {self.p} marginals, got {len(self.marginals)}")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)

    @property
    def sigma(self) -> np.ndarray:
        return np.array([m.sigma for m in self.marginals])

    @property
    def nu(self) -> np.ndarray:
        return np.array([m.nu for m in self.marginals])

    @property
    def r(self) -> np.ndarray:
        return np.array([m.r for m in self.marginals])

    @property
    def inv_range_km(self) -> np.ndarray:
        return 1.0 / self.r

    def to_dict(self) -> dict:
        t = self.temporal
        return {
            "schema_version": MODEL_SCHEMA_VERSION,
            "family": self.family.value,
            "p": self.p,
            "d": self.d,
            "sigma": [m.sigma for m in self.marginals],
            "nu": [m.nu for m in self.marginals],
            "inv_range_km": [1.0 / m.r for m in self.marginals],
            "beta": self.beta.tolist(),
            "alpha": t.alpha,
            "a": t.a,
            "b": t.b,
            "tau": t.tau,
            "lambda": self.lam,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelSpec":
        required = {"schema_version", "family", "p", "d", "sigma", "nu",
                    "inv_range_km", "beta", "alpha", "a", "b", "tau"}
        allowed = required | {"lambda"}
        keys = set(doc)
        if not required.issubset(keys):
            raise ValueError(f"model document missing keys: {sorted(required - keys)}")
        if not keys.issubset(allowed):
            raise ValueError(f"model document has unknown keys: {sorted(keys - allowed)}")
        if doc["schema_version"] != MODEL_SCHEMA_VERSION:
            raise ValueError(f"unsupported model schema_version {doc['schema_version']!r}")
        p = int(doc["p"])
        for name in ("sigma", "nu", "inv_range_km"):
            if len(doc[name]) != p:
                raise ValueError(f"field {name!r} must have length p={p}")
        marginals = tuple(
            MarginalParams(sigma=float(s), nu=float(n), r=1.0 / float(ir))
            for s, n, ir in zip(doc["sigma"], doc["nu"], doc["inv_range_km"])
        )
        temporal = TemporalParams(alpha=float(doc["alpha"]), a=float(doc["a"]),
                                  b=float(doc["b"]), tau=float(doc["tau"]))
        lam = doc.get("lambda")
        return cls(family=Family(doc["family"]), p=p, d=int(doc["d"]),
                   marginals=marginals, beta=np.asarray(doc["beta"], dtype=float),
                   temporal=temporal, lam=None if lam is None else float(lam))

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


@dataclass
class ValidityReport:
    """Outcome of :func:`validate`: empty violations means a valid model."""

    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def matern_corr(h, r, nu):
    """Matern correlation 2^(1-nu)/Gamma(nu) (r h)^nu K_nu(r h).

    Evaluated in log space through the scaled Bessel function, so large
    arguments underflow gracefully to 0. Arguments below r*h = 1e-12 return
    the continuity limit 1. `h` must be nonnegative; `r`, `nu` positive
    (arrays broadcast).
    """
    h = np.asarray(h, dtype=float)
    r = np.asarray(r, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if np.any(h < 0):
        raise ValueError("matern_corr requires h >= 0")
    if np.any(r <= 0) or np.any(nu <= 0):
        raise ValueError("matern_corr requires r > 0 and nu > 0")
    x = r * h
    x, nu = np.broadcast_arrays(x, nu)
    out = np.ones(x.shape, dtype=float)
    mask = x >= _MATERN_ORIGIN_EPS
    if np.any(mask):
        xm = x[mask]
        num = nu[mask]
        with np.errstate(over="ignore", divide="ignore"):
            log_c = ((1.0 - num) * math.log(2.0) - log_gamma(num)
                     + num * np.log(xm) + np.log(bessel_k_scaled(num, xm)) - xm)
        # the correlation is <= 1; clipping also handles the inf corner where
        # the scaled Bessel overflows for extreme (nu, x) combinations
        out[mask] = np.exp(np.minimum(log_c, 0.0))
    return out[()] if out.ndim == 0 else out


def cauchy_corr(h, r, nu, lam):
    """Generalized Cauchy correlation (1 + r h^lambda)^(-nu)."""
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValueError("cauchy_corr requires h >= 0")
    if np.any(np.asarray(r) <= 0) or np.any(np.asarray(nu) <= 0):
        raise ValueError("cauchy_corr requires r > 0 and nu > 0")
    if not 0 < lam <= 2:
        raise ValueError("cauchy_corr requires 0 < lambda <= 2")
    out = (1.0 + r * h**lam) ** (-np.asarray(nu, dtype=float))
    return out[()] if np.ndim(out) == 0 else out


def bernstein(x, t: TemporalParams):
    """Bernstein coupling function (alpha x^a + 1)^b, >= 1 for x >= 0."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("bernstein requires x >= 0")
    out = (t.alpha * x**t.a + 1.0) ** t.b
    return out[()] if np.ndim(out) == 0 else out


def cross_params_matern(i: MarginalParams, j: MarginalParams, beta_ij: float) -> CrossParams:
    """Cross-kernel parameters (quadratic-mean scale) for the Matern family."""
    nu_ij = 0.5 * (i.nu + j.nu)
    r_ij = math.sqrt(0.5 * (i.r**2 + j.r**2))
    log_scale = (log_gamma(nu_ij) - 0.5 * (log_gamma(i.nu) + log_gamma(j.nu))
                 + (i.nu * math.log(i.r) + j.nu * math.log(j.r))
                 - 2.0 * nu_ij * math.log(r_ij))
    return CrossParams(r=r_ij, nu=nu_ij, rho=beta_ij * math.exp(log_scale))


def cross_params_cauchy(i: MarginalParams, j: MarginalParams, beta_ij: float) -> CrossParams:
    """Cross-kernel parameters (harmonic-mean scale) for the Cauchy family."""
    nu_ij = 0.5 * (i.nu + j.nu)
    r_ij = 1.0 / (0.5 * (1.0 / i.r + 1.0 / j.r))
    log_scale = (log_gamma(nu_ij) - 0.5 * (log_gamma(i.nu) + log_gamma(j.nu))
                 + nu_ij * math.log(r_ij)
                 - 0.5 * (i.nu * math.log(i.r) + j.nu * math.log(j.r)))
    return CrossParams(r=r_ij, nu=nu_ij, rho=beta_ij * math.exp(log_scale))


def cross_param_tables(model: ModelSpec):
    """p x p arrays (R, NU, RHO) of cross-kernel parameters.

    Built from index-symmetric primitives so each array equals its transpose
    bit-exactly; the diagonal of RHO is exactly beta's diagonal.
    """
    nu = model.nu
    r = model.r
    g = log_gamma(nu)
    nlr = nu * np.log(r)
    NU = 0.5 * (nu[:, None] + nu[None, :])
    if model.family is Family.MATERN:
        R = np.sqrt(0.5 * (r[:, None] ** 2 + r[None, :] ** 2))
        logs = (log_gamma(NU) - 0.5 * (g[:, None] + g[None, :])
                + (nlr[:, None] + nlr[None, :]) - 2.0 * NU * np.log(R))
    else:
        inv = 1.0 / r
        R = 1.0 / (0.5 * (inv[:, None] + inv[None, :]))
        logs = (log_gamma(NU) - 0.5 * (g[:, None] + g[None, :])
                + NU * np.log(R) - 0.5 * (nlr[:, None] + nlr[None, :]))
    RHO = model.beta * np.exp(logs)
    np.fill_diagonal(RHO, model.beta.diagonal().copy())
    return R, NU, RHO


def cov_pairs(model: ModelSpec, i, j, h, u):
    """Cross-covariance evaluated elementwise over index/lag arrays.

    `i`, `j` are 0-based variable index arrays; `h` spatial lags in km
    (nonnegative); `u` temporal lags in days (any sign). All broadcast
    together. This is the vectorized engine behind :func:`cov` and the
    matrix assembly / pairwise-likelihood hot paths.
    """
    i = np.asarray(i, dtype=np.intp)
    j = np.asarray(j, dtype=np.intp)
    if np.any(i < 0) or np.any(i >= model.p) or np.any(j < 0) or np.any(j >= model.p):
        raise IndexError(f"variable indices must be in [0, {model.p})")
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValueError("spatial lags must be nonnegative")
    u = np.abs(np.asarray(u, dtype=float))
    R, NU, RHO = cross_param_tables(model)
    sig = model.sigma
    t = model.temporal
    eta = t.alpha * u ** (2.0 * t.a) + 1.0
    harg = h / eta ** (0.5 * t.b)
    if model.family is Family.MATERN:
        corr = matern_corr(harg, R[i, j], NU[i, j])
    else:
        corr = cauchy_corr(harg, R[i, j], NU[i, j], model.lam)
    out = sig[i] * sig[j] * RHO[i, j] * eta ** (-t.tau) * corr
    return out[()] if np.ndim(out) == 0 else out


def cov(model: ModelSpec, i: int, j: int, h, u):
    """Cross-covariance C_ij(h, u) of the assembled space-time model.

    Parameters
    ----------
    model : ModelSpec
    i, j : int
        0-based variable indices.
    h : float or ndarray
        Spatial lag(s) in km, >= 0.
    u : float or ndarray
        Temporal lag(s) in days; only |u| enters (full symmetry).
    """
    if not isinstance(i, (int, np.integer)) or not isinstance(j, (int, np.integer)):
        raise IndexError("variable indices must be integers")
    return cov_pairs(model, i, j, h, u)


def mixture_density_matern(xi, r, nu):
    """Mixing density m_M(xi; r, nu) of the Matern kernel over exp(-h^2 xi).

    m_M(xi) = (r^2/4)^nu * xi^(-1-nu) / Gamma(nu) * exp(-r^2/(4 xi));
    integrates to 1 over (0, inf).
    """
    xi = np.asarray(xi, dtype=float)
    if np.any(xi <= 0):
        raise ValueError("mixture_density_matern requires xi > 0")
    if r <= 0 or nu <= 0:
        raise ValueError("mixture_density_matern requires r > 0 and nu > 0")
    log_d = (nu * np.log(r * r / 4.0) - (1.0 + nu) * np.log(xi)
             - log_gamma(nu) - r * r / (4.0 * xi))
    out = np.exp(log_d)
    return out[()] if np.ndim(out) == 0 else out


def mixture_density_cauchy(xi, r, nu):
    """Mixing density m_C(xi; r, nu) of the Cauchy kernel over exp(-h^lambda xi).

    m_C(xi) = r^(-nu) * xi^(nu-1) / Gamma(nu) * exp(-xi/r): a Gamma(nu, r)
    density, whose Laplace transform at s = h^lambda is (1 + r h^lambda)^(-nu).
    """
    xi = np.asarray(xi, dtype=float)
    if np.any(xi <= 0):
        raise ValueError("mixture_density_cauchy requires xi > 0")
    if r <= 0 or nu <= 0:
        raise ValueError("mixture_density_cauchy requires r > 0 and nu > 0")
    log_d = -nu * np.log(r) + (nu - 1.0) * np.log(xi) - log_gamma(nu) - xi / r
    out = np.exp(log_d)
    return out[()] if np.ndim(out) == 0 else out


def _check_finite(name, value, report):
    if not np.all(np.isfinite(value)):
        report.violations.append(f"{name} is not finite")
        return False
    return True


def validate(model: ModelSpec) -> ValidityReport:
    """Check every validity condition of the model; never raises.

    A model is accepted iff all parameter domains hold, beta is a genuine
    correlation matrix (symmetric, unit diagonal, smallest eigenvalue
    >= -1e-10 * p), and tau >= b*d/2.
    """
    rep = ValidityReport()
    if model.p < 1:
        rep.violations.append("p must be >= 1")
    if model.d < 1:
        rep.violations.append("d must be >= 1")
    for k, m in enumerate(model.marginals):
        if _check_finite(f"marginal {k}", [m.sigma, m.nu, m.r], rep):
            if m.sigma <= 0:
                rep.violations.append(f"sigma[{k}] must be > 0")
            if m.nu <= 0:
                rep.violations.append(f"nu[{k}] must be > 0")
            if m.r <= 0:
                rep.violations.append(f"r[{k}] must be > 0")
    beta = model.beta
    if _check_finite("beta", beta, rep):
        beta_basic_ok = True
        if np.max(np.abs(beta - beta.T)) > 1e-12:
            rep.violations.append("beta must be symmetric")
            beta_basic_ok = False
        if np.any(np.abs(np.diag(beta) - 1.0) > 1e-12):
            rep.violations.append("beta must have unit diagonal")
            beta_basic_ok = False
        if np.any(np.abs(beta) > 1.0 + 1e-12):
            rep.violations.append("beta entries must lie in [-1, 1]")
            beta_basic_ok = False
        if beta_basic_ok:
            eigmin = float(np.linalg.eigvalsh((beta + beta.T) / 2.0).min())
            if eigmin < -1e-10 * model.p:
                rep.violations.append(
                    f"beta is not positive semi-definite (min eigenvalue {eigmin:.3e})")
    t = model.temporal
    if _check_finite("temporal parameters", [t.alpha, t.a, t.b, t.tau], rep):
        if t.alpha <= 0:
            rep.violations.append("alpha must be > 0")
        if not 0 < t.a <= 1:
            rep.violations.append("a must be in (0, 1]")
        if not 0 <= t.b <= 1:
            rep.violations.append("b must be in [0, 1]")
        if t.tau <= 0:
            rep.violations.append("tau must be > 0")
        bound = t.b * model.d / 2.0
        if t.tau < bound - 1e-15:
            rep.violations.append(f"tau = {t.tau} violates tau >= b*d/2 = {bound}")
    if model.family is Family.CAUCHY:
        if model.lam is None:
            rep.violations.append("lambda is required for the Cauchy family")
        elif not np.isfinite(model.lam) or not 0 < model.lam <= 2:
            rep.violations.append("lambda must be in (0, 2]")
    return rep
