"""Exact Gaussian simulation of the space-time models via Cholesky factorization.

Replicates are generated as L z with L the (jittered, if necessary) Cholesky
factor of the assembled covariance matrix and z i.i.d. standard normal draws
from a counter-based Philox generator. Replicate k is drawn from the stream
keyed by (seed, k), so it is reproducible independently of n_reps and of any
parallel execution order. Philox is numpy's counter-based 4x64 generator
(crush-resistant per the numpy documentation); the 128-bit key spaces the
replicate streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as _sla

from .covmodel import PointSet, SiteTable, assemble_sigma

__all__ = [
    "JitterPolicy",
    "NotPositiveDefiniteError",
    "SimulationRequest",
    "SimulationResult",
    "chol_pd",
    "simulate",
]


class NotPositiveDefiniteError(RuntimeError):
    """Cholesky failed at every rung of the jitter ladder."""


@dataclass(frozen=True)
class JitterPolicy:
    """Diagonal jitter ladder: 0, then initial_rel * mean(diag), growing by
    `growth` per retry, at most `max_retries` retries after the clean attempt."""

    initial_rel: float = 1e-10
    growth: float = 10.0
    max_retries: int = 4

    def ladder(self, mean_diag: float):
        ref = mean_diag if mean_diag > 0 and np.isfinite(mean_diag) else 1.0
        yield 0.0
        eps = self.initial_rel * ref
        for _ in range(self.max_retries):
            yield eps
            eps *= self.growth


def chol_pd(sigma: np.ndarray, policy: JitterPolicy | None = None):
    """Lower Cholesky factor of sigma + eps*I for the smallest workable eps.

    Returns (L, eps_used). Raises NotPositiveDefiniteError when the whole
    ladder fails, and ValueError for non-symmetric input.
    """
    policy = policy or JitterPolicy()
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError(f"sigma must be square, got shape {sigma.shape}")
    scale = max(1.0, float(np.max(np.abs(sigma))) if sigma.size else 1.0)
    if sigma.size and float(np.max(np.abs(sigma - sigma.T))) > 1e-8 * scale:
        raise ValueError("sigma must be symmetric")
    mean_diag = float(np.mean(np.diag(sigma))) if sigma.size else 1.0
    last_eps = 0.0
    for eps in policy.ladder(mean_diag):
        last_eps = eps
        try:
            target = sigma if eps == 0.0 else sigma + eps * np.eye(sigma.shape[0])
            return _sla.cholesky(target, lower=True), eps
        except _sla.LinAlgError:
            continue
    raise NotPositiveDefiniteError(
        f"Cholesky failed for a {sigma.shape[0]}x{sigma.shape[0]} matrix even "
        f"with jitter {last_eps:.3e}")


@dataclass(frozen=True)
class SimulationRequest:
    """Everything needed to draw replicates of a model on a design."""

    model: object
    pts: PointSet
    sites: SiteTable
    n_reps: int
    seed: int
    jitter: JitterPolicy = field(default_factory=JitterPolicy)

    def __post_init__(self):
        if self.n_reps < 1:
            raise ValueError("n_reps must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")


@dataclass(frozen=True)
class SimulationResult:
    """Replicate array plus the jitter actually used."""

    values: np.ndarray  # (n_reps, n_points)
    eps: float
    seed: int


def _replicate_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, k]))


def simulate(req: SimulationRequest) -> SimulationResult:
    """Draw n_reps exact replicates of the model on the request's point set."""
    sigma = assemble_sigma(req.model, req.pts, req.sites)
    lower, eps = chol_pd(sigma, req.jitter)
    n = len(req.pts)
    values = np.empty((req.n_reps, n))
    for k in range(req.n_reps):
        z = _replicate_rng(int(req.seed), k).standard_normal(n)
        values[k] = lower @ z
    return SimulationResult(values=values, eps=eps, seed=int(req.seed))
