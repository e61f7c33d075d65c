"""Conditional Gaussian prediction and proper scoring.

Day-ahead prediction conditions each target day's values at held-out sites
on the previous q days at every site plus the same day at the non-target
sites. Under a stationary model on a regular day grid that conditioning
pattern is identical for every target day, so the weight matrix, the
conditional covariance, and the conditional standard deviations are computed
once per dataset and reused across days and replicates.

Scores follow fixed conventions: the squared-error family averages over
target cells, the continuous ranked probability score uses the closed form
for a normal predictive distribution, and the two log scores drop their
additive 2-pi constants. The log scores therefore order models correctly but
are not absolute log densities; do not compare them against textbook values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import linalg as _sla

from .covmodel import (
    PointSet,
    SiteTable,
    assemble_sigma,
    model_variances,
    pair_cov,
)
from .estimate import Dataset
from .simulate import JitterPolicy, chol_pd
from .specialfn import std_normal_cdf, std_normal_pdf

__all__ = [
    "Prediction",
    "PredictiveDistribution",
    "ScoreTable",
    "conditional",
    "crps_normal",
    "rolling_predict",
    "score",
]


@dataclass(frozen=True, eq=False)
class PredictiveDistribution:
    """Gaussian conditional law of the target coordinates.

    mean has the leading shape of the conditioning values (one row per
    replicate, or a bare vector for 1-d input); cov and sd are shared by all
    replicates because they do not depend on the observed values.
    """

    mean: np.ndarray
    cov: np.ndarray
    sd: np.ndarray


def conditional(model, sites: SiteTable, target: PointSet, given: PointSet,
                z_given: np.ndarray,
                jitter: JitterPolicy | None = None) -> PredictiveDistribution:
    """Condition target points on observed values at other points.

    z_given may be 1-d (one replicate) or 2-d (n_reps, n_given). The
    conditioning covariance gets the diagonal jitter ladder if needed;
    failure beyond the ladder raises NotPositiveDefiniteError. Negative
    conditional variances from roundoff clamp to zero. Duplicating a
    conditioning point as a target reproduces its value with zero sd, so the
    predictor interpolates.
    """
    z_given = np.asarray(z_given, dtype=float)
    squeeze = z_given.ndim == 1
    if squeeze:
        z_given = z_given[None, :]
    if z_given.shape[1] != len(given):
        raise ValueError(
            f"z_given has {z_given.shape[1]} columns but the conditioning set "
            f"has {len(given)} points")
    dmat = sites.distance_matrix()
    s_gg = assemble_sigma(model, given, sites)
    # cross and target blocks built directly so a target may coincide with a
    # conditioning point (that is what makes the predictor interpolate)
    s_gt = pair_cov(model,
                    given.var[:, None], target.var[None, :],
                    dmat[given.site[:, None], target.site[None, :]],
                    given.day[:, None] - target.day[None, :])
    s_tt = pair_cov(model,
                    target.var[:, None], target.var[None, :],
                    dmat[target.site[:, None], target.site[None, :]],
                    target.day[:, None] - target.day[None, :])
    lower, _ = chol_pd(s_gg, jitter or JitterPolicy())
    half = _sla.solve_triangular(lower, s_gt, lower=True)
    weights = _sla.solve_triangular(lower.T, half, lower=False)
    mean = z_given @ weights
    cov = s_tt - half.T @ half
    cov = 0.5 * (cov + cov.T)
    sd = np.sqrt(np.maximum(np.diag(cov), 0.0))
    return PredictiveDistribution(mean=mean[0] if squeeze else mean,
                                  cov=cov, sd=sd)


@dataclass(frozen=True, eq=False)
class Prediction:
    """Day-ahead predictions at target sites.

    mean and obs have shape (n_reps, n_days_scored, n_targets, p). sd has
    shape (n_targets, p) and cov shape (n_targets*p, n_targets*p) because
    the conditioning pattern, hence the conditional law, is the same for
    every scored day. days lists the scored target days; skipped maps each
    dropped day to the reason it could not be scored.
    """

    target_sites: SiteTable
    var_names: tuple[str, ...]
    days: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    cov: np.ndarray
    obs: np.ndarray
    rep_ids: tuple[str, ...]
    q_days: int
    skipped: dict

    @property
    def n_targets(self) -> int:
        return int(self.sd.size)

    @property
    def empty(self) -> bool:
        return self.days.size == 0

    def to_frame(self) -> pd.DataFrame:
        """Long format: rep, t, site_id, variable, mean, sd, obs."""
        r, t, s, p = self.mean.shape
        sd_full = np.broadcast_to(self.sd[None, None], self.mean.shape)
        return pd.DataFrame({
            "rep": np.repeat(list(self.rep_ids), t * s * p),
            "t": np.tile(np.repeat(self.days, s * p), r),
            "site_id": np.tile(np.repeat(list(self.target_sites.ids), p), r * t),
            "variable": np.tile(list(self.var_names), r * t * s),
            "mean": self.mean.reshape(-1),
            "sd": sd_full.reshape(-1),
            "obs": self.obs.reshape(-1),
        })


def _conditioning_pattern(model, sites: SiteTable, p: int, t_idx: np.ndarray,
                          o_idx: np.ndarray, q: int,
                          jitter: JitterPolicy | None = None):
    """Weight matrix and conditional covariance of the day-ahead pattern:
    conditioning on all sites over the q previous days plus the non-target
    sites on the target day itself (relative day offsets -q..0)."""
    n_s = len(sites)
    rel_days = np.arange(-q, 0)
    g_site = np.concatenate([np.tile(np.repeat(np.arange(n_s), p), q),
                             np.repeat(o_idx, p)])
    g_rel = np.concatenate([np.repeat(rel_days, n_s * p),
                            np.zeros(o_idx.size * p, dtype=np.int64)])
    g_var = np.concatenate([np.tile(np.arange(p), q * n_s),
                            np.tile(np.arange(p), o_idx.size)])
    t_site = np.repeat(t_idx, p)
    t_rel = np.zeros(t_idx.size * p, dtype=np.int64)
    t_var = np.tile(np.arange(p), t_idx.size)
    joint = PointSet(site=np.concatenate([g_site, t_site]),
                     day=np.concatenate([g_rel, t_rel]),
                     var=np.concatenate([g_var, t_var]))
    sigma = assemble_sigma(model, joint, sites)
    n_g = g_site.size
    lower, _ = chol_pd(sigma[:n_g, :n_g], jitter or JitterPolicy())
    s_gt = sigma[:n_g, n_g:]
    half = _sla.solve_triangular(lower, s_gt, lower=True)
    weights = _sla.solve_triangular(lower.T, half, lower=False)
    s_cond = sigma[n_g:, n_g:] - half.T @ half
    s_cond = 0.5 * (s_cond + s_cond.T)
    return weights, s_cond


def rolling_predict(model, data: Dataset, target_site_ids,
                    q_days: int = 2) -> Prediction:
    """Predict each day at the target sites from the previous q_days days at
    all sites plus the same day at the non-target sites.

    A target day is scored only when the dataset contains all q_days
    immediately preceding consecutive days; other days are listed in
    `skipped` with a reason. When no day qualifies the result is empty
    (zero scored days), not an error.
    """
    if q_days < 1:
        raise ValueError("q_days must be at least 1")
    target_ids = [str(s) for s in target_site_ids]
    if not target_ids:
        raise ValueError("no target sites given")
    t_idx = np.asarray([data.sites.index(s) for s in target_ids], dtype=np.intp)
    o_idx = np.asarray([k for k in range(data.n_sites) if k not in set(t_idx)],
                       dtype=np.intp)
    if o_idx.size == 0:
        raise ValueError("every site is a target; nothing to condition on")

    days = data.days
    day_pos = {int(d): k for k, d in enumerate(days)}
    scored: list[int] = []
    skipped: dict[int, str] = {}
    for d in days:
        d = int(d)
        need = [d - q_days + k for k in range(q_days)]
        if all(n in day_pos for n in need):
            scored.append(d)
        else:
            skipped[d] = f"needs days {need[0]}..{need[-1]} in the data"

    p = data.p
    weights, s_cond = _conditioning_pattern(model, data.sites, p, t_idx, o_idx,
                                            q_days)
    sd = np.sqrt(np.maximum(np.diag(s_cond), 0.0)).reshape(t_idx.size, p)
    rel_days = np.arange(-q_days, 0)

    r = data.n_reps
    mean = np.empty((r, len(scored), t_idx.size, p))
    obs = np.empty_like(mean)
    for kd, d in enumerate(scored):
        lag_pos = [day_pos[d + int(o)] for o in rel_days]
        hist = data.values[:, lag_pos]  # (r, q, n_sites, p)
        same = data.values[:, day_pos[d]][:, o_idx]  # (r, n_other, p)
        z_given = np.concatenate([hist.reshape(r, -1), same.reshape(r, -1)],
                                 axis=1)
        mean[:, kd] = (z_given @ weights).reshape(r, t_idx.size, p)
        obs[:, kd] = data.values[:, day_pos[d]][:, t_idx]

    return Prediction(
        target_sites=data.sites.subset([data.sites.ids[k] for k in t_idx]),
        var_names=data.var_names,
        days=np.asarray(scored, dtype=np.int64),
        mean=mean, sd=sd, cov=s_cond, obs=obs, rep_ids=data.rep_ids,
        q_days=q_days, skipped=skipped)


def crps_normal(mean, sd, obs):
    """Continuous ranked probability score of a normal predictive
    distribution, elementwise. A zero sd degenerates to |obs - mean|."""
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    obs = np.asarray(obs, dtype=float)
    if np.any(sd < 0):
        raise ValueError("sd must be nonnegative")
    scalar = mean.ndim == 0 and sd.ndim == 0 and obs.ndim == 0
    mean, sd, obs = np.broadcast_arrays(
        np.atleast_1d(mean), np.atleast_1d(sd), np.atleast_1d(obs))
    out = np.abs(obs - mean).astype(float)
    pos = sd > 0
    if np.any(pos):
        zn = (obs[pos] - mean[pos]) / sd[pos]
        out[pos] = sd[pos] * (zn * (2.0 * std_normal_cdf(zn) - 1.0)
                              + 2.0 * std_normal_pdf(zn)
                              - 1.0 / math.sqrt(math.pi))
    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class ScoreTable:
    """Averaged prediction scores.

    logs1 is the marginal and logs6 the joint negative log density score;
    both omit their additive 2-pi constants, so they order models but are
    not absolute densities (logs6 of an exact identity-covariance forecast
    is 0). The name logs6 keeps the joint score's historical label from the
    two-site, three-variable setting; it applies to any target dimension.
    """

    rmse: float
    mae: float
    crps: float
    logs1: float
    logs6: float
    n_cells: int
    n_days: int

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "mae": self.mae, "crps": self.crps,
                "logs1": self.logs1, "logs6": self.logs6,
                "n_cells": self.n_cells, "n_days": self.n_days}


def score(pred: Prediction) -> ScoreTable:
    """Average proper scores of a Prediction (predictions and observations
    travel together in `pred`).

    RMSE and MAE average squared and absolute errors over every target cell
    (replicates, days, sites, variables); CRPS averages the closed-form
    normal score likewise. logs1 averages log(sd) + err^2/(2 sd^2) per cell.
    logs6 averages {log det S + (1/2) e' S^{-1} e} / m over replicates and
    days, with S the m-dimensional conditional covariance of one day's
    target vector. Raises on an empty prediction or a singular S.
    """
    if pred.empty:
        raise ValueError("prediction has no scored days; nothing to score "
                         f"(skipped: {pred.skipped})")
    err = pred.obs - pred.mean
    mse = float(np.mean(err**2))
    rmse = math.sqrt(mse)
    mae = float(np.mean(np.abs(err)))
    sd_full = np.broadcast_to(pred.sd[None, None], pred.mean.shape)
    crps = float(np.mean(crps_normal(pred.mean, sd_full, pred.obs)))

    if np.any(pred.sd <= 0):
        logs1 = math.inf
    else:
        logs1 = float(np.mean(np.log(sd_full) + err**2 / (2.0 * sd_full**2)))

    m = pred.n_targets
    try:
        factor = _sla.cho_factor(pred.cov, lower=True)
    except _sla.LinAlgError:
        raise ValueError(
            "conditional covariance of the target vector is singular; the "
            "joint log score is undefined") from None
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    flat = err.reshape(-1, m)
    solved = _sla.cho_solve(factor, flat.T)
    quad = np.sum(flat.T * solved, axis=0)
    logs6 = float(np.mean(logdet + 0.5 * quad)) / m

    return ScoreTable(rmse=rmse, mae=mae, crps=crps, logs1=logs1, logs6=logs6,
                      n_cells=int(err.size), n_days=int(pred.days.size))
