"""Scikit-learn style facade over the fit/predict/score pipeline.

SpaceTimeModel holds configuration in its constructor (so it clones and grid
searches like any other estimator), learns a covariance model from a Dataset
in fit, and produces day-ahead predictions and proper scores for held-out
sites. It wraps the functional API in `estimate` and `predict`; use those
directly for anything the facade does not expose.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator

from .estimate import Dataset, Window, fit as _fit
from .predict import Prediction, ScoreTable, rolling_predict, score as _score

__all__ = ["SpaceTimeModel"]


class SpaceTimeModel(BaseEstimator):
    """Windowed pairwise likelihood estimator with Gaussian conditional
    prediction.

    Parameters mirror `estimate.fit`: the model variant, the covariance
    family, the pair inclusion window (d_s_km, d_t_days), the profiled
    interaction grid, and optimizer controls. target_site_ids names the
    held-out sites predict() scores; q_days is the conditioning depth.

    Attributes set by fit: model_ (the fitted covariance model), report_
    (the full FitReport).
    """

    def __init__(self, variant: str = "NS-D", family: str = "gneiting-matern",
                 d_s_km: float = 500.0, d_t_days: float = 2.0,
                 objective: str = "wpl", b_grid=None, fit_tau: bool = False,
                 composite: bool = False, standardize: bool = False,
                 target_site_ids=None, q_days: int = 2, max_outer: int = 25,
                 outer_tol: float = 1.0, block_maxiter: int = 50,
                 grad_step: float = 1e-6, threads: int = 1):
        self.variant = variant
        self.family = family
        self.d_s_km = d_s_km
        self.d_t_days = d_t_days
        self.objective = objective
        self.b_grid = b_grid
        self.fit_tau = fit_tau
        self.composite = composite
        self.standardize = standardize
        self.target_site_ids = target_site_ids
        self.q_days = q_days
        self.max_outer = max_outer
        self.outer_tol = outer_tol
        self.block_maxiter = block_maxiter
        self.grad_step = grad_step
        self.threads = threads

    def _window(self) -> Window:
        return Window(d_s=float(self.d_s_km), d_t=float(self.d_t_days))

    def fit(self, X: Dataset, y=None) -> "SpaceTimeModel":
        """Estimate the covariance model from a Dataset. y is ignored."""
        if not isinstance(X, Dataset):
            raise TypeError("X must be a Dataset (see Dataset.from_csv / "
                            "Dataset.from_replicates)")
        report = _fit(
            X, self._window(), variant=self.variant, family=self.family,
            objective=self.objective, b_grid=self.b_grid,
            fit_tau=self.fit_tau, composite=self.composite,
            standardize_data=self.standardize, max_outer=self.max_outer,
            outer_tol=self.outer_tol, block_maxiter=self.block_maxiter,
            grad_step=self.grad_step, threads=self.threads)
        self.report_ = report
        self.model_ = report.model
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this estimator is not fitted yet; call fit first")

    def predict(self, X: Dataset) -> Prediction:
        """Day-ahead conditional predictions at target_site_ids on new data."""
        self._check_fitted()
        if self.target_site_ids is None:
            raise ValueError("set target_site_ids to use predict()")
        return rolling_predict(self.model_, X, self.target_site_ids,
                               q_days=self.q_days)

    def score_table(self, X: Dataset) -> ScoreTable:
        """All proper scores of the day-ahead predictions on X."""
        return _score(self.predict(X))

    def score(self, X: Dataset, y=None) -> float:
        """Negative CRPS (greater is better, as scikit-learn expects)."""
        return -self.score_table(X).crps
