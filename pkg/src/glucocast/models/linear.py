"""Persistence and ridge-regression baselines."""

from __future__ import annotations

import numpy as np

from ..series import SupervisedSet
from .base import PersistenceSpec, RegressionModel, RidgeSpec, Standardizer, glucose_lag1_index


class PersistenceModel(RegressionModel):
    """Predicts the most recent glucose sample (the lag-1 column) at any horizon."""

    def __init__(self, spec, columns, horizon_steps, step_s):
        self.spec = spec
        self.columns = tuple(columns)
        self.horizon_steps = horizon_steps
        self.step_s = step_s
        self.index = glucose_lag1_index(self.columns)

    def predict_batch(self, X):
        return np.asarray(X, dtype=np.float64)[:, self.index].copy()


def fit_persistence(spec: PersistenceSpec, train: SupervisedSet) -> PersistenceModel:
    return PersistenceModel(spec, train.columns, train.horizon_steps, train.step_s)


class RidgeModel(RegressionModel):
    def __init__(self, spec, columns, horizon_steps, step_s, scaler, coef_std, y_mean):
        self.spec = spec
        self.columns = tuple(columns)
        self.horizon_steps = horizon_steps
        self.step_s = step_s
        self.scaler = scaler
        self.coef_std = np.asarray(coef_std, dtype=np.float64)
        self.y_mean = float(y_mean)

    @property
    def coef(self) -> np.ndarray:
        """Weights in raw feature units."""
        return self.coef_std / self.scaler.scale

    @property
    def intercept(self) -> float:
        return self.y_mean - float(self.coef @ self.scaler.mean)

    def predict_batch(self, X):
        return self.scaler.transform(X) @ self.coef_std + self.y_mean


def ridge_solve(Z: np.ndarray, yc: np.ndarray, lam: float) -> np.ndarray:
    """Solve ``(Z'Z + lam I) w = Z'yc``; ``lam = 0`` requires full column rank."""
    p = Z.shape[1]
    A = Z.T @ Z
    if lam == 0:
        if np.linalg.matrix_rank(A) < p:
            raise np.linalg.LinAlgError("design matrix is rank deficient; use lam > 0")
    else:
        A = A + lam * np.eye(p)
    return np.linalg.solve(A, Z.T @ yc)


def fit_ridge(spec: RidgeSpec, train: SupervisedSet) -> RidgeModel:
    scaler = Standardizer.fit(train.X)
    Z = scaler.transform(train.X)
    y_mean = train.y.mean()
    w = ridge_solve(Z, train.y - y_mean, spec.lam)
    return RidgeModel(spec, train.columns, train.horizon_steps, train.step_s, scaler, w, y_mean)
