"""Glucose forecasters: persistence, ridge, ARIMA, random forest and epsilon-SVR.

Regression kinds are fitted on a :class:`~glucocast.series.SupervisedSet` and
predict glucose ``horizon_steps`` after each row's origin directly. ARIMA is
fitted on the glucose series itself and forecasts recursively.
"""

from __future__ import annotations

import numpy as np

from ..series import SupervisedSet
from .arima import ArimaModel, fit_arima, select_arima
from .base import (
    ArimaSpec,
    ColumnMismatchError,
    ConvergenceError,
    Forecast,
    ForecasterSpec,
    PersistenceSpec,
    RegressionModel,
    RFSpec,
    RidgeSpec,
    SVRSpec,
    check_columns,
    parse_spec,
    spec_from_dict,
    spec_to_dict,
)
from .forest import ForestModel, fit_forest
from .io import load_model, model_from_dict, model_to_dict, save_model
from .linear import PersistenceModel, RidgeModel, fit_persistence, fit_ridge
from .svr import SVRModel, fit_svr

TrainedModel = RegressionModel | ArimaModel

_FITTERS = {
    "persistence": fit_persistence,
    "ridge": fit_ridge,
    "rf": fit_forest,
    "svr": fit_svr,
}


def fit(spec: ForecasterSpec, train: SupervisedSet) -> RegressionModel:
    """Fit a regression-kind forecaster (persistence, ridge, rf, svr)."""
    if spec.kind == "arima":
        raise TypeError("ARIMA is fitted on a glucose series; use fit_arima or select_arima")
    if len(train) == 0:
        raise ValueError("empty training set")
    return _FITTERS[spec.kind](spec, train)


def predict(model: TrainedModel, row_or_history, origin_time: int | None = None,
            steps: int | None = None) -> Forecast:
    """One forecast.

    Regression models take a feature row (array in column order, or a mapping
    ``LagFeature -> value``) and predict ``horizon_steps`` after the origin.
    ARIMA takes a glucose history ending at the last observed sample and
    forecasts ``steps`` samples ahead.
    """
    if isinstance(model, ArimaModel):
        if steps is None:
            raise ValueError("ARIMA prediction needs the number of steps ahead")
        value = model.predict(row_or_history, steps)
        target = None
        if origin_time is not None and model.step_s:
            target = origin_time + steps * model.step_s
        return Forecast(value, target)
    value = model.predict_one(row_or_history)
    target = None if origin_time is None else origin_time + model.horizon_steps * model.step_s
    return Forecast(value, target)


def predict_set(model: RegressionModel, data: SupervisedSet) -> np.ndarray:
    check_columns(model, data)
    return model.predict_batch(data.X)


__all__ = [
    "ArimaModel", "ArimaSpec", "ColumnMismatchError", "ConvergenceError", "Forecast", "ForecasterSpec",
    "ForestModel", "PersistenceModel", "PersistenceSpec", "RFSpec", "RegressionModel", "RidgeModel",
    "RidgeSpec", "SVRModel", "SVRSpec", "TrainedModel", "fit", "fit_arima", "fit_forest", "fit_persistence",
    "fit_ridge", "fit_svr", "load_model", "model_from_dict", "model_to_dict", "parse_spec", "predict",
    "predict_set", "save_model", "select_arima", "spec_from_dict", "spec_to_dict",
]
