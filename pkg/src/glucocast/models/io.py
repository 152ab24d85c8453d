"""Versioned JSON documents for trained models."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..series import LagFeature
from .arima import ArimaModel
from .base import Standardizer, spec_from_dict, spec_to_dict
from .forest import ForestModel, Tree
from .linear import PersistenceModel, RidgeModel
from .svr import SVRModel

FORMAT = "glucocast-model"
VERSION = 1


def _cols(columns):
    return [[c.variable.value, c.lag_steps] for c in columns]


def _scaler(s: Standardizer):
    return {"mean": s.mean.tolist(), "scale": s.scale.tolist()}


def model_to_dict(model) -> dict:
    doc = {"format": FORMAT, "version": VERSION, "spec": spec_to_dict(model.spec)}
    if isinstance(model, ArimaModel):
        doc["params"] = {"p": model.p, "d": model.d, "q": model.q, "intercept": model.intercept,
                         "ar": model.ar.tolist(), "ma": model.ma.tolist(), "sigma2": model.sigma2,
                         "n_obs": model.n_obs, "css": model.css, "step_s": model.step_s}
        return doc
    doc.update(columns=_cols(model.columns), horizon_steps=model.horizon_steps, step_s=model.step_s)
    if isinstance(model, PersistenceModel):
        doc["params"] = {}
    elif isinstance(model, RidgeModel):
        doc["params"] = {"scaler": _scaler(model.scaler), "coef_std": model.coef_std.tolist(),
                         "y_mean": model.y_mean}
    elif isinstance(model, ForestModel):
        doc["params"] = {"trees": [[t.feature.tolist(), t.threshold.tolist(), t.left.tolist(),
                                    t.right.tolist(), t.value.tolist()] for t in model.trees]}
    elif isinstance(model, SVRModel):
        doc["params"] = {"x_scaler": _scaler(model.x_scaler), "y_mean": model.y_mean, "y_scale": model.y_scale,
                         "support_vectors": model.support_vectors.tolist(), "dual_coef": model.dual_coef.tolist(),
                         "bias": model.bias, "gamma": model.gamma}
    else:
        raise TypeError(f"cannot serialise {type(model).__name__}")
    return doc


def model_from_dict(doc: dict):
    if doc.get("format") != FORMAT:
        raise ValueError("not a glucocast model document")
    if doc.get("version") != VERSION:
        raise ValueError(f"model document version {doc.get('version')} != supported version {VERSION}")
    spec = spec_from_dict(doc["spec"])
    p = doc["params"]
    if spec.kind == "arima":
        return ArimaModel(p["p"], p["d"], p["q"], p["intercept"], p["ar"], p["ma"], p["sigma2"],
                          p["n_obs"], p["css"], spec, p.get("step_s"))
    columns = tuple(LagFeature(v, k) for v, k in doc["columns"])
    head = (spec, columns, doc["horizon_steps"], doc["step_s"])
    sc = lambda d: Standardizer(np.asarray(d["mean"]), np.asarray(d["scale"]))
    if spec.kind == "persistence":
        return PersistenceModel(*head)
    if spec.kind == "ridge":
        return RidgeModel(*head, sc(p["scaler"]), p["coef_std"], p["y_mean"])
    if spec.kind == "rf":
        return ForestModel(*head, [Tree(*t) for t in p["trees"]])
    if spec.kind == "svr":
        return SVRModel(*head, sc(p["x_scaler"]), p["y_mean"], p["y_scale"], p["support_vectors"],
                        p["dual_coef"], p["bias"], p["gamma"])
    raise ValueError(f"unknown model kind {spec.kind!r}")


def save_model(model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text()))
