"""Classifiers behind one train/predict contract."""

from .base import (ModelKind, TrainedModel, get_kind, load_model, model_from_bytes, model_kinds,
                   predict_probs, register_model, resolve_hyper, save_model, train)
from . import forest, nn  # noqa: F401  (registers rf, mlp, tempcnn)


def train_random_forest(t, hyper=None, seed=0) -> TrainedModel:
    return train(t, "rf", hyper, seed)


def train_mlp(t, hyper=None, seed=0) -> TrainedModel:
    return train(t, "mlp", hyper, seed)


def train_tempcnn(t, hyper=None, seed=0) -> TrainedModel:
    return train(t, "tempcnn", hyper, seed)


__all__ = ["ModelKind", "TrainedModel", "get_kind", "load_model", "model_from_bytes",
           "model_kinds", "predict_probs", "register_model", "resolve_hyper", "save_model",
           "train", "train_random_forest", "train_mlp", "train_tempcnn"]
