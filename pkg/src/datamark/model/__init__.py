from datamark.model.base import Classifier
from datamark.model.mocks import MockClassifier, MockSpec, make_mock
from datamark.model.network import (
    Architecture,
    MiniNetClassifier,
    MiniNetParams,
    TrainConfig,
    gradient_check,
    predict_posterior,
    train,
)
from datamark.model.remote import RemoteClassifier, query_remote

__all__ = [
    "Architecture",
    "Classifier",
    "MiniNetClassifier",
    "MiniNetParams",
    "MockClassifier",
    "MockSpec",
    "RemoteClassifier",
    "TrainConfig",
    "gradient_check",
    "make_mock",
    "predict_posterior",
    "query_remote",
    "train",
]
