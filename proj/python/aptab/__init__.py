"""Tabular prior-fitted network with adversarial data agents."""

from ._core import (
    Model,
    load_train_config,
    predict,
    pretrain,
    roc_auc_ovo,
    sample_dataset,
)

__all__ = [
    "Model",
    "load_train_config",
    "predict",
    "pretrain",
    "roc_auc_ovo",
    "sample_dataset",
]
