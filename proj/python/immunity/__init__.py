"""Mixture-of-experts classifier with Grad-CAM interpretability regularizers."""

from ._immunity import (
    HEATMAP_FLOOR,
    ConfigError,
    Dataset,
    Error,
    FormatError,
    MoEModel,
    NumericError,
    ShapeError,
    TrainConfig,
    attack,
    center_of_mass,
    cscore,
    dataset_from_bytes,
    evaluate,
    iscore,
    load_cifar,
    load_dataset,
    load_model,
    loss_mi,
    loss_ps,
    model_from_bytes,
    mutual_information,
    report,
    synth_shapes,
    train,
    verify_mi,
)

__all__ = [name for name in dir() if not name.startswith("_")]
