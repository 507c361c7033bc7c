"""Robust self-training for domain-adaptive object detection, at desk scale.

A source-trained detector mines noisy boxes on an unlabeled target domain;
an auxiliary crop classifier rescores them; the detector is then retrained
with class and box targets given by closed-form KL-regularized fusion of
the noisy annotations with the live model's predictions.
"""

__version__ = "0.1.0"

from .fusion import (
    AlphaSchedule,
    BoundingBox,
    CategoricalDistribution,
    GaussianBox,
    fuse_box,
    fuse_categorical,
    kl_categorical,
    softened_one_hot,
)
from .pipeline import PipelineConfig, run_experiment
from .world import WorldConfig, generate_dataset

__all__ = [
    "AlphaSchedule",
    "BoundingBox",
    "CategoricalDistribution",
    "GaussianBox",
    "PipelineConfig",
    "WorldConfig",
    "fuse_box",
    "fuse_categorical",
    "generate_dataset",
    "kl_categorical",
    "run_experiment",
    "softened_one_hot",
    "__version__",
]
