"""Two-stage disentangled person image generation at desk scale.

Stage I learns to reconstruct a person image from three factor embeddings
(foreground, background, pose).  Stage II learns to map Gaussian noise onto
each embedding distribution so that new images can be sampled, manipulated
and interpolated.
"""

from .core import (NUM_KEYPOINTS, NUM_ROIS, POSE_VECTOR_DIM, ConfigError, FactorEmbedding,
                   FactorKind, PipelineConfig, PoseAnnotation, load_config, pose_to_vector,
                   validate_config, vector_to_pose)

__version__ = "0.1.0"

__all__ = [
    "NUM_KEYPOINTS", "NUM_ROIS", "POSE_VECTOR_DIM", "ConfigError", "FactorEmbedding", "FactorKind",
    "PipelineConfig", "PoseAnnotation", "load_config", "pose_to_vector", "validate_config",
    "vector_to_pose",
]
