"""Point cloud registration with a serialized state-space / cross-attention encoder."""

from .errors import RegistrationError
from .estimator import weighted_procrustes, weighted_svd
from .geom import PointCloud, RegistrationMetrics, RigidTransform, metrics, registration_recall
from .io_data import read_points, synth_pair, synth_preset, write_points
from .matching import CorrespondenceSet, KeypointSet, MatchMatrix
from .pipeline import ModelConfig, init_model, register_pair, toy_config, train_toy
from .serialize import SerialCode, serialize

__all__ = [
    "CorrespondenceSet", "KeypointSet", "MatchMatrix", "ModelConfig", "PointCloud",
    "RegistrationError", "RegistrationMetrics", "RigidTransform", "SerialCode",
    "init_model", "read_points", "register_pair", "metrics", "registration_recall", "serialize",
    "synth_pair", "synth_preset", "toy_config", "train_toy", "weighted_procrustes",
    "weighted_svd", "write_points",
]
