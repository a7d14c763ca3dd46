"""Input validation helpers in the scikit-learn style."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .assets import SyntheticSubject, load_subject
from .headmodel import PoseParams, check_params
from .mesh import RiggedMesh, validate_mesh


def check_image(image, resolution: int | None = None, name: str = "image") -> np.ndarray:
    """Float64 ``H x W x 3`` array with finite values in [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[..., :3]
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name} must be H x W x 3, got shape {arr.shape}")
    if arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} must be square, got {arr.shape[0]}x{arr.shape[1]}")
    if resolution is not None and arr.shape[0] != resolution:
        raise ValueError(f"{name} must be {resolution}x{resolution}, got {arr.shape[0]}x{arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_subject(X) -> SyntheticSubject:
    """Accept a subject or a path to a subject bundle."""
    if isinstance(X, (str, Path)):
        return load_subject(X)
    if not isinstance(X, SyntheticSubject):
        raise TypeError(f"expected a SyntheticSubject or a bundle path, got {type(X).__name__}")
    return X.validate()


def check_inference_input(X, resolution: int):
    """Normalise ``X`` to ``(image, params, rig)``.

    ``X`` is a subject (its input image, pose and rig are used) or a tuple
    ``(image, params, rig)``.
    """
    if isinstance(X, (SyntheticSubject, str, Path)):
        s = check_subject(X)
        X = (s.input_image, s.pose_params, s.rig)
    if not isinstance(X, tuple) or len(X) != 3:
        raise TypeError("expected a subject or an (image, params, rig) tuple")
    image, params, rig = X
    if not isinstance(params, PoseParams):
        raise TypeError(f"params must be PoseParams, got {type(params).__name__}")
    if not isinstance(rig, RiggedMesh):
        raise TypeError(f"rig must be a RiggedMesh, got {type(rig).__name__}")
    validate_mesh(rig)
    check_params(rig, params)
    return check_image(image, resolution), params, rig
