"""Mesh, image and rig serialization plus the procedural test assets."""

from .imageio import ImageFormatError, load_image, save_image
from .meshio import load_mesh, save_mesh, sidecar_path
from .minirig import JOINT_NAMES, N_EXPR, N_SHAPE, make_mini_rig
from .synthetic import SyntheticSubject, load_subject, make_synthetic_subject, save_subject

__all__ = [
    "ImageFormatError", "JOINT_NAMES", "N_EXPR", "N_SHAPE", "load_image", "load_mesh",
    "make_mini_rig", "save_image", "save_mesh", "sidecar_path",
    "SyntheticSubject", "load_subject", "make_synthetic_subject", "save_subject",
]
