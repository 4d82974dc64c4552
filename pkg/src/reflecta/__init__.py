"""Reflective-registration symmetry features for brain lesion segmentation.

The pipeline: register a brain volume to its own left-right reflection
(affine or nonlinear, no template), derive a per-voxel mirror map, build
Symmetry Difference Images, and feed them as extra channels to a fully
convolutional patch CNN. A synthetic phantom generator with exact
ground-truth mirror maps verifies every stage at desk scale.
"""

__version__ = "0.1.0"

from .volume import MultiModalImage, Volume3D, load_nifti, reflect_x, sample_trilinear, save_nifti, standardize

__all__ = [
    "MultiModalImage",
    "Volume3D",
    "load_nifti",
    "reflect_x",
    "sample_trilinear",
    "save_nifti",
    "standardize",
]
