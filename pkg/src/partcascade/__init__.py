"""Cascaded part-level diffusion over sets of 3D Gaussian parts.

Shapes are unordered sets of (extrinsic, intrinsic) part pairs. Phase 1
diffuses the 16-dim extrinsic vectors (Gaussian center, eigenvalues,
eigenvector frame, mixture weight); phase 2 diffuses the intrinsic latent
codes conditioned on the clean extrinsics. A procedural chair/table world
with an analytic occupancy decoder stands in for learned shape data, making
every pipeline stage checkable against closed forms.
"""

__version__ = "0.1.0"
