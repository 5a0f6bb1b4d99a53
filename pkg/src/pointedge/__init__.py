"""Point-cloud semantic segmentation with interacting point and edge branches.

Subpackages by concern:

- ``geom``: point clouds, synthetic scenes, blocks, FPS and exact kNN
- ``graph``: per-layer kNN graphs and their hierarchical construction
- ``autodiff``: a small reverse-mode autodiff engine on numpy
- ``edge_branch`` / ``point_branch``: the two network branches
- ``losses``: losses, confusion matrices and metrics
- ``config`` / ``pipeline`` / ``cli``: experiments
"""

__version__ = "0.1.0"
