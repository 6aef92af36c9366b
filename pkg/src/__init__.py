"""
occ-forge

Numerical core of a LiDAR-camera semantic occupancy pipeline: projection
geometry, semantic/depth-guided view transformation, neighborhood-attention
BEV fusion, occupancy-driven distillation weighting, occupancy decoding and
evaluation on procedurally generated scenes.
"""

__version__ = "0.1.0"
