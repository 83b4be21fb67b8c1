"""skelmesh: skeleton-bridged surface mesh generation at desk scale.

Pipeline stages: silhouette image -> labeled skeleton points (parallel
line/square primitive decoders) -> refined occupancy volume (global-guided
sub-volume synthesis with image-guided correction) -> base mesh (Marching
Cubes + QEM) -> detail-refined mesh (graph-conv deformation).
"""

__version__ = "0.1.0"
