"""pointlift: open-vocabulary point cloud segmentation from rendered views.

The pipeline renders a raw colored point cloud from generated virtual
viewpoints, lifts per-mask vision-language features back onto 3D points with
occlusion-aware depth validation and sample-balanced multi-view fusion,
distills them into a voxel feature field, and labels every point by cosine
similarity against text embeddings.
"""

__version__ = "0.1.0"
