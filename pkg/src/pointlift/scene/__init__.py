from .cloud import EPS_BOX, BoundingBox, PointCloud, bounding_box
from .ply import load_cloud, write_cloud
from .synth import (
    CLASS_ORDER,
    Building,
    SceneSpec,
    Strip,
    Tree,
    Vehicle,
    demo_town,
    generate_scene,
    rare_strip_town,
    scene_areas,
)

__all__ = [
    "EPS_BOX",
    "BoundingBox",
    "PointCloud",
    "bounding_box",
    "load_cloud",
    "write_cloud",
    "CLASS_ORDER",
    "Building",
    "SceneSpec",
    "Strip",
    "Tree",
    "Vehicle",
    "demo_town",
    "generate_scene",
    "rare_strip_town",
    "scene_areas",
]
