from .camera import CameraParams, default_camera, intrinsics_matrix, look_along, make_trajectory
from .dataset import Sample, generate_dataset, generate_sample, read_dataset, write_dataset
from .render import render
from .scene import (
    NUM_CLASSES,
    VOCAB_SIZE,
    OccupancyGrid,
    SceneSpec,
    decode,
    encode,
    generate_placeable,
    generate_scene,
    random_spec,
)

__all__ = [
    "CameraParams",
    "NUM_CLASSES",
    "OccupancyGrid",
    "Sample",
    "SceneSpec",
    "VOCAB_SIZE",
    "decode",
    "default_camera",
    "encode",
    "generate_dataset",
    "generate_placeable",
    "generate_sample",
    "generate_scene",
    "intrinsics_matrix",
    "look_along",
    "make_trajectory",
    "random_spec",
    "read_dataset",
    "render",
    "write_dataset",
]
