from .deform import (
    CameraEncoder,
    DeformableSampler,
    OccupancyEmbedding,
    cube_corner_offsets,
    deform_sample,
    encode_camera,
    grid_gather,
    occ_to_features,
    trilinear_gather,
)
from .encoders import AttentionMixer, EncoderBlock, GRUMixer, alt_encoder, make_mixer
from .module import MDA, mda_forward
from .ssm import SSM, BiMamba, SsmParams, linear_scan, ssm_scan, zoh_discretize, zoh_params
from .stack import PatchStacker, patch_stack, patchify, stack_layout, unpatchify

__all__ = [
    "AttentionMixer",
    "BiMamba",
    "CameraEncoder",
    "DeformableSampler",
    "EncoderBlock",
    "GRUMixer",
    "MDA",
    "OccupancyEmbedding",
    "PatchStacker",
    "SSM",
    "SsmParams",
    "alt_encoder",
    "cube_corner_offsets",
    "deform_sample",
    "encode_camera",
    "grid_gather",
    "linear_scan",
    "make_mixer",
    "mda_forward",
    "occ_to_features",
    "patch_stack",
    "patchify",
    "ssm_scan",
    "stack_layout",
    "trilinear_gather",
    "unpatchify",
    "zoh_discretize",
    "zoh_params",
]
