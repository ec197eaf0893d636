"""Joint voxel and coordinate regression for 3D landmark localization."""

from .geometry import LandmarkSet
from .network import JointModel
from .volumetric import VoxelGrid, build_pyramid, decode_peaks, encode

__all__ = ["JointModel", "LandmarkSet", "VoxelGrid", "build_pyramid", "decode_peaks", "encode"]
