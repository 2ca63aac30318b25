"""Scene-completion pretraining for voxel 3D detection, evaluated at desk scale."""

from .boxes import Box3D, wrap_angle
from .grids import (DenseOccupancyGrid, PointCloud, SparseVoxelGrid,
                    VoxelGridConfig, densify, downsample, voxelize)
from .metrics import ConfusionCounts, PRCurve, ap11, box_iou_3d, box_iou_bev, voxel_iou
from .transfer import (Checkpoint, LabelFraction, load_checkpoint,
                       sample_label_fraction, save_checkpoint, transfer_backbone)

__all__ = [
    "Box3D", "wrap_angle",
    "DenseOccupancyGrid", "PointCloud", "SparseVoxelGrid", "VoxelGridConfig",
    "densify", "downsample", "voxelize",
    "ConfusionCounts", "PRCurve", "ap11", "box_iou_3d", "box_iou_bev", "voxel_iou",
    "Checkpoint", "LabelFraction", "load_checkpoint", "sample_label_fraction",
    "save_checkpoint", "transfer_backbone",
]

__version__ = "0.1.0"
