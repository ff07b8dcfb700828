"""Self-supervised contrastive pre-training for LiDAR point clouds.

Desk-scale but structurally complete: two-view augmentation, proposal and
patch extraction over a bird's-eye-view feature grid, masked-attention
patch refinement, a three-term contrastive objective, and a built-in
reverse-mode autodiff engine to train it all.
"""

from .augment import AugmentationConfig, SceneViewPair, Transform, make_view_pair, sample_transform
from .config import RunConfig, desk_config, full_config, load_config
from .pointcloud import PointCloud, read_cloud_bin, read_tensor, write_cloud_bin, write_tensor
from .tensor import Tensor, backward, grad_check

__all__ = [
    "AugmentationConfig",
    "PointCloud",
    "RunConfig",
    "SceneViewPair",
    "Tensor",
    "Transform",
    "backward",
    "desk_config",
    "full_config",
    "grad_check",
    "load_config",
    "make_view_pair",
    "read_cloud_bin",
    "read_tensor",
    "sample_transform",
    "write_cloud_bin",
    "write_tensor",
]
