"""Convolutional networks with spatial pyramid pooling: fixed-length features
from variable-size inputs, multi-size training on shared parameters,
multi-view testing on feature maps, and single-pass region features for
detection."""

from .errors import (CheckpointError, GraphError, ShapeError,
                     SpecMismatchError, TrainingDivergedError)
from .geometry import (FeatureGeometry, FeatureRect, WindowRect, map_window,
                       receptive_center, resize_image, select_scale,
                       stride_product)
from .net import (NetworkSpec, ParameterStore, build_net, instantiate,
                  load_checkpoint, save_checkpoint)
from .spp import (BinRange, PyramidSpec, bin_range, sliding_pool_params,
                  spp_backward, spp_forward)

__all__ = [
    "BinRange", "CheckpointError", "FeatureGeometry", "FeatureRect",
    "GraphError", "NetworkSpec", "ParameterStore", "PyramidSpec", "ShapeError",
    "SpecMismatchError", "TrainingDivergedError", "WindowRect", "bin_range",
    "build_net", "instantiate", "load_checkpoint", "map_window",
    "receptive_center", "resize_image", "save_checkpoint", "select_scale",
    "sliding_pool_params", "spp_backward", "spp_forward", "stride_product",
]
