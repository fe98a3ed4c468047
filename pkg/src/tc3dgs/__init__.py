"""Temporally compressed dynamic Gaussian scenes.

Compresses per-frame Gaussian parameters via temporally consistent mask
pruning, gradient-sensitivity-driven mixed-precision quantization, and
adaptive keypoint trajectory interpolation, with a bounded-error decompressor
and a toy differentiable splat renderer as the optimization substrate.
"""

from .container import CompressedContainer, ContainerDecodeError
from .keypoints import (
    KeypointConfig,
    KeypointSet,
    batch_select,
    interpolate,
    reconstruct,
    select_keypoints,
)
from .masking import MaskLossWeights, MaskState, binarize, prune, train_masks
from .pipeline import PipelineConfig, PipelineError, compress, decompress, stats, verify
from .quant import (
    BitRange,
    QuantizerState,
    SensitivityReport,
    allocate_bits,
    compute_sensitivity_report,
    fake_quantize,
    init_step_size,
    normalize,
    quantization_aware_finetune,
    quantize_finalize,
    sensitivity,
)
from .renderer import View, make_default_views, psnr, render, render_grad
from .scene import (
    DynamicScene,
    MotionSpec,
    dense_storage_bytes,
    load_scene,
    load_scene_auto,
    make_synthetic_scene,
    save_scene,
)

__version__ = "0.1.0"

__all__ = [
    "BitRange",
    "CompressedContainer",
    "ContainerDecodeError",
    "DynamicScene",
    "KeypointConfig",
    "KeypointSet",
    "MaskLossWeights",
    "MaskState",
    "MotionSpec",
    "PipelineConfig",
    "PipelineError",
    "QuantizerState",
    "SensitivityReport",
    "View",
    "allocate_bits",
    "batch_select",
    "binarize",
    "compress",
    "compute_sensitivity_report",
    "decompress",
    "dense_storage_bytes",
    "fake_quantize",
    "init_step_size",
    "interpolate",
    "load_scene",
    "load_scene_auto",
    "make_default_views",
    "make_synthetic_scene",
    "normalize",
    "prune",
    "psnr",
    "quantization_aware_finetune",
    "quantize_finalize",
    "reconstruct",
    "render",
    "render_grad",
    "save_scene",
    "select_keypoints",
    "sensitivity",
    "stats",
    "train_masks",
    "verify",
]
