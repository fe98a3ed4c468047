"""Temporally consistent mask learning and average-based pruning.

Each Gaussian carries a per-frame mask logit. Rendering binarizes the mask
with a straight-through estimator (the sigmoid path carries the gradient), a
sparsity loss pulls logits down, and an L1 consistency loss ties each frame
to the gradient-stopped previous frame. After training, a Gaussian is pruned
when its mean sigmoid over all frames falls below the threshold.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .numerics import sigmoid, sigmoid_grad
from .renderer import View, render, render_grad
from .scene import SCENE_MAGIC, SCENE_VERSION, DynamicScene

DEFAULT_MASK_THRESHOLD = 0.01


@dataclass(frozen=True)
class MaskState:
    """Per-Gaussian, per-frame mask logits (pre-sigmoid) and the binarization threshold."""

    logits: np.ndarray   # (T, N) float64
    threshold: float = DEFAULT_MASK_THRESHOLD

    def __post_init__(self):
        logits = np.array(self.logits, dtype=np.float64, copy=True)
        if logits.ndim != 2:
            raise ValueError("mask logits must have shape (T, N)")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError("mask threshold must lie in (0, 1)")
        logits.flags.writeable = False
        object.__setattr__(self, "logits", logits)

    @property
    def num_frames(self) -> int:
        return self.logits.shape[0]

    @property
    def num_gaussians(self) -> int:
        return self.logits.shape[1]


@dataclass(frozen=True)
class MaskLossWeights:
    lambda_mask: float = 0.01
    lambda_mc: float = 0.01

    def __post_init__(self):
        if self.lambda_mask < 0 or self.lambda_mc < 0:
            raise ValueError("loss weights must be >= 0")


def binarize(logits, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Forward hard mask in {0, 1} plus the straight-through surrogate gradient.

    The indicator is gradient-stopped; the backward value is the sigmoid
    derivative of the logits.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    logits = np.asarray(logits, dtype=np.float64)
    forward = (sigmoid(logits) > threshold).astype(np.float64)
    return forward, sigmoid_grad(logits)


def apply_mask(scales, opacities, mask_values):
    """Scale linear-space sizes and effective opacities by the binary mask."""
    scales = np.asarray(scales, dtype=np.float64)
    opacities = np.asarray(opacities, dtype=np.float64)
    m = np.asarray(mask_values, dtype=np.float64)
    if scales.shape[0] != m.shape[0] or opacities.shape[0] != m.shape[0]:
        raise ValueError("mask length does not match gaussian count")
    return scales * m.reshape(-1, *([1] * (scales.ndim - 1))), (
        opacities * m.reshape(-1, *([1] * (opacities.ndim - 1)))
    )


def mask_loss(logits_t) -> float:
    """Sparsity pull: sum of sigmoids of one frame's logits."""
    return float(np.sum(sigmoid(logits_t)))


def mask_loss_grad(logits_t) -> np.ndarray:
    return sigmoid_grad(logits_t)


def mask_consistency_loss(logits_t, logits_prev) -> float:
    """L1 distance to the previous frame's (gradient-stopped) logits."""
    a = np.asarray(logits_t, dtype=np.float64)
    b = np.asarray(logits_prev, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"logit shapes differ: {a.shape} vs {b.shape}")
    return float(np.sum(np.abs(a - b)))


def mask_consistency_grad(logits_t, logits_prev) -> np.ndarray:
    """Subgradient wrt the current frame only; zero at ties."""
    a = np.asarray(logits_t, dtype=np.float64)
    b = np.asarray(logits_prev, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"logit shapes differ: {a.shape} vs {b.shape}")
    return np.sign(a - b)


def keep_indices(mask: MaskState) -> np.ndarray:
    """Gaussians whose mean sigmoid over frames stays at or above the threshold."""
    mean_sig = sigmoid(mask.logits).mean(axis=0)
    return np.flatnonzero(mean_sig >= mask.threshold).astype(np.int64)


def prune_scene(scene: DynamicScene, keep: np.ndarray) -> DynamicScene:
    """Drop pruned rows from every tensor and remap the depth order."""
    keep = np.asarray(keep, dtype=np.int64)
    remap = -np.ones(scene.num_gaussians, dtype=np.int64)
    remap[keep] = np.arange(keep.size)
    new_order = remap[scene.depth_order]
    new_order = new_order[new_order >= 0]
    return DynamicScene(
        num_gaussians=int(keep.size),
        num_frames=scene.num_frames,
        positions=scene.positions[:, keep],
        rotations=scene.rotations[:, keep],
        colors=scene.colors[:, keep],
        log_scales=scene.log_scales[keep],
        opacity_logits=scene.opacity_logits[keep],
        depth_order=new_order,
    )


def prune(mask: MaskState, scene: DynamicScene):
    """Apply the temporal-average rule; returns (keep indices, pruned scene)."""
    if mask.logits.shape != (scene.num_frames, scene.num_gaussians):
        raise ValueError("mask shape does not match scene")
    keep = keep_indices(mask)
    return keep, prune_scene(scene, keep)


def train_masks(
    scene: DynamicScene,
    views,
    targets,
    weights: MaskLossWeights = MaskLossWeights(),
    threshold: float = DEFAULT_MASK_THRESHOLD,
    steps: int = 200,
    lr: float = 30.0,
    carry_steps: int | None = None,
) -> MaskState:
    """Optimize mask logits frame by frame with plain gradient descent.

    views/targets pair up; frames are visited in ascending order, each frame's
    logits starting from the previous frame's optimum (zeros for the first).
    `steps` applies to the first frame; `carry_steps` (default: steps) to the
    rest, which start from an already-settled state. The photometric term is
    the mean absolute error of the hard-masked render against the target.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if len(views) != len(targets):
        raise ValueError("views and targets must pair up")
    n, t_total = scene.num_gaussians, scene.num_frames
    by_frame: dict[int, list[int]] = {}
    for k, v in enumerate(views):
        by_frame.setdefault(v.frame_index, []).append(k)
    if carry_steps is None:
        carry_steps = steps

    all_logits = np.zeros((t_total, n))
    current = np.zeros(n)
    prev = None
    first = True
    for t in sorted(by_frame):
        view_ids = by_frame[t]
        n_steps = steps if first else carry_steps
        for step in range(n_steps):
            state = MaskState(np.broadcast_to(current, (t_total, n)), threshold)
            grad = np.zeros(n)
            photo = 0.0
            for k in view_ids:
                view = views[k]
                img = render(scene, view, mask=state)
                resid = img - np.asarray(targets[k], dtype=np.float64)
                photo += float(np.mean(np.abs(resid)))
                upstream = np.sign(resid) / resid.size
                grad += render_grad(scene, view, upstream, mask=state)["mask_logits"]
            grad /= len(view_ids)
            photo /= len(view_ids)
            loss = photo + weights.lambda_mask * mask_loss(current)
            grad += weights.lambda_mask * mask_loss_grad(current)
            if prev is not None:
                loss += weights.lambda_mc * mask_consistency_loss(current, prev)
                grad += weights.lambda_mc * mask_consistency_grad(current, prev)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"mask training diverged: non-finite loss at frame {t}, step {step}"
                )
            current = current - lr * grad
        all_logits[t] = current
        prev = current.copy()
        first = False
    return MaskState(all_logits, threshold)


# Mask checkpoints: same header scheme as scenes, logits as float32 (T, N).
_MASK_HEADER = struct.Struct("<4sHII")


def mask_to_bytes(mask: MaskState) -> bytes:
    t, n = mask.logits.shape
    return _MASK_HEADER.pack(SCENE_MAGIC, SCENE_VERSION, n, t) + mask.logits.astype(
        "<f4"
    ).tobytes()


def mask_from_bytes(data: bytes, threshold: float = DEFAULT_MASK_THRESHOLD) -> MaskState:
    if len(data) < _MASK_HEADER.size:
        raise ValueError("mask checkpoint truncated before header")
    magic, version, n, t = _MASK_HEADER.unpack_from(data, 0)
    if magic != SCENE_MAGIC or version != SCENE_VERSION:
        raise ValueError("bad mask checkpoint header")
    expected = _MASK_HEADER.size + 4 * t * n
    if len(data) != expected:
        raise ValueError(f"mask checkpoint has {len(data)} bytes, expected {expected}")
    logits = np.frombuffer(data, dtype="<f4", count=t * n, offset=_MASK_HEADER.size)
    return MaskState(logits.reshape(t, n).astype(np.float64), threshold)
