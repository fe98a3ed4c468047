"""Gradient sensitivities, mixed-precision bit allocation, and learned-step quantization.

Sensitivity of a parameter is the mean absolute gradient of the total
rendered RGB intensity across training views. Per-group bit widths follow the
jointly min-max-normalized sensitivities inside [b_min, b_max]; positions are
always kept at 16 bits. Quantization is signed symmetric with a learnable
step size: rounding passes gradients straight through, clipping stops them,
and the step size receives the rounding-residual gradient scaled by
1/sqrt(count * Q_p).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .renderer import View, frame_params, render_frame, render_frame_grad
from .scene import DYNAMIC_GROUPS, PARAM_GROUPS, DynamicScene

logger = logging.getLogger(__name__)

POSITION_BITS = 16
STEP_SIZE_FLOOR = 1e-8

# Groups whose bit width is driven by sensitivity (positions are pinned).
ALLOCATED_GROUPS = ("rotations", "colors", "log_scales", "opacity_logits")

# Colors live in [0, 1]; they are centered before the signed quantizer.
DEFAULT_SHIFTS = {name: (0.5 if name == "colors" else 0.0) for name in PARAM_GROUPS}


@dataclass(frozen=True)
class BitRange:
    b_min: int = 4
    b_max: int = 8

    def __post_init__(self):
        if not (2 <= self.b_min <= self.b_max <= 16):
            raise ValueError(f"bit range [{self.b_min}, {self.b_max}] outside 2..16")


@dataclass(frozen=True)
class QuantizerState:
    step_size: float
    bit_width: int
    signed: bool = True

    def __post_init__(self):
        if not (self.step_size > 0.0):
            raise ValueError("step_size must be > 0")
        if not (2 <= self.bit_width <= 16):
            raise ValueError("bit_width must lie in 2..16")

    @property
    def q_neg(self) -> int:
        return -(2 ** (self.bit_width - 1)) if self.signed else 0

    @property
    def q_pos(self) -> int:
        return 2 ** (self.bit_width - 1) - 1 if self.signed else 2**self.bit_width - 1


@dataclass(frozen=True)
class SensitivityReport:
    raw: dict          # group -> per-scalar S(theta), >= 0
    normalized: dict   # allocated groups only, values in [0, 1]
    bits: dict         # group -> bit width

    def mean_bit_width(self, scene: DynamicScene) -> float:
        """Scalar-weighted average bit width over all parameter groups."""
        total = 0.0
        count = 0
        for name in PARAM_GROUPS:
            size = scene.group(name).size
            total += self.bits[name] * size
            count += size
        return total / count if count else 0.0


def sensitivity(scene: DynamicScene, views, group: str) -> np.ndarray:
    """Mean |d total_rgb / d theta| over views, per scalar of the group."""
    if group not in PARAM_GROUPS:
        raise ValueError(f"unknown parameter group {group!r}")
    acc = np.zeros(scene.group(group).shape, dtype=np.float64)
    total_pixels = 0
    for view in views:
        upstream = np.ones((view.height, view.width, 3))
        grads = render_frame_grad(
            frame_params(scene, view.frame_index), scene.depth_order, view, upstream
        )
        total_pixels += view.num_pixels
        if group in DYNAMIC_GROUPS:
            acc[view.frame_index] += np.abs(grads[group])
        else:
            acc += np.abs(grads[group])
    if total_pixels == 0:
        raise ValueError("at least one view required")
    return acc / total_pixels


def normalize(raw: dict) -> dict:
    """Min-max normalize jointly over every scalar; degenerate range maps to zeros."""
    if not raw:
        raise ValueError("empty sensitivity table")
    pool = np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in raw.values()])
    lo, hi = float(pool.min()), float(pool.max())
    if hi > lo:
        return {k: (np.asarray(v, dtype=np.float64) - lo) / (hi - lo) for k, v in raw.items()}
    return {k: np.zeros(np.asarray(v).shape) for k, v in raw.items()}


def allocate_bits(normalized: dict, bit_range: BitRange, reduction=np.mean) -> dict:
    """Map mean normalized sensitivity into [b_min, b_max]; positions stay at 16."""
    bits = {"positions": POSITION_BITS}
    for name in ALLOCATED_GROUPS:
        score = float(reduction(np.asarray(normalized[name], dtype=np.float64)))
        bits[name] = int(round(bit_range.b_min + score * (bit_range.b_max - bit_range.b_min)))
    return bits


def compute_sensitivity_report(scene: DynamicScene, views, bit_range: BitRange) -> SensitivityReport:
    """Full sensitivity pass: raw tables, joint normalization, bit allocation.

    Positions are measured but excluded from the normalization pool since
    their width is pinned to 16 bits.
    """
    raw = {name: sensitivity(scene, views, name) for name in PARAM_GROUPS}
    normalized = normalize({name: raw[name] for name in ALLOCATED_GROUPS})
    bits = allocate_bits(normalized, bit_range)
    return SensitivityReport(raw=raw, normalized=normalized, bits=bits)


@dataclass(frozen=True)
class FakeQuantizeGrad:
    """Gradient contract of fake_quantize.

    pass_through: per-element d out / d v (1 inside the clip range, else 0).
    step_grad: per-element d out / d step, before the global scale.
    grad_scale: 1 / sqrt(count * Q_p); multiply onto the summed step gradient.
    """

    pass_through: np.ndarray
    step_grad: np.ndarray
    grad_scale: float

    def step_size_grad(self, upstream: np.ndarray) -> float:
        return self.grad_scale * float(np.sum(np.asarray(upstream) * self.step_grad))


def fake_quantize(v, q: QuantizerState) -> tuple[np.ndarray, FakeQuantizeGrad]:
    """Simulated quantization clamp(round(v / step), Qn, Qp) * step."""
    v = np.asarray(v, dtype=np.float64)
    step = q.step_size
    x = v / step
    r = np.round(x)
    codes = np.clip(r, q.q_neg, q.q_pos)
    out = codes * step
    inside = (x >= q.q_neg) & (x <= q.q_pos)
    pass_through = inside.astype(np.float64)
    step_grad = np.where(inside, r - x, np.where(x < q.q_neg, float(q.q_neg), float(q.q_pos)))
    grad_scale = 1.0 / np.sqrt(max(v.size, 1) * q.q_pos)
    return out, FakeQuantizeGrad(pass_through, step_grad, grad_scale)


def init_step_size(v, bit_width: int) -> float:
    """LSQ-style init: 2 * mean(|v|) / sqrt(Q_p), floored at 1e-8."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot initialize a step size from an empty array")
    q_pos = 2 ** (bit_width - 1) - 1
    return max(2.0 * float(np.mean(np.abs(v))) / np.sqrt(q_pos), STEP_SIZE_FLOOR)


def quantize_finalize(v, q: QuantizerState) -> tuple[np.ndarray, float]:
    """Hard quantization to integer codes; codes * step reproduces fake_quantize."""
    v = np.asarray(v, dtype=np.float64)
    codes = np.clip(np.round(v / q.step_size), q.q_neg, q.q_pos).astype(np.int32)
    return codes, q.step_size


def dequantize(codes, q: QuantizerState) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) * q.step_size


def max_abs_step_size(v, bit_width: int) -> float:
    """Step size covering max(|v|) without clipping; used for direct storage."""
    v = np.asarray(v, dtype=np.float64)
    q_pos = 2 ** (bit_width - 1) - 1
    peak = float(np.max(np.abs(v))) if v.size else 0.0
    return max(peak / q_pos, STEP_SIZE_FLOOR)


def quantization_aware_finetune(
    scene: DynamicScene,
    views,
    targets,
    report: SensitivityReport,
    steps: int = 0,
    lr: float = 1.0,
    step_lr: float = 0.02,
    quantize_after: int = 0,
    mask=None,
    shifts: dict | None = None,
) -> tuple[DynamicScene, dict]:
    """Photometric fine-tuning with every non-position group fake-quantized.

    Underlying float parameters and per-group step sizes are trained jointly
    by plain gradient descent (L1 photometric loss, one view per step in a
    fixed round-robin order). Quantization activates after `quantize_after`
    steps. Returns the updated scene (rotations renormalized, colors clipped
    back to [0, 1]) and the final QuantizerState per non-position group.
    """
    if len(views) == 0:
        raise ValueError("at least one view required")
    if len(views) != len(targets):
        raise ValueError("views and targets must pair up")
    shifts = dict(DEFAULT_SHIFTS) if shifts is None else shifts
    params = {name: scene.group(name).astype(np.float64) for name in PARAM_GROUPS}
    # Step sizes start range-covering rather than at the wide LSQ-style init:
    # plain GD with the small step-size learning rate cannot close a large
    # multiplicative init gap at these step counts.
    quantizers = {
        name: QuantizerState(
            max_abs_step_size(params[name] - shifts[name], report.bits[name]),
            report.bits[name],
        )
        for name in ALLOCATED_GROUPS
    }

    if steps == 0:
        return scene, quantizers

    def mask_row_for(t):
        if mask is None:
            return None, 0.01
        return np.asarray(mask.logits, dtype=np.float64)[t], mask.threshold

    for step in range(steps):
        view = views[step % len(views)]
        target = np.asarray(targets[step % len(views)], dtype=np.float64)
        t = view.frame_index
        quantizing = step >= quantize_after

        frame = {"positions": params["positions"][t]}
        grad_infos = {}
        for name in ALLOCATED_GROUPS:
            value = params[name][t] if name in DYNAMIC_GROUPS else params[name]
            if quantizing:
                out, info = fake_quantize(value - shifts[name], quantizers[name])
                frame[name] = out + shifts[name]
                grad_infos[name] = info
            else:
                frame[name] = value

        row, thr = mask_row_for(t)
        img = render_frame(frame, scene.depth_order, view, row, thr)
        resid = img - target
        loss = float(np.mean(np.abs(resid)))
        if not np.isfinite(loss):
            raise RuntimeError(f"quantization-aware finetune diverged at step {step}")
        upstream = np.sign(resid) / resid.size
        grads = render_frame_grad(frame, scene.depth_order, view, upstream, row, thr)

        for name in ALLOCATED_GROUPS:
            g = grads[name]
            if quantizing:
                info = grad_infos[name]
                step_grad = info.step_size_grad(g)
                new_step = quantizers[name].step_size - step_lr * step_grad
                if new_step < STEP_SIZE_FLOOR:
                    logger.warning(
                        "step size for %s clamped to %g at step %d", name, STEP_SIZE_FLOOR, step
                    )
                    new_step = STEP_SIZE_FLOOR
                quantizers[name] = QuantizerState(new_step, quantizers[name].bit_width)
                g = g * info.pass_through
            if name in DYNAMIC_GROUPS:
                params[name][t] = params[name][t] - lr * g
            else:
                params[name] = params[name] - lr * g

    norms = np.linalg.norm(params["rotations"], axis=-1, keepdims=True)
    params["rotations"] = params["rotations"] / np.maximum(norms, 1e-12)
    params["colors"] = np.clip(params["colors"], 0.0, 1.0)
    updated = scene.replace_groups(
        rotations=params["rotations"],
        colors=params["colors"],
        log_scales=params["log_scales"],
        opacity_logits=params["opacity_logits"],
    )
    return updated, quantizers
