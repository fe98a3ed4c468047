"""End-to-end compression pipeline and the container <-> scene mapping.

Stage order is fixed: mask training, pruning, sensitivity-driven bit
allocation, quantization-aware fine-tuning, keypoint selection, then
serialization. Compression ratios are reported against the float32 dense
bytes of the pre-prune scene. Decompression never needs the views.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import container as codec
from .container import (
    CompressedContainer,
    ContainerDecodeError,
    GroupCodec,
    Payload,
    RAW_BITS_SENTINEL,
)
from .keypoints import KeypointConfig, KeypointSet, batch_select, reconstruct
from .masking import MaskLossWeights, MaskState, prune, train_masks
from .quant import (
    BitRange,
    DEFAULT_SHIFTS,
    QuantizerState,
    compute_sensitivity_report,
    max_abs_step_size,
    quantization_aware_finetune,
    quantize_finalize,
)
from .renderer import View, psnr, render
from .scene import (
    DYNAMIC_GROUPS,
    GROUP_DIMS,
    PARAM_GROUPS,
    STATIC_GROUPS,
    DynamicScene,
    dense_storage_bytes,
)


class PipelineError(RuntimeError):
    """A stage failed; the message names the stage."""


@dataclass(frozen=True)
class PipelineConfig:
    # Masking / pruning.
    masking: bool = True
    lambda_mask: float = 0.01
    lambda_mc: float = 0.01
    mask_threshold: float = 0.01
    mask_steps: int = 250
    mask_carry_steps: int = 25
    mask_lr: float = 25.0
    mask_target_noise: float = 0.02
    # Quantization.
    quantize: bool = True
    bit_range: BitRange = field(default_factory=BitRange)
    quantize_after: int = 0
    qat_steps: int = 200
    qat_lr: float = 0.05
    step_lr: float = 0.02
    # Keypoint trajectories.
    keypoints: bool = True
    keypoint: KeypointConfig = field(default_factory=KeypointConfig)
    # Shared.
    seed: int = 0
    psnr_threshold: float = 30.0

    def mask_weights(self) -> MaskLossWeights:
        return MaskLossWeights(self.lambda_mask, self.lambda_mc)


def _run_stage(name: str, fn):
    try:
        return fn()
    except Exception as e:
        raise PipelineError(f"stage {name!r} failed: {e}") from e


def _serialize_groups(scene: DynamicScene, cfg, bits, quantizers, ksets):
    """Build per-group codecs and payloads from the post-training scene.

    Groups without a learned step size (positions always; every group when
    fine-tuning was skipped) quantize with a range-covering step, which makes
    re-compression of already-quantized data reproduce the same codes.
    """
    codecs = {}
    payloads = {}
    for name in PARAM_GROUPS:
        shift = DEFAULT_SHIFTS[name]
        values = scene.group(name).astype(np.float64)
        if cfg.quantize:
            if quantizers is not None and name in quantizers:
                q = quantizers[name]
            else:
                b = 16 if name == "positions" else int(bits[name])
                q = QuantizerState(max_abs_step_size(values - shift, b), b)
            codecs[name] = GroupCodec(q.bit_width, q.step_size, shift)
        else:
            codecs[name] = GroupCodec(RAW_BITS_SENTINEL, 1.0, 0.0)
            shift = 0.0

        if name in STATIC_GROUPS or not cfg.keypoints:
            flat = values.reshape(-1)
            if cfg.quantize:
                codes, _ = quantize_finalize(flat - shift, _as_state(codecs[name]))
                payloads[name] = Payload(values_codes=codes)
            else:
                payloads[name] = Payload(values_raw=flat.astype(np.float32))
        else:
            kset = ksets[name]
            if cfg.quantize:
                codes, _ = quantize_finalize(kset.values - shift, _as_state(codecs[name]))
                payloads[name] = Payload(
                    values_codes=codes,
                    row_offsets=kset.row_offsets,
                    time_indices=kset.time_indices,
                )
            else:
                payloads[name] = Payload(
                    values_raw=kset.values.astype(np.float32),
                    row_offsets=kset.row_offsets,
                    time_indices=kset.time_indices,
                )
    return codecs, payloads


def _as_state(gc: GroupCodec) -> QuantizerState:
    return QuantizerState(gc.step_size, gc.bits)


def compress(scene: DynamicScene, views, cfg: PipelineConfig = PipelineConfig()):
    """Run the full stack; returns (container bytes, report dict)."""
    views = list(views)
    if not views:
        raise PipelineError("stage 'render-targets' failed: no views given")
    rng = np.random.default_rng(cfg.seed)
    pre_n = scene.num_gaussians

    targets = _run_stage("render-targets", lambda: [render(scene, v) for v in views])

    mask = None
    keep = np.arange(pre_n)
    pruned = scene
    if cfg.masking:
        def run_masking():
            noisy = [
                t + rng.normal(0.0, cfg.mask_target_noise, t.shape) for t in targets
            ]
            state = train_masks(
                scene,
                views,
                noisy,
                weights=cfg.mask_weights(),
                threshold=cfg.mask_threshold,
                steps=cfg.mask_steps,
                lr=cfg.mask_lr,
                carry_steps=cfg.mask_carry_steps,
            )
            return state, *prune(state, scene)

        mask, keep, pruned = _run_stage("masking", run_masking)

    quantizers = None
    scene_q = pruned
    report_bits = {name: RAW_BITS_SENTINEL for name in PARAM_GROUPS}
    if cfg.quantize:
        def run_quant():
            sens = compute_sensitivity_report(pruned, views, cfg.bit_range)
            updated, qstates = quantization_aware_finetune(
                pruned,
                views,
                targets,
                sens,
                steps=cfg.qat_steps,
                lr=cfg.qat_lr,
                step_lr=cfg.step_lr,
                quantize_after=cfg.quantize_after,
            )
            return sens, updated, qstates

        sens_report, scene_q, quantizers = _run_stage("quantization", run_quant)
        report_bits = dict(sens_report.bits)

    ksets = None
    if cfg.keypoints:
        ksets = _run_stage(
            "keypoints",
            lambda: {
                name: batch_select(scene_q.group(name).astype(np.float64), cfg.keypoint)
                for name in DYNAMIC_GROUPS
            },
        )

    def run_serialize():
        learned = quantizers if cfg.qat_steps > 0 else None
        codecs, payloads = _serialize_groups(scene_q, cfg, report_bits, learned, ksets)
        cont = CompressedContainer(
            num_gaussians=scene_q.num_gaussians,
            num_frames=scene_q.num_frames,
            pre_prune_gaussians=pre_n,
            mask_threshold=cfg.mask_threshold,
            tolerance=cfg.keypoint.tolerance,
            max_keypoints=cfg.keypoint.max_keypoints,
            masking=cfg.masking,
            quantized=cfg.quantize,
            keypoints=cfg.keypoints,
            codecs=codecs,
            depth_order=scene_q.depth_order,
            payloads=payloads,
        )
        return codec.encode_container(cont)

    data = _run_stage("serialize", run_serialize)
    report = _run_stage(
        "report", lambda: _build_report(scene, views, targets, data, keep, report_bits, ksets)
    )
    return data, report


def _build_report(scene, views, targets, data, keep, bits, ksets):
    restored = decompress(data)
    per_view = [
        psnr(render(restored, v), t) for v, t in zip(views, targets)
    ]
    finite = [p for p in per_view if np.isfinite(p)]
    kp_stats = {}
    if ksets is not None:
        for name, kset in ksets.items():
            counts = kset.counts()
            values, freq = np.unique(counts, return_counts=True)
            kp_stats[name] = {
                "mean": float(counts.mean()) if counts.size else 0.0,
                "max": int(counts.max()) if counts.size else 0,
                "histogram": {int(v): int(f) for v, f in zip(values, freq)},
            }
    dense = dense_storage_bytes(scene)
    return {
        "gaussians_before": scene.num_gaussians,
        "gaussians_after": int(keep.size),
        "dense_bytes": dense,
        "container_bytes": len(data),
        "compression_ratio": dense / len(data) if len(data) else float("inf"),
        "bits": {k: int(v) for k, v in bits.items()},
        "keypoints": kp_stats,
        "psnr_per_view": per_view,
        "psnr_mean": float(np.mean(finite)) if finite else float("inf"),
        "psnr_min": float(min(per_view)),
    }


def decompress(data) -> DynamicScene:
    """Rebuild the dense scene from container bytes (or a decoded container)."""
    cont = codec.decode_container(data) if isinstance(data, (bytes, bytearray)) else data
    n, t = cont.num_gaussians, cont.num_frames
    groups = {}
    for name in PARAM_GROUPS:
        gc = cont.codecs[name]
        payload = cont.payloads[name]
        if payload.values_codes is not None:
            values = payload.values_codes.astype(np.float64) * gc.step_size + gc.shift
        else:
            values = payload.values_raw.astype(np.float64)
        dim = GROUP_DIMS[name]
        try:
            if payload.is_keypoints:
                kset = KeypointSet(
                    row_offsets=payload.row_offsets,
                    time_indices=payload.time_indices,
                    values=values,
                    num_frames=t,
                )
                groups[name] = reconstruct(kset, (t, n, dim))
            elif name in DYNAMIC_GROUPS:
                groups[name] = values.reshape(t, n, dim)
            else:
                groups[name] = values.reshape(n, dim)
        except ValueError as e:
            raise ContainerDecodeError(f"group {name}: {e}") from e

    rot = groups["rotations"]
    norms = np.linalg.norm(rot, axis=-1, keepdims=True)
    if n and float(norms.min()) < 1e-6:
        raise ContainerDecodeError("degenerate quaternion after dequantization")
    groups["rotations"] = rot / norms
    groups["colors"] = np.clip(groups["colors"], 0.0, 1.0)
    try:
        return DynamicScene(
            num_gaussians=n,
            num_frames=t,
            depth_order=cont.depth_order,
            **groups,
        )
    except ValueError as e:
        raise ContainerDecodeError(f"decoded scene invalid: {e}") from e


def stats(data: bytes) -> dict:
    """Machine-readable breakdown of a container."""
    cont = codec.decode_container(data)
    sections = _section_sizes(data)
    n_pre, t = cont.pre_prune_gaussians, cont.num_frames
    dense = 4 * (t * n_pre * 10 + n_pre * 4)
    kp_hist = {}
    if cont.keypoints:
        for name in DYNAMIC_GROUPS:
            counts = np.diff(cont.payloads[name].row_offsets)
            values, freq = np.unique(counts, return_counts=True)
            kp_hist[name] = {int(v): int(f) for v, f in zip(values, freq)}
    return {
        "num_gaussians": cont.num_gaussians,
        "pre_prune_gaussians": n_pre,
        "num_frames": t,
        "stages": {
            "masking": cont.masking,
            "quantized": cont.quantized,
            "keypoints": cont.keypoints,
        },
        "bits": {name: cont.codecs[name].bits for name in PARAM_GROUPS},
        "step_sizes": {name: cont.codecs[name].step_size for name in PARAM_GROUPS},
        "bytes_total": len(data),
        "bytes_per_section": sections,
        "dense_bytes": dense,
        "compression_ratio": dense / len(data) if len(data) else float("inf"),
        "keypoint_histogram": kp_hist,
    }


def format_stats(info: dict) -> str:
    lines = [
        f"gaussians      {info['num_gaussians']} (pre-prune {info['pre_prune_gaussians']})",
        f"frames         {info['num_frames']}",
        f"stages         masking={info['stages']['masking']} "
        f"quantized={info['stages']['quantized']} keypoints={info['stages']['keypoints']}",
        f"bits           "
        + " ".join(f"{k}={v}" for k, v in info["bits"].items()),
        f"bytes          {info['bytes_total']} (dense {info['dense_bytes']})",
        f"ratio          {info['compression_ratio']:.2f}x",
    ]
    for name, size in info["bytes_per_section"].items():
        lines.append(f"  section {name:<16} {size} bytes")
    for name, hist in info.get("keypoint_histogram", {}).items():
        mean = sum(k * v for k, v in hist.items()) / max(sum(hist.values()), 1)
        lines.append(f"  keypoints/{name:<9} mean {mean:.2f}")
    return "\n".join(lines)


def _section_sizes(data: bytes) -> dict:
    base = codec._FIXED.size + codec._GROUP_ENTRY.size * len(PARAM_GROUPS)
    (count,) = codec._SECTION_COUNT.unpack_from(data, base)
    sizes = {}
    pos = base + codec._SECTION_COUNT.size
    ids = {v: k for k, v in codec.SECTION_IDS.items()}
    for _ in range(count):
        sid, _, length, _ = codec._SECTION_ENTRY.unpack_from(data, pos)
        sizes[ids[sid]] = int(length)
        pos += codec._SECTION_ENTRY.size
    return sizes


def verify(data: bytes, reference: DynamicScene, views, psnr_threshold: float = 30.0):
    """Decompress, re-render, and check fidelity plus structural invariants."""
    from .renderer import blending_weights

    restored = decompress(data)
    checks = {}
    metrics = {"psnr_per_view": []}
    checks["shape_match"] = (
        restored.num_frames == reference.num_frames
        and restored.num_gaussians <= reference.num_gaussians
    )
    norms = np.linalg.norm(restored.rotations.astype(np.float64), axis=-1)
    checks["quaternion_norms"] = bool(
        restored.num_gaussians == 0 or np.max(np.abs(norms - 1.0)) <= 1e-5
    )
    ok_weights = True
    for view in views:
        ref_img = render(reference, view)
        out_img = render(restored, view)
        metrics["psnr_per_view"].append(psnr(out_img, ref_img))
        w = blending_weights(restored, view)
        ok_weights = ok_weights and bool(np.all(w.sum(axis=0) <= 1.0 + 1e-9))
    checks["weight_telescoping"] = ok_weights
    finite = [p for p in metrics["psnr_per_view"] if np.isfinite(p)]
    metrics["psnr_mean"] = float(np.mean(finite)) if finite else float("inf")
    metrics["psnr_min"] = float(min(metrics["psnr_per_view"], default=float("inf")))
    checks["psnr"] = metrics["psnr_min"] >= psnr_threshold
    cont = codec.decode_container(data)
    if not cont.masking and not cont.quantized and cont.keypoints:
        err = _keypoint_mse_excess(cont, restored)
        checks["keypoint_mse"] = bool(err <= cont.tolerance + 1e-9)
        metrics["keypoint_mse_max"] = err
    return all(checks.values()), {"checks": checks, **metrics}


def _keypoint_mse_excess(cont: CompressedContainer, restored: DynamicScene) -> float:
    """Worst per-row reconstruction MSE of non-saturated keypoint rows."""
    worst = 0.0
    t = cont.num_frames
    for name in DYNAMIC_GROUPS:
        payload = cont.payloads[name]
        dense = restored.group(name).astype(np.float64)
        n, d = dense.shape[1], dense.shape[2]
        rows = dense.transpose(1, 2, 0).reshape(n * d, t)
        counts = np.diff(payload.row_offsets)
        limit = min(cont.max_keypoints, t)
        kset = KeypointSet(
            row_offsets=payload.row_offsets,
            time_indices=payload.time_indices,
            values=payload.values_raw.astype(np.float64),
            num_frames=t,
        )
        recon = reconstruct(kset, (t, n, d)).transpose(1, 2, 0).reshape(n * d, t)
        for r in range(n * d):
            if counts[r] >= limit:
                continue
            worst = max(worst, float(np.mean((rows[r] - recon[r]) ** 2)))
    return worst
