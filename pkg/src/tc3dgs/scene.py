"""Data model for dynamic Gaussian scenes plus synthetic-scene generation.

A scene holds per-frame Gaussian parameters: positions, rotations and colors
vary over time (T x N x D tensors); per-axis log scales and opacity logits are
static per Gaussian. Compositing order is an explicit front-to-back
permutation instead of camera-dependent sorting.

All tensors are stored as float32 (the dense-baseline precision used for
compression-ratio accounting) and are read-only after construction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

SCENE_MAGIC = b"TC3D"
SCENE_VERSION = 1

# Canonical parameter-group order used by serialization and reports.
PARAM_GROUPS = ("positions", "rotations", "colors", "log_scales", "opacity_logits")
DYNAMIC_GROUPS = ("positions", "rotations", "colors")
STATIC_GROUPS = ("log_scales", "opacity_logits")
GROUP_DIMS = {
    "positions": 3,
    "rotations": 4,
    "colors": 3,
    "log_scales": 3,
    "opacity_logits": 1,
}

QUAT_NORM_TOL = 1e-6


class SceneError(ValueError):
    """Raised for invalid scene construction or a malformed scene file."""


def _as_readonly(a, dtype):
    out = np.array(a, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class DynamicScene:
    """Dense per-frame Gaussian parameters for a T-frame scene of N Gaussians."""

    num_gaussians: int
    num_frames: int
    positions: np.ndarray      # (T, N, 3) float32
    rotations: np.ndarray      # (T, N, 4) float32, unit quaternions (w, x, y, z)
    colors: np.ndarray         # (T, N, 3) float32 in [0, 1]
    log_scales: np.ndarray     # (N, 3) float32
    opacity_logits: np.ndarray  # (N, 1) float32, pre-sigmoid
    depth_order: np.ndarray    # (N,) int64 permutation, front-to-back

    def __post_init__(self):
        n, t = int(self.num_gaussians), int(self.num_frames)
        if n < 0 or t < 1:
            raise SceneError(f"invalid scene dims N={n}, T={t}")
        object.__setattr__(self, "num_gaussians", n)
        object.__setattr__(self, "num_frames", t)
        shapes = {
            "positions": (t, n, 3),
            "rotations": (t, n, 4),
            "colors": (t, n, 3),
            "log_scales": (n, 3),
            "opacity_logits": (n, 1),
        }
        for name, shape in shapes.items():
            arr = _as_readonly(getattr(self, name), np.float32)
            if arr.shape != shape:
                raise SceneError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise SceneError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)
        order = _as_readonly(self.depth_order, np.int64)
        if order.shape != (n,):
            raise SceneError(f"depth_order has shape {order.shape}, expected ({n},)")
        if n and not np.array_equal(np.sort(order), np.arange(n)):
            raise SceneError("depth_order is not a permutation of 0..N-1")
        object.__setattr__(self, "depth_order", order)
        if n:
            norms = np.linalg.norm(self.rotations.astype(np.float64), axis=-1)
            if np.max(np.abs(norms - 1.0)) > QUAT_NORM_TOL:
                raise SceneError("rotations are not unit quaternions")
            if self.colors.min() < 0.0 or self.colors.max() > 1.0:
                raise SceneError("colors outside [0, 1]")

    def group(self, name: str) -> np.ndarray:
        if name not in PARAM_GROUPS:
            raise SceneError(f"unknown parameter group {name!r}")
        return getattr(self, name)

    def replace_groups(self, **groups) -> "DynamicScene":
        """Return a copy with the given parameter groups substituted."""
        fields = {
            "num_gaussians": self.num_gaussians,
            "num_frames": self.num_frames,
            "positions": self.positions,
            "rotations": self.rotations,
            "colors": self.colors,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "depth_order": self.depth_order,
        }
        fields.update(groups)
        return DynamicScene(**fields)


def dense_storage_bytes(scene: DynamicScene) -> int:
    """float32 byte count of all dense tensors (depth_order excluded)."""
    n, t = scene.num_gaussians, scene.num_frames
    return 4 * (t * n * (3 + 4 + 3) + n * (3 + 1))


@dataclass(frozen=True)
class MotionSpec:
    """Piecewise-linear motion for the moving Gaussians of a synthetic scene.

    breakpoints: shared interior time indices of the position trajectory knots;
    None picks 1-3 random interior breakpoints per Gaussian. noise_sigma adds
    per-frame Gaussian jitter on top of the piecewise-linear path (moving
    Gaussians only, so noise-free scenes stay exactly representable by their
    knots).
    """

    breakpoints: tuple[int, ...] | None = None
    noise_sigma: float = 0.0
    amplitude: float = 2.0
    rotation_amplitude: float = 0.8
    color_drift: float = 0.15

    def knot_times(self, frames: int, rng: np.random.Generator) -> np.ndarray:
        if self.breakpoints is None:
            if frames <= 2:
                interior = np.empty(0, dtype=np.int64)
            else:
                k = int(rng.integers(1, 4))
                k = min(k, frames - 2)
                interior = rng.choice(np.arange(1, frames - 1), size=k, replace=False)
        else:
            interior = np.asarray(self.breakpoints, dtype=np.int64)
            if interior.size and (interior.min() < 0 or interior.max() > frames - 1):
                raise SceneError(
                    f"motion breakpoints {self.breakpoints} outside [0, {frames - 1}]"
                )
        knots = np.unique(np.concatenate([[0, frames - 1], interior]))
        return knots


def _piecewise_linear(knots: np.ndarray, knot_values: np.ndarray, frames: int) -> np.ndarray:
    """Fill a length-T track from (knot time, value) pairs; exact at knots."""
    out = np.empty(frames, dtype=np.float64)
    for (t0, v0), (t1, v1) in zip(
        zip(knots[:-1], knot_values[:-1]), zip(knots[1:], knot_values[1:])
    ):
        ts = np.arange(t0, t1 + 1, dtype=np.float64)
        w = (ts - t0) / (t1 - t0)
        out[t0 : t1 + 1] = v0 + (v1 - v0) * w
    out[knots] = knot_values
    return out


def make_synthetic_scene(
    n_static: int,
    n_moving: int,
    frames: int,
    motion_spec: MotionSpec | None = None,
    seed: int = 0,
) -> DynamicScene:
    """Build a deterministic test scene of static plus piecewise-linear movers.

    Static Gaussians have bit-identical parameters at every frame. Moving
    Gaussians follow the motion spec in position, with a mild piecewise-linear
    in-plane rotation and color drift sharing the same knots.
    """
    if n_static < 0 or n_moving < 0:
        raise SceneError("gaussian counts must be >= 0")
    if frames < 1:
        raise SceneError("frames must be >= 1")
    spec = motion_spec if motion_spec is not None else MotionSpec()
    if spec.breakpoints is not None:
        spec.knot_times(frames, np.random.default_rng(0))  # range check only
    rng = np.random.default_rng(seed)
    n = n_static + n_moving

    base_pos = np.zeros((n, 3))
    base_pos[:, 0] = rng.uniform(-3.0, 3.0, n)
    base_pos[:, 1] = rng.uniform(-3.0, 3.0, n)
    base_pos[:, 2] = rng.uniform(0.0, 1.0, n)
    base_angle = rng.uniform(-np.pi / 2, np.pi / 2, n)
    base_color = rng.uniform(0.08, 0.92, (n, 3))
    log_scales = np.log(rng.uniform(0.12, 0.45, (n, 3)))
    opacity_logits = rng.normal(2.0, 0.4, (n, 1))

    positions = np.broadcast_to(base_pos, (frames, n, 3)).copy()
    angles = np.broadcast_to(base_angle, (frames, n)).copy()
    colors = np.broadcast_to(base_color, (frames, n, 3)).copy()

    for g in range(n_static, n):
        knots = spec.knot_times(frames, rng)
        k = knots.size
        for axis in range(3):
            targets = base_pos[g, axis] + rng.uniform(-spec.amplitude, spec.amplitude, k)
            targets[0] = base_pos[g, axis]
            track = _piecewise_linear(knots, targets, frames)
            if spec.noise_sigma > 0:
                track = track + rng.normal(0.0, spec.noise_sigma, frames)
            positions[:, g, axis] = track
        ang_targets = base_angle[g] + rng.uniform(
            -spec.rotation_amplitude, spec.rotation_amplitude, k
        )
        ang_targets[0] = base_angle[g]
        angles[:, g] = _piecewise_linear(knots, ang_targets, frames)
        for ch in range(3):
            c_targets = base_color[g, ch] + rng.uniform(-spec.color_drift, spec.color_drift, k)
            c_targets[0] = base_color[g, ch]
            colors[:, g, ch] = np.clip(_piecewise_linear(knots, c_targets, frames), 0.0, 1.0)

    rotations = np.zeros((frames, n, 4))
    rotations[:, :, 0] = np.cos(angles / 2.0)
    rotations[:, :, 3] = np.sin(angles / 2.0)

    return DynamicScene(
        num_gaussians=n,
        num_frames=frames,
        positions=positions,
        rotations=rotations,
        colors=colors,
        log_scales=log_scales,
        opacity_logits=opacity_logits,
        depth_order=rng.permutation(n),
    )


# ---------------------------------------------------------------------------
# Scene ingest/export: binary layout and a JSON manifest for tiny fixtures.
# Binary: magic TC3D, version u16, N u32, T u32, then row-major float32
# tensors in field order, then depth_order as u32. Little-endian throughout.
# ---------------------------------------------------------------------------

_SCENE_HEADER = struct.Struct("<4sHII")


def scene_to_bytes(scene: DynamicScene) -> bytes:
    parts = [_SCENE_HEADER.pack(SCENE_MAGIC, SCENE_VERSION, scene.num_gaussians, scene.num_frames)]
    for name in PARAM_GROUPS:
        parts.append(scene.group(name).astype("<f4").tobytes())
    parts.append(scene.depth_order.astype("<u4").tobytes())
    return b"".join(parts)


def scene_from_bytes(data: bytes) -> DynamicScene:
    if len(data) < _SCENE_HEADER.size:
        raise SceneError("scene file truncated before header")
    magic, version, n, t = _SCENE_HEADER.unpack_from(data, 0)
    if magic != SCENE_MAGIC:
        raise SceneError(f"bad scene magic {magic!r}")
    if version != SCENE_VERSION:
        raise SceneError(f"unsupported scene version {version}")
    if t < 1:
        raise SceneError(f"invalid frame count {t}")
    offset = _SCENE_HEADER.size
    expected = offset + 4 * (t * n * 10 + n * 4) + 4 * n
    if len(data) != expected:
        raise SceneError(f"scene file has {len(data)} bytes, expected {expected}")
    arrays = {}
    for name in PARAM_GROUPS:
        dim = GROUP_DIMS[name]
        count = (t * n * dim) if name in DYNAMIC_GROUPS else (n * dim)
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        shape = (t, n, dim) if name in DYNAMIC_GROUPS else (n, dim)
        arrays[name] = arr.reshape(shape)
    order = np.frombuffer(data, dtype="<u4", count=n, offset=offset).astype(np.int64)
    return DynamicScene(
        num_gaussians=n, num_frames=t, depth_order=order, **arrays
    )


def save_scene(scene: DynamicScene, path) -> None:
    with open(path, "wb") as f:
        f.write(scene_to_bytes(scene))


def load_scene(path) -> DynamicScene:
    with open(path, "rb") as f:
        return scene_from_bytes(f.read())


def scene_to_manifest(scene: DynamicScene) -> dict:
    out = {"num_gaussians": scene.num_gaussians, "num_frames": scene.num_frames}
    for name in PARAM_GROUPS:
        out[name] = scene.group(name).tolist()
    out["depth_order"] = scene.depth_order.tolist()
    return out


def scene_from_manifest(manifest: dict) -> DynamicScene:
    try:
        return DynamicScene(
            num_gaussians=manifest["num_gaussians"],
            num_frames=manifest["num_frames"],
            positions=manifest["positions"],
            rotations=manifest["rotations"],
            colors=manifest["colors"],
            log_scales=manifest["log_scales"],
            opacity_logits=manifest["opacity_logits"],
            depth_order=manifest["depth_order"],
        )
    except KeyError as e:
        raise SceneError(f"scene manifest missing field {e.args[0]!r}") from e


def load_scene_auto(path) -> DynamicScene:
    """Load either the binary layout or the JSON manifest variant."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] == SCENE_MAGIC:
        return scene_from_bytes(data)
    try:
        manifest = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SceneError(f"{path}: neither TC3D binary nor JSON manifest") from e
    return scene_from_manifest(manifest)
