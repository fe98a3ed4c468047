"""Differentiable 2D Gaussian splat renderer with hand-rolled gradients.

Splats are composited front to back per the scene's depth order: each
Gaussian contributes alpha = opacity * exp(-0.5 * mahalanobis^2) and blending
weight alpha * transmittance, where transmittance is the running product of
(1 - alpha) of everything in front. The render is orthographic in the x/y
plane; the in-plane orientation is the z-axis rotation angle of the
quaternion, 2 * atan2(q_z, q_w).

render_grad returns reverse-mode gradients for every parameter group and for
mask logits. Mask logits follow the straight-through contract: the binarized
forward value gates the splat, while the backward path uses the sigmoid
derivative. Accumulation order is fixed, so results are reproducible.

The frame-level functions (render_frame / render_frame_grad) take raw
per-frame parameter arrays and skip scene validation; training loops use them
to render intermediate states (e.g. quantized, not-yet-normalized rotations).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .numerics import sigmoid, sigmoid_grad
from .scene import DynamicScene

logger = logging.getLogger(__name__)

# Splats are cut off beyond 3 sigma of a pixel (squared Mahalanobis > 9).
CUTOFF_SQ = 9.0
MIN_SCALE = 1e-8

_GRAD_KEYS = ("positions", "rotations", "colors", "log_scales", "opacity_logits")


@dataclass(frozen=True)
class View:
    """Orthographic window: image_xy = world_xy * scale + offset, at one frame."""

    width: int
    height: int
    frame_index: int
    scale: tuple[float, float] = (1.0, 1.0)
    offset: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("view dimensions must be >= 1")
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")
        if self.scale[0] == 0.0 or self.scale[1] == 0.0:
            raise ValueError("view scale must be nonzero")

    @property
    def num_pixels(self) -> int:
        return self.width * self.height

    def pixel_world_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """World x/y of every pixel center, flattened row-major."""
        xs = (np.arange(self.width, dtype=np.float64) + 0.5 - self.offset[0]) / self.scale[0]
        ys = (np.arange(self.height, dtype=np.float64) + 0.5 - self.offset[1]) / self.scale[1]
        X = np.tile(xs, self.height)
        Y = np.repeat(ys, self.width)
        return X, Y

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "frame_index": self.frame_index,
            "scale": list(self.scale),
            "offset": list(self.offset),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "View":
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            frame_index=int(d["frame_index"]),
            scale=tuple(float(v) for v in d.get("scale", (1.0, 1.0))),
            offset=tuple(float(v) for v in d.get("offset", (0.0, 0.0))),
        )


def make_default_views(
    scene: DynamicScene,
    width: int = 24,
    height: int = 24,
    margin: float = 0.75,
    frames=None,
) -> list[View]:
    """One view per frame, fitting the x/y extent of all positions."""
    pos = scene.positions
    if scene.num_gaussians == 0:
        lo = np.array([-1.0, -1.0])
        hi = np.array([1.0, 1.0])
    else:
        lo = pos[:, :, :2].reshape(-1, 2).min(axis=0) - margin
        hi = pos[:, :, :2].reshape(-1, 2).max(axis=0) + margin
    span = np.maximum(hi - lo, 1e-6)
    scale = (width / span[0], height / span[1])
    offset = (-lo[0] * scale[0], -lo[1] * scale[1])
    if frames is None:
        frames = range(scene.num_frames)
    return [
        View(width=width, height=height, frame_index=int(t), scale=scale, offset=offset)
        for t in frames
    ]


def frame_params(scene: DynamicScene, t: int) -> dict:
    """Slice one frame's parameter arrays out of a scene."""
    if t < 0 or t >= scene.num_frames:
        raise ValueError(f"frame_index {t} out of range for T={scene.num_frames}")
    return {
        "positions": scene.positions[t].astype(np.float64),
        "rotations": scene.rotations[t].astype(np.float64),
        "colors": scene.colors[t].astype(np.float64),
        "log_scales": scene.log_scales.astype(np.float64),
        "opacity_logits": scene.opacity_logits.astype(np.float64),
    }


class _FrameState:
    """Per-Gaussian float64 quantities for one frame, pre-masked and validated."""

    def __init__(self, params: dict, mask_row=None, threshold=0.01, mask_mode="hard"):
        self.mu = np.asarray(params["positions"], dtype=np.float64)[:, :2]
        quat = np.asarray(params["rotations"], dtype=np.float64)
        self.qw = quat[:, 0]
        self.qz = quat[:, 3]
        self.theta = 2.0 * np.arctan2(self.qz, self.qw)
        self.colors = np.asarray(params["colors"], dtype=np.float64)
        self.s_lin = np.exp(np.asarray(params["log_scales"], dtype=np.float64)[:, :2])
        o = np.asarray(params["opacity_logits"], dtype=np.float64)[:, 0]
        self.sig_o = sigmoid(o)
        self.sigp_o = sigmoid_grad(o)

        n = self.mu.shape[0]
        if mask_row is None:
            self.mval = np.ones(n)
            self.sigp_m = np.zeros(n)
            alive = np.ones(n, dtype=bool)
        else:
            logits = np.asarray(mask_row, dtype=np.float64)
            if logits.shape != (n,):
                raise ValueError(f"mask logits row has shape {logits.shape}, expected ({n},)")
            sig_m = sigmoid(logits)
            self.sigp_m = sigmoid_grad(logits)
            if mask_mode == "hard":
                self.mval = (sig_m > threshold).astype(np.float64)
                alive = self.mval > 0.0
            elif mask_mode == "soft":
                self.mval = sig_m
                alive = np.ones(n, dtype=bool)
            else:
                raise ValueError(f"unknown mask_mode {mask_mode!r}")
        self.ohat = self.mval * self.sig_o
        self.shat = self.mval[:, None] * self.s_lin
        singular = alive & np.any(self.shat < MIN_SCALE, axis=1)
        if np.any(singular):
            logger.warning(
                "%d gaussians skipped: covariance scale below %g", int(singular.sum()), MIN_SCALE
            )
        self.valid = alive & ~singular
        self.sx = np.where(self.valid, self.shat[:, 0], 1.0)
        self.sy = np.where(self.valid, self.shat[:, 1], 1.0)
        self.ca = np.cos(self.theta)
        self.sa = np.sin(self.theta)

    def footprint(self, X, Y):
        """Alpha terms for every (gaussian, pixel) pair; zero outside 3 sigma."""
        dx = X[None, :] - self.mu[:, 0:1]
        dy = Y[None, :] - self.mu[:, 1:2]
        a = (dx * self.ca[:, None] + dy * self.sa[:, None]) / self.sx[:, None]
        b = (-dx * self.sa[:, None] + dy * self.ca[:, None]) / self.sy[:, None]
        q = a * a + b * b
        g = np.exp(-0.5 * q)
        live = (q <= CUTOFF_SQ) & self.valid[:, None]
        geff = np.where(live, g, 0.0)
        alpha = self.ohat[:, None] * geff
        return a, b, geff, alpha


def _mask_row(mask, t: int):
    if mask is None:
        return None, 0.01
    logits = np.asarray(mask.logits, dtype=np.float64)
    if t >= logits.shape[0]:
        raise ValueError(f"mask has {logits.shape[0]} frames, frame {t} requested")
    return logits[t], mask.threshold


def render_frame(
    params: dict,
    depth_order: np.ndarray,
    view: View,
    mask_row=None,
    threshold: float = 0.01,
    mask_mode: str = "hard",
) -> np.ndarray:
    st = _FrameState(params, mask_row, threshold, mask_mode)
    X, Y = view.pixel_world_coords()
    _, _, _, alpha = st.footprint(X, Y)
    out = np.zeros((view.num_pixels, 3))
    trans = np.ones(view.num_pixels)
    for i in depth_order:
        al = alpha[i]
        w = al * trans
        out += w[:, None] * st.colors[i]
        trans = trans * (1.0 - al)
    return out.reshape(view.height, view.width, 3)


def render(scene: DynamicScene, view: View, mask=None, mask_mode: str = "hard") -> np.ndarray:
    """Composite the scene into an (H, W, 3) float64 radiance image."""
    row, thr = _mask_row(mask, view.frame_index)
    return render_frame(
        frame_params(scene, view.frame_index), scene.depth_order, view, row, thr, mask_mode
    )


def blending_weights(scene: DynamicScene, view: View, mask=None, mask_mode="hard") -> np.ndarray:
    """Per-Gaussian, per-pixel blending weights alpha_i * T_i (row = gaussian)."""
    row, thr = _mask_row(mask, view.frame_index)
    st = _FrameState(frame_params(scene, view.frame_index), row, thr, mask_mode)
    X, Y = view.pixel_world_coords()
    _, _, _, alpha = st.footprint(X, Y)
    w = np.zeros_like(alpha)
    trans = np.ones(view.num_pixels)
    for i in scene.depth_order:
        w[i] = alpha[i] * trans
        trans = trans * (1.0 - alpha[i])
    return w


def _zero_grads(n: int) -> dict:
    return {
        "positions": np.zeros((n, 3)),
        "rotations": np.zeros((n, 4)),
        "colors": np.zeros((n, 3)),
        "log_scales": np.zeros((n, 3)),
        "opacity_logits": np.zeros((n, 1)),
        "mask_logits": np.zeros(n),
    }


def render_frame_grad(
    params: dict,
    depth_order: np.ndarray,
    view: View,
    upstream: np.ndarray,
    mask_row=None,
    threshold: float = 0.01,
    mask_mode: str = "hard",
) -> dict:
    n = np.asarray(params["positions"]).shape[0]
    p = view.num_pixels
    if n == 0:
        return _zero_grads(0)
    st = _FrameState(params, mask_row, threshold, mask_mode)
    X, Y = view.pixel_world_coords()
    a, b, geff, alpha = st.footprint(X, Y)
    up = np.asarray(upstream, dtype=np.float64).reshape(p, 3)
    order = np.asarray(depth_order, dtype=np.int64)

    # Forward sweep storing each splat's incoming transmittance.
    t_store = np.empty((n, p))
    trans = np.ones(p)
    for i in order:
        t_store[i] = trans
        trans = trans * (1.0 - alpha[i])

    e = st.colors @ up.T                      # (N, P): upstream dotted with color
    w = alpha * t_store
    dcolors = w @ up                          # (N, 3)

    # d loss / d alpha via suffix sums in depth order.
    ew = e * w
    ews = ew[order]
    tail = np.empty_like(ews)
    tail[-1] = 0.0
    if n > 1:
        tail[:-1] = np.cumsum(ews[::-1], axis=0)[::-1][1:]
    # Fully saturated alpha (exactly 1) zeroes everything behind; the occluded
    # term of its own gradient is dropped there rather than dividing by zero.
    rest = 1.0 - alpha[order]
    occluded = np.divide(tail, rest, out=np.zeros_like(tail), where=rest > 0.0)
    dalpha = np.empty((n, p))
    dalpha[order] = e[order] * t_store[order] - occluded

    dohat = np.sum(dalpha * geff, axis=1)
    dq = dalpha * st.ohat[:, None] * geff * -0.5
    da = dq * (2.0 * a)
    db = dq * (2.0 * b)

    ca, sa = st.ca[:, None], st.sa[:, None]
    sx, sy = st.sx[:, None], st.sy[:, None]
    ddx = np.sum(da * ca / sx - db * sa / sy, axis=1)
    ddy = np.sum(da * sa / sx + db * ca / sy, axis=1)
    dsx = -np.sum(da * a, axis=1) / st.sx
    dsy = -np.sum(db * b, axis=1) / st.sy
    dtheta = np.sum(da * b, axis=1) * (st.sy / st.sx) - np.sum(db * a, axis=1) * (st.sx / st.sy)

    out = _zero_grads(n)
    out["positions"][:, 0] = -ddx
    out["positions"][:, 1] = -ddy

    denom = st.qw * st.qw + st.qz * st.qz
    safe = denom > 1e-12
    denom = np.where(safe, denom, 1.0)
    out["rotations"][:, 0] = np.where(safe, dtheta * (-2.0 * st.qz) / denom, 0.0)
    out["rotations"][:, 3] = np.where(safe, dtheta * (2.0 * st.qw) / denom, 0.0)

    out["colors"] = dcolors
    out["log_scales"][:, 0] = dsx * st.shat[:, 0]
    out["log_scales"][:, 1] = dsy * st.shat[:, 1]
    out["opacity_logits"][:, 0] = dohat * st.mval * st.sigp_o
    out["mask_logits"] = (
        dohat * st.sig_o + dsx * st.s_lin[:, 0] + dsy * st.s_lin[:, 1]
    ) * st.sigp_m

    dead = ~st.valid
    for key in _GRAD_KEYS:
        out[key][dead] = 0.0
    out["mask_logits"][dead] = 0.0
    return out


def render_grad(
    scene: DynamicScene,
    view: View,
    upstream: np.ndarray,
    mask=None,
    mask_mode: str = "hard",
) -> dict:
    """Reverse-mode gradients of sum(upstream * render(...)) per parameter group.

    Returns arrays shaped like one frame's parameters: positions (N, 3) with a
    zero z column, rotations (N, 4) with zero x/y columns, colors (N, 3),
    log_scales (N, 3) with a zero z column, opacity_logits (N, 1), and
    mask_logits (N,) (zeros when no mask is given).
    """
    row, thr = _mask_row(mask, view.frame_index)
    return render_frame_grad(
        frame_params(scene, view.frame_index),
        scene.depth_order,
        view,
        upstream,
        row,
        thr,
        mask_mode,
    )


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB on [0, 1]-clamped images; +inf means identical content."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    diff = np.clip(a, 0.0, 1.0) - np.clip(b, 0.0, 1.0)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def format_psnr(value: float) -> str:
    return "exact" if np.isinf(value) else f"{value:.2f} dB"


def write_ppm(image: np.ndarray, path) -> None:
    """Export as binary PPM (P6), clamping radiance to [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    h, w, _ = img.shape
    data = (img * 255.0).round().astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_float_dump(image: np.ndarray, path) -> None:
    """Raw little-endian float32 dump, row-major H x W x 3."""
    np.asarray(image, dtype="<f4").tofile(path)
