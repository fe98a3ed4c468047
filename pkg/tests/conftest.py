"""Shared test oracles and scene builders.

oracle_render is a deliberately naive per-pixel, per-Gaussian compositor that
mirrors the production arithmetic expression for expression so comparisons
can be exact to the bit. Gradient checks run against central finite
differences on the frame-level renderer (float64 throughout), excluding
pixels near any splat's 3-sigma cutoff where the forward pass is
discontinuous.
"""

import numpy as np

from tc3dgs.renderer import CUTOFF_SQ, MIN_SCALE, View, render_frame


def oracle_sigmoid(x):
    x = np.float64(x)
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    return np.exp(x) / (1.0 + np.exp(x))


def oracle_render(params, depth_order, view, mask_row=None, threshold=0.01, mask_mode="hard"):
    n = np.asarray(params["positions"]).shape[0]
    X, Y = view.pixel_world_coords()
    prep = []
    for i in range(n):
        mu = np.asarray(params["positions"][i], dtype=np.float64)
        quat = np.asarray(params["rotations"][i], dtype=np.float64)
        theta = 2.0 * np.arctan2(quat[3], quat[0])
        ls = np.asarray(params["log_scales"][i], dtype=np.float64)
        sx_lin = np.exp(ls[0])
        sy_lin = np.exp(ls[1])
        sig_o = oracle_sigmoid(np.float64(params["opacity_logits"][i][0]))
        if mask_row is None:
            mval, alive = 1.0, True
        else:
            sig_m = oracle_sigmoid(mask_row[i])
            if mask_mode == "hard":
                mval = 1.0 if sig_m > threshold else 0.0
                alive = mval > 0.0
            else:
                mval, alive = sig_m, True
        ohat = mval * sig_o
        shx = mval * sx_lin
        shy = mval * sy_lin
        valid = alive and not (shx < MIN_SCALE or shy < MIN_SCALE)
        sx = shx if valid else 1.0
        sy = shy if valid else 1.0
        color = np.asarray(params["colors"][i], dtype=np.float64)
        prep.append((mu[0], mu[1], np.cos(theta), np.sin(theta), sx, sy, ohat, valid, color))

    img = np.zeros((view.height, view.width, 3))
    for p in range(view.num_pixels):
        trans = np.float64(1.0)
        pix = np.zeros(3)
        for i in depth_order:
            mux, muy, ca, sa, sx, sy, ohat, valid, color = prep[i]
            dx = X[p] - mux
            dy = Y[p] - muy
            a = (dx * ca + dy * sa) / sx
            b = (-dx * sa + dy * ca) / sy
            q = a * a + b * b
            g = np.exp(-0.5 * q)
            geff = g if (q <= CUTOFF_SQ and valid) else 0.0
            alpha = ohat * geff
            w = alpha * trans
            pix = pix + w * color
            trans = trans * (1.0 - alpha)
        img[p // view.width, p % view.width] = pix
    return img


def random_frame_params(rng, n, tilt=0.25):
    """Random float64 frame parameters with quaternions safely away from w=z=0."""
    angles = rng.uniform(-2.4, 2.4, n)
    quat = np.zeros((n, 4))
    quat[:, 0] = np.cos(angles / 2.0)
    quat[:, 3] = np.sin(angles / 2.0)
    quat[:, 1] = rng.uniform(-tilt, tilt, n)
    quat[:, 2] = rng.uniform(-tilt, tilt, n)
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    positions = np.zeros((n, 3))
    positions[:, 0] = rng.uniform(-2.0, 2.0, n)
    positions[:, 1] = rng.uniform(-2.0, 2.0, n)
    positions[:, 2] = rng.uniform(0.0, 1.0, n)
    return {
        "positions": positions,
        "rotations": quat,
        "colors": rng.uniform(0.05, 0.95, (n, 3)),
        "log_scales": np.log(rng.uniform(0.25, 0.9, (n, 3))),
        "opacity_logits": rng.normal(1.0, 1.0, (n, 1)),
    }


def grad_test_view(size=16, frame=0):
    return View(width=size, height=size, frame_index=frame, scale=(size / 6.0, size / 6.0),
                offset=(size / 2.0, size / 2.0))


def safe_upstream(params, view, rng, margin=0.05):
    """Random upstream gradient, zeroed on pixels near any 3-sigma boundary."""
    X, Y = view.pixel_world_coords()
    mu = np.asarray(params["positions"], dtype=np.float64)[:, :2]
    quat = np.asarray(params["rotations"], dtype=np.float64)
    theta = 2.0 * np.arctan2(quat[:, 3], quat[:, 0])
    s = np.exp(np.asarray(params["log_scales"], dtype=np.float64)[:, :2])
    dx = X[None, :] - mu[:, 0:1]
    dy = Y[None, :] - mu[:, 1:2]
    ca, sa = np.cos(theta)[:, None], np.sin(theta)[:, None]
    a = (dx * ca + dy * sa) / s[:, 0:1]
    b = (-dx * sa + dy * ca) / s[:, 1:2]
    q = a * a + b * b
    risky = np.any(np.abs(q - CUTOFF_SQ) < margin, axis=0)
    up = rng.uniform(-1.0, 1.0, (view.num_pixels, 3))
    up[risky] = 0.0
    return up.reshape(view.height, view.width, 3)


def fd_param_grad(params, depth_order, view, upstream, key, h=1e-4,
                  mask_row=None, threshold=0.01, mask_mode="hard"):
    """Central finite differences of sum(upstream * render) wrt one group."""
    upstream = np.asarray(upstream, dtype=np.float64)

    def loss(p):
        img = render_frame(p, depth_order, view, mask_row, threshold, mask_mode)
        return float(np.sum(upstream * img))

    base = np.asarray(params[key], dtype=np.float64)
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for j in range(base.size):
        for sign in (+1.0, -1.0):
            bumped = base.copy().reshape(-1)
            bumped[j] += sign * h
            p2 = dict(params)
            p2[key] = bumped.reshape(base.shape)
            flat[j] += sign * loss(p2)
        flat[j] /= 2.0 * h
    return grad


def fd_mask_grad(params, depth_order, view, upstream, mask_row, threshold, h=1e-4):
    """Finite differences of the soft (surrogate) mask path."""
    upstream = np.asarray(upstream, dtype=np.float64)
    base = np.asarray(mask_row, dtype=np.float64)
    grad = np.zeros_like(base)
    for j in range(base.size):
        vals = []
        for sign in (+1.0, -1.0):
            row = base.copy()
            row[j] += sign * h
            img = render_frame(params, depth_order, view, row, threshold, "soft")
            vals.append(float(np.sum(upstream * img)))
        grad[j] = (vals[0] - vals[1]) / (2.0 * h)
    return grad


def assert_grads_close(analytic, numeric, rtol=1e-3, atol=1e-7, label=""):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    err = np.abs(analytic - numeric)
    ok = err <= atol + rtol * np.abs(numeric)
    assert ok.all(), (
        f"{label}: max abs err {err.max():.3e}, "
        f"worst at {np.unravel_index(err.argmax(), err.shape)}: "
        f"analytic {analytic.reshape(-1)[err.argmax()]:.6e} vs "
        f"numeric {numeric.reshape(-1)[err.argmax()]:.6e}"
    )
