import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import grad_test_view, random_frame_params
from tc3dgs.quant import (
    ALLOCATED_GROUPS,
    BitRange,
    QuantizerState,
    allocate_bits,
    compute_sensitivity_report,
    dequantize,
    fake_quantize,
    init_step_size,
    max_abs_step_size,
    normalize,
    quantization_aware_finetune,
    quantize_finalize,
    sensitivity,
)
from tc3dgs.renderer import View, make_default_views, render, render_frame
from tc3dgs.scene import DynamicScene, make_synthetic_scene


# ---------------------------------------------------------------------------
# Sensitivity
# ---------------------------------------------------------------------------


def test_zero_opacity_gaussian_zero_color_sensitivity():
    scene = make_synthetic_scene(3, 0, 1, seed=0)
    logits = scene.opacity_logits.copy()
    logits[1] = -800.0  # sigmoid underflows to exactly 0
    scene = scene.replace_groups(opacity_logits=logits)
    views = make_default_views(scene, 10, 10)
    s = sensitivity(scene, views, "colors")
    np.testing.assert_array_equal(s[0, 1], 0.0)
    assert np.all(s[0, [0, 2]] > 0)


def test_fully_covering_opaque_gaussian_unit_color_sensitivity():
    # Saturated opacity and a huge footprint make alpha exactly 1 everywhere,
    # so each of the 100 pixels contributes dQ/dc = 1.
    scene = DynamicScene(
        num_gaussians=1,
        num_frames=1,
        positions=np.zeros((1, 1, 3)),
        rotations=np.array([[[1.0, 0.0, 0.0, 0.0]]]),
        colors=np.full((1, 1, 3), 0.5),
        log_scales=np.full((1, 3), 20.0),
        opacity_logits=np.array([[40.0]]),
        depth_order=np.array([0]),
    )
    view = View(width=10, height=10, frame_index=0, scale=(1.0, 1.0), offset=(5.0, 5.0))
    s = sensitivity(scene, [view], "colors")
    np.testing.assert_array_equal(s, np.ones((1, 1, 3)))


def _fd_sensitivity(params, order, view, key, h=1e-4):
    grad = np.zeros_like(np.asarray(params[key], dtype=np.float64))
    flat = grad.reshape(-1)
    base = np.asarray(params[key], dtype=np.float64).reshape(-1)
    for j in range(base.size):
        vals = []
        for sign in (+1.0, -1.0):
            bumped = base.copy()
            bumped[j] += sign * h
            p2 = dict(params)
            p2[key] = bumped.reshape(grad.shape)
            vals.append(float(render_frame(p2, order, view).sum()))
        flat[j] = (vals[0] - vals[1]) / (2.0 * h)
    return np.abs(grad) / view.num_pixels


def _clean_random_scene(seed, n=5, size=12, margin=0.08):
    """Random scene with no pixel near any 3-sigma boundary (FD stability)."""
    from conftest import safe_upstream

    rng = np.random.default_rng(seed)
    view = grad_test_view(size)
    while True:
        params = random_frame_params(rng, n)
        up = safe_upstream(params, view, rng, margin=margin)
        if np.all(up.reshape(-1, 3) != 0.0) or np.all(
            np.any(up.reshape(-1, 3) != 0, axis=1)
        ):
            order = rng.permutation(n)
            return params, order, view


def test_sensitivity_matches_finite_differences():
    params, order, view = _clean_random_scene(seed=42)
    quat = params["rotations"] / np.linalg.norm(params["rotations"], axis=1, keepdims=True)
    scene = DynamicScene(
        num_gaussians=5,
        num_frames=1,
        positions=params["positions"][None],
        rotations=quat[None],
        colors=params["colors"][None],
        log_scales=params["log_scales"],
        opacity_logits=params["opacity_logits"],
        depth_order=order,
    )
    fp = {k: scene.group(k)[0].astype(np.float64) for k in ("positions", "rotations", "colors")}
    fp["log_scales"] = scene.log_scales.astype(np.float64)
    fp["opacity_logits"] = scene.opacity_logits.astype(np.float64)
    for key in ("colors", "log_scales", "opacity_logits", "rotations", "positions"):
        got = sensitivity(scene, [view], key)
        want = _fd_sensitivity(fp, scene.depth_order, view, key)
        got2 = got[0] if got.ndim == 3 else got
        mask = np.abs(want) > 1e-10
        np.testing.assert_allclose(got2[mask], want[mask], rtol=2e-3, atol=1e-7, err_msg=key)


def test_sensitivity_permutation_equivariant():
    scene = make_synthetic_scene(8, 0, 1, seed=7)
    views = make_default_views(scene, 10, 10)
    s = sensitivity(scene, views, "opacity_logits")
    perm = np.random.default_rng(8).permutation(8)
    inv = np.argsort(perm)
    scene_p = DynamicScene(
        num_gaussians=8,
        num_frames=1,
        positions=scene.positions[:, perm],
        rotations=scene.rotations[:, perm],
        colors=scene.colors[:, perm],
        log_scales=scene.log_scales[perm],
        opacity_logits=scene.opacity_logits[perm],
        depth_order=inv[scene.depth_order],
    )
    s_p = sensitivity(scene_p, views, "opacity_logits")
    np.testing.assert_allclose(s_p, s[perm], rtol=1e-12)


def test_sensitivity_nonnegative_and_offscreen_zero():
    scene = make_synthetic_scene(4, 0, 2, seed=9)
    pos = scene.positions.copy()
    pos[:, 2, :2] = 800.0
    scene = scene.replace_groups(positions=pos)
    views = make_default_views(scene, 8, 8)
    # Window still spans the far-away splat, so shrink views to the origin.
    views = [View(8, 8, t, (1.0, 1.0), (4.0, 4.0)) for t in range(2)]
    for group in ("colors", "positions", "rotations"):
        s = sensitivity(scene, views, group)
        assert np.all(s >= 0.0)
        np.testing.assert_array_equal(s[:, 2], 0.0)


# ---------------------------------------------------------------------------
# Normalize / allocate
# ---------------------------------------------------------------------------


def test_normalize_affine():
    out = normalize({"a": np.array([1.0, 3.0, 5.0])})
    np.testing.assert_allclose(out["a"], [0.0, 0.5, 1.0])


def test_normalize_degenerate_all_equal():
    out = normalize({"a": np.array([7.0, 7.0]), "b": np.array([7.0])})
    np.testing.assert_array_equal(out["a"], 0.0)
    np.testing.assert_array_equal(out["b"], 0.0)


def test_normalize_midpoint():
    out = normalize({"a": np.array([0.01, 0.21, 0.11])})
    assert out["a"][2] == pytest.approx(0.5, abs=1e-12)


def test_normalize_joint_pool():
    out = normalize({"a": np.array([0.0, 1.0]), "b": np.array([2.0])})
    np.testing.assert_allclose(out["a"], [0.0, 0.5])
    np.testing.assert_allclose(out["b"], [1.0])
    assert all(np.all((v >= 0) & (v <= 1)) for v in out.values())


def _norm_table(scores):
    return {
        name: np.full(3, score)
        for name, score in zip(ALLOCATED_GROUPS, scores)
    }


def test_allocate_bits_extremes_and_midpoint():
    rng = BitRange(4, 8)
    bits = allocate_bits(_norm_table([0.0, 1.0, 0.5, 0.25]), rng)
    assert bits["rotations"] == 4
    assert bits["colors"] == 8
    assert bits["log_scales"] == 6
    assert bits["opacity_logits"] == 5
    assert bits["positions"] == 16


@given(scores=st.lists(st.floats(0, 1), min_size=4, max_size=4))
@settings(max_examples=60, deadline=None)
def test_allocate_bits_monotone_in_range(scores):
    rng = BitRange(4, 8)
    bits = allocate_bits(_norm_table(scores), rng)
    for name, score in zip(ALLOCATED_GROUPS, scores):
        assert 4 <= bits[name] <= 8
    pairs = list(zip(ALLOCATED_GROUPS, scores))
    for (na, sa) in pairs:
        for (nb, sb) in pairs:
            if sa >= sb:
                assert bits[na] >= bits[nb]


def test_bit_range_validation():
    with pytest.raises(ValueError):
        BitRange(1, 8)
    with pytest.raises(ValueError):
        BitRange(8, 4)
    with pytest.raises(ValueError):
        BitRange(4, 17)


# ---------------------------------------------------------------------------
# Quantizer
# ---------------------------------------------------------------------------


def test_fake_quantize_rounding():
    q = QuantizerState(0.5, 3)
    out, _ = fake_quantize(np.array([1.26]), q)
    assert out[0] == pytest.approx(1.5, abs=1e-15)


def test_fake_quantize_clipping():
    q = QuantizerState(0.5, 3)  # Qp = 3
    out, grad = fake_quantize(np.array([10.0]), q)
    assert out[0] == pytest.approx(1.5, abs=1e-15)
    assert grad.pass_through[0] == 0.0
    assert grad.step_grad[0] == 3.0
    out, grad = fake_quantize(np.array([-10.0]), q)
    assert out[0] == pytest.approx(-2.0, abs=1e-15)  # Qn = -4
    assert grad.step_grad[0] == -4.0


def test_fake_quantize_distinct_values_bound():
    rng = np.random.default_rng(20)
    q = QuantizerState(0.03, 4)
    out, _ = fake_quantize(rng.normal(0, 1, 5000), q)
    assert np.unique(out).size <= 2**4
    assert out.min() >= q.q_neg * q.step_size - 1e-12
    assert out.max() <= q.q_pos * q.step_size + 1e-12


def oracle_surrogate(v, step, q_neg, q_pos):
    """Frozen straight-through surrogate built independently per point.

    Returns closures value(v', step') whose true derivatives are the
    contracted gradients at (v, step).
    """
    x = v / step
    if x < q_neg:
        return lambda vv, ss: q_neg * ss
    if x > q_pos:
        return lambda vv, ss: q_pos * ss
    c = np.round(x) - x
    return lambda vv, ss: vv + ss * c


def test_fake_quantize_gradients_match_surrogate_fd():
    rng = np.random.default_rng(21)
    q = QuantizerState(0.37, 5)
    v = rng.uniform(-10, 10, 1000)
    x = v / q.step_size
    frac = np.abs(x - np.floor(x) - 0.5)
    near_round = frac < 1e-3
    near_clip = (np.abs(x - q.q_neg) < 1e-3) | (np.abs(x - q.q_pos) < 1e-3)
    keep = ~(near_round | near_clip)
    v = v[keep]
    out, grad = fake_quantize(v, q)
    h = 1e-6
    for j in range(v.size):
        f = oracle_surrogate(v[j], q.step_size, q.q_neg, q.q_pos)
        fd_v = (f(v[j] + h, q.step_size) - f(v[j] - h, q.step_size)) / (2 * h)
        fd_s = (f(v[j], q.step_size + h) - f(v[j], q.step_size - h)) / (2 * h)
        assert grad.pass_through[j] == pytest.approx(fd_v, rel=1e-4, abs=1e-9)
        assert grad.step_grad[j] == pytest.approx(fd_s, rel=1e-4, abs=1e-9)
    assert grad.grad_scale == pytest.approx(1.0 / np.sqrt(v.size * q.q_pos))


def test_init_step_size_examples():
    assert init_step_size(np.zeros(3), 8) == 1e-8
    assert init_step_size(np.ones(5), 4) == pytest.approx(2.0 / np.sqrt(7.0), rel=1e-12)
    rng = np.random.default_rng(22)
    v = rng.uniform(-1, 1, 100_000)
    q_pos = 2**7 - 1
    assert init_step_size(v, 8) == pytest.approx(1.0 / np.sqrt(q_pos), rel=0.02)


def test_quantize_finalize_idempotent_fixed_point():
    rng = np.random.default_rng(23)
    q = QuantizerState(0.05, 6)
    v = rng.normal(0, 1, 400)
    fq, _ = fake_quantize(v, q)
    codes, step = quantize_finalize(v, q)
    np.testing.assert_array_equal(dequantize(codes, q), fq)
    codes2, _ = quantize_finalize(dequantize(codes, q), q)
    np.testing.assert_array_equal(codes2, codes)


def test_quantize_reconstruction_bound():
    rng = np.random.default_rng(24)
    v = rng.uniform(-1, 1, 2000)
    q = QuantizerState(1.0 / 127.0, 8)
    codes, _ = quantize_finalize(v, q)
    err = np.abs(dequantize(codes, q) - v)
    assert err.max() <= q.step_size / 2 + 1e-12


def test_max_abs_step_covers_range():
    rng = np.random.default_rng(25)
    v = rng.normal(0, 3, 1000)
    step = max_abs_step_size(v, 8)
    q = QuantizerState(step, 8)
    codes, _ = quantize_finalize(v, q)
    err = np.abs(dequantize(codes, q) - v)
    assert err.max() <= step / 2 + 1e-12  # no clipping anywhere


def test_quantizer_state_validation():
    with pytest.raises(ValueError):
        QuantizerState(0.0, 8)
    with pytest.raises(ValueError):
        QuantizerState(0.1, 1)
    with pytest.raises(ValueError):
        QuantizerState(0.1, 17)


# ---------------------------------------------------------------------------
# Quantization-aware fine-tuning
# ---------------------------------------------------------------------------


def _report_for(scene, views, bit_range=BitRange(4, 8)):
    return compute_sensitivity_report(scene, views, bit_range)


def test_qat_zero_steps_is_plain_quantization():
    scene = make_synthetic_scene(6, 0, 2, seed=30)
    views = make_default_views(scene, 10, 10)
    targets = [render(scene, v) for v in views]
    report = _report_for(scene, views)
    updated, quantizers = quantization_aware_finetune(
        scene, views, targets, report, steps=0
    )
    assert updated is scene
    for name in ALLOCATED_GROUPS:
        q = quantizers[name]
        shift = 0.5 if name == "colors" else 0.0
        v = scene.group(name).astype(np.float64) - shift
        assert q.step_size == pytest.approx(max_abs_step_size(v, report.bits[name]))
        fq, _ = fake_quantize(v, q)
        codes, _ = quantize_finalize(v, q)
        np.testing.assert_array_equal(dequantize(codes, q), fq)


def _quantized_l1(sc, qs, views, targets):
    frame = {"positions": sc.positions[0].astype(np.float64)}
    for name in ALLOCATED_GROUPS:
        shift = 0.5 if name == "colors" else 0.0
        val = sc.group(name).astype(np.float64)
        val = val[0] if name in ("rotations", "colors") else val
        frame[name] = fake_quantize(val - shift, qs[name])[0] + shift
    img = render_frame(frame, sc.depth_order, views[0])
    return float(np.mean(np.abs(img - np.asarray(targets[0]))))


def test_qat_single_gaussian_color_fit():
    # One splat, colors quantized at 8 bits: after fitting, the rendered L1
    # error of the quantized render stays within half a step.
    scene = make_synthetic_scene(1, 0, 1, seed=31)
    views = make_default_views(scene, 12, 12)
    targets = [render(scene, v) for v in views]
    report = _report_for(scene, views, BitRange(8, 8))
    updated, quantizers = quantization_aware_finetune(
        scene, views, targets, report, steps=120, lr=0.05, step_lr=0.02
    )
    l1 = _quantized_l1(updated, quantizers, views, targets)
    assert l1 <= quantizers["colors"].step_size / 2 + 5e-3


def test_qat_recovers_perturbed_colors():
    # Targets come from the original scene; the input colors are shifted.
    # Fine-tuning must pull the quantized render back toward the targets.
    scene = make_synthetic_scene(8, 0, 1, seed=32)
    views = make_default_views(scene, 14, 14)
    targets = [render(scene, v) for v in views]
    rng = np.random.default_rng(33)
    off = scene.replace_groups(
        colors=np.clip(scene.colors + rng.uniform(-0.1, 0.1, scene.colors.shape), 0, 1)
    )
    report = _report_for(off, views, BitRange(8, 8))
    _, q0 = quantization_aware_finetune(off, views, targets, report, steps=0)
    base = _quantized_l1(off, q0, views, targets)
    updated, q1 = quantization_aware_finetune(
        off, views, targets, report, steps=400, lr=0.05, step_lr=0.02
    )
    tuned = _quantized_l1(updated, q1, views, targets)
    assert tuned < 0.5 * base


def test_qat_step_size_clamped_with_warning(caplog):
    import logging

    scene = make_synthetic_scene(2, 0, 1, seed=34)
    views = make_default_views(scene, 8, 8)
    targets = [np.zeros((8, 8, 3))]  # large residual drives big step gradients
    report = _report_for(scene, views)
    with caplog.at_level(logging.WARNING, logger="tc3dgs.quant"):
        _, quantizers = quantization_aware_finetune(
            scene, views, targets, report, steps=30, lr=0.0, step_lr=1e6
        )
    assert any("clamped" in r.message for r in caplog.records)
    assert all(q.step_size > 0 for q in quantizers.values())


def test_qat_deterministic():
    scene = make_synthetic_scene(5, 0, 2, seed=33)
    views = make_default_views(scene, 10, 10)
    targets = [render(scene, v) for v in views]
    report = _report_for(scene, views)
    a, qa = quantization_aware_finetune(scene, views, targets, report, steps=40, lr=0.5)
    b, qb = quantization_aware_finetune(scene, views, targets, report, steps=40, lr=0.5)
    np.testing.assert_array_equal(a.colors, b.colors)
    assert all(qa[k].step_size == qb[k].step_size for k in qa)
