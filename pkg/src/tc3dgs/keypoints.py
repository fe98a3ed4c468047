"""Greedy keypoint selection for scalar time series and batch CSR packing.

A trajectory of length T is reduced to a sparse set of (time, value) knots:
starting from the two endpoints, the sample with the highest squared
reconstruction error is added until the sequence MSE falls below a tolerance
or a hard keypoint budget is reached. Reconstruction interpolates linearly
between knots and is exact at them.
"""

from __future__ import annotations

import os
from bisect import bisect_left, insort
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class KeypointConfig:
    tolerance: float = 1e-5        # max allowable sequence MSE
    max_keypoints: int = 30

    def __post_init__(self):
        if self.max_keypoints < 2:
            raise ValueError("max_keypoints must be >= 2")
        if not (self.tolerance >= 0.0):
            raise ValueError("tolerance must be >= 0")


# Profiles mirroring the short-sequence and long-sequence operating points.
PANOPTIC_PROFILE = KeypointConfig(tolerance=1e-5, max_keypoints=30)
LONG_SEQUENCE_PROFILE = KeypointConfig(tolerance=1e-7, max_keypoints=60)


@dataclass(frozen=True)
class KeypointSet:
    """CSR-like layout: row r covers time_indices[row_offsets[r]:row_offsets[r+1]]."""

    row_offsets: np.ndarray    # (rows + 1,) int64, non-decreasing
    time_indices: np.ndarray   # (total,) int64, strictly increasing per row
    values: np.ndarray         # (total,) float64
    num_frames: int

    def __post_init__(self):
        off = np.asarray(self.row_offsets, dtype=np.int64)
        ti = np.asarray(self.time_indices, dtype=np.int64)
        vals = np.asarray(self.values, dtype=np.float64)
        t = int(self.num_frames)
        if t < 1:
            raise ValueError("num_frames must be >= 1")
        if off.ndim != 1 or off.size < 1 or off[0] != 0:
            raise ValueError("row_offsets must start at 0")
        if np.any(np.diff(off) < 0):
            raise ValueError("row_offsets must be non-decreasing")
        if off[-1] != ti.size or ti.size != vals.size:
            raise ValueError("row_offsets end must match index/value count")
        if ti.size and (ti.min() < 0 or ti.max() > t - 1):
            raise ValueError("time_indices outside [0, T-1]")
        for r in range(off.size - 1):
            lo, hi = off[r], off[r + 1]
            row = ti[lo:hi]
            if row.size == 0:
                raise ValueError(f"row {r} has no keypoints")
            if np.any(np.diff(row) <= 0):
                raise ValueError(f"row {r} time indices not strictly increasing")
            if t == 1:
                if row[0] != 0:
                    raise ValueError(f"row {r} must hold index 0 for T=1")
            elif row[0] != 0 or row[-1] != t - 1:
                raise ValueError(f"row {r} missing endpoint keypoints")
        for name, arr in (("row_offsets", off), ("time_indices", ti), ("values", vals)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "num_frames", t)

    @property
    def num_rows(self) -> int:
        return self.row_offsets.size - 1

    def row(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.row_offsets[r], self.row_offsets[r + 1]
        return self.time_indices[lo:hi], self.values[lo:hi]

    def counts(self) -> np.ndarray:
        return np.diff(self.row_offsets)


def _fill_segment(out: np.ndarray, values: np.ndarray, i0: int, i1: int) -> None:
    """Linear interpolation of values over [i0, i1]; endpoints copied exactly."""
    v0 = values[i0]
    v1 = values[i1]
    ts = np.arange(i0 + 1, i1, dtype=np.float64)
    w = (ts - i0) / (i1 - i0)
    out[i0 + 1 : i1] = v0 + (v1 - v0) * w
    out[i0] = v0
    out[i1] = v1


def select_keypoints(values, cfg: KeypointConfig) -> np.ndarray:
    """Pick knot indices for one trajectory; returns a sorted index array.

    Exit guarantees: sequence MSE <= tolerance, or the knot count reached
    max_keypoints, or every index became a knot. The budget check happens
    before each insertion, so a saturated result may still exceed the
    tolerance. Ties on the per-index error argmax break to the lowest index.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("values must be a non-empty 1-D sequence")
    t = v.size
    if t == 1:
        return np.zeros(1, dtype=np.int64)
    knots = [0, t - 1]
    recon = np.empty(t, dtype=np.float64)
    _fill_segment(recon, v, 0, t - 1)
    err = v - recon
    err = err * err
    for _ in range(cfg.max_keypoints - 2):
        mse = err.sum() / t
        if mse <= cfg.tolerance or len(knots) >= cfg.max_keypoints:
            break
        j = int(np.argmax(err))
        pos = bisect_left(knots, j)
        left, right = knots[pos - 1], knots[pos]
        insort(knots, j)
        _fill_segment(recon, v, left, j)
        _fill_segment(recon, v, j, right)
        seg = v[left : right + 1] - recon[left : right + 1]
        err[left : right + 1] = seg * seg
    return np.asarray(knots, dtype=np.int64)


def interpolate(indices, knot_values, num_frames: int) -> np.ndarray:
    """Reconstruct a length-T trajectory from sorted knots; exact at knots."""
    idx = np.asarray(indices, dtype=np.int64)
    vals = np.asarray(knot_values, dtype=np.float64)
    t = int(num_frames)
    if idx.ndim != 1 or idx.shape != vals.shape:
        raise ValueError("indices and values must be 1-D and the same length")
    if idx.size == 0:
        raise ValueError("at least one keypoint required")
    if np.any(np.diff(idx) <= 0):
        raise ValueError("keypoint indices must be strictly increasing")
    if t == 1:
        if idx.size != 1 or idx[0] != 0:
            raise ValueError("T=1 requires the single keypoint index 0")
        return vals.copy()
    if idx[0] != 0 or idx[-1] != t - 1 or idx.max() > t - 1:
        raise ValueError("keypoints must span indices 0 and T-1")
    out = np.empty(t, dtype=np.float64)
    full = np.empty(t, dtype=np.float64)
    full[idx] = vals
    for a, b in zip(idx[:-1], idx[1:]):
        _fill_segment(out, full, int(a), int(b))
    return out


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("TC3DGS_THREADS", "1")))
    except ValueError:
        return 1


def batch_select(dynamics: np.ndarray, cfg: KeypointConfig) -> KeypointSet:
    """Run selection over every scalar sequence of a (T, N, D) tensor.

    Rows are ordered gaussian-major, dimension-minor (row = n * D + d); each
    row is independent, so chunks may be processed by worker threads
    (TC3DGS_THREADS) without affecting the packed result.
    """
    dyn = np.asarray(dynamics, dtype=np.float64)
    if dyn.ndim != 3:
        raise ValueError("dynamics must have shape (T, N, D)")
    t, n, d = dyn.shape
    rows = dyn.transpose(1, 2, 0).reshape(n * d, t)

    def run(row_range):
        return [select_keypoints(rows[r], cfg) for r in row_range]

    workers = _worker_count()
    if workers > 1 and rows.shape[0] > 1:
        from concurrent.futures import ThreadPoolExecutor

        chunks = np.array_split(np.arange(rows.shape[0]), workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
        per_row = [idx for part in parts for idx in part]
    else:
        per_row = run(range(rows.shape[0]))

    offsets = np.zeros(n * d + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([idx.size for idx in per_row])
    time_indices = np.concatenate(per_row) if per_row else np.empty(0, dtype=np.int64)
    values = (
        np.concatenate([rows[r][idx] for r, idx in enumerate(per_row)])
        if per_row
        else np.empty(0, dtype=np.float64)
    )
    return KeypointSet(
        row_offsets=offsets, time_indices=time_indices, values=values, num_frames=t
    )


def reconstruct(kset: KeypointSet, shape: tuple[int, int, int]) -> np.ndarray:
    """Inverse of batch_select: rebuild the dense (T, N, D) tensor."""
    t, n, d = shape
    if kset.num_rows != n * d:
        raise ValueError(f"keypoint set has {kset.num_rows} rows, shape needs {n * d}")
    if kset.num_frames != t:
        raise ValueError(f"keypoint set covers {kset.num_frames} frames, shape needs {t}")
    rows = np.empty((n * d, t), dtype=np.float64)
    for r in range(n * d):
        idx, vals = kset.row(r)
        rows[r] = interpolate(idx, vals, t)
    return rows.reshape(n, d, t).transpose(2, 0, 1)
