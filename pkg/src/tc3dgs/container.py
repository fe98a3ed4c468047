"""Bit-packed .tc3d container: header, section table with CRCs, payloads.

Layout (little-endian):

    magic 'TC3D' | version u16 | flags u16 | N u32 | T u32 | N_pre u32
    eps f64 | tau f64 | max_kp u32
    per group (positions, rotations, colors, log_scales, opacity_logits):
        bits u8 | step f64 | shift f64
    section count u16, then per section: id u16 | offset u64 | length u64 | crc u32
    payload bytes, contiguous and in section-table order

flags: bit0 masking ran, bit1 payloads are quantized codes, bit2 dynamic
groups are keypoint sets. With quantization off, bits is the sentinel 32 and
payload values are raw float32. Keypoint sections hold row offsets (u32),
time indices (u16), then values. Decoding validates structure exhaustively
and raises ContainerDecodeError with the failing byte offset; encode of a
decoded container reproduces the input bytes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .scene import DYNAMIC_GROUPS, GROUP_DIMS, PARAM_GROUPS, STATIC_GROUPS

CONTAINER_MAGIC = b"TC3D"
CONTAINER_VERSION = 1
RAW_BITS_SENTINEL = 32

FLAG_MASKING = 1 << 0
FLAG_QUANTIZED = 1 << 1
FLAG_KEYPOINTS = 1 << 2

_FIXED = struct.Struct("<4sHHIIIddI")
_GROUP_ENTRY = struct.Struct("<Bdd")
_SECTION_COUNT = struct.Struct("<H")
_SECTION_ENTRY = struct.Struct("<HQQI")

SECTION_IDS = {
    "depth_order": 1,
    "log_scales": 2,
    "opacity_logits": 3,
    "positions": 10,
    "rotations": 11,
    "colors": 12,
}
SECTION_ORDER = ("depth_order", "log_scales", "opacity_logits") + DYNAMIC_GROUPS


class ContainerDecodeError(Exception):
    """Structured decode failure; offset points at the offending byte."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte {offset})")


@dataclass(frozen=True)
class GroupCodec:
    bits: int          # 2..16, or 32 for raw float32
    step_size: float
    shift: float

    @property
    def quantized(self) -> bool:
        return self.bits != RAW_BITS_SENTINEL

    @property
    def q_neg(self) -> int:
        return -(2 ** (self.bits - 1))

    @property
    def q_pos(self) -> int:
        return 2 ** (self.bits - 1) - 1


@dataclass(frozen=True)
class Payload:
    """Values of one group: int codes when quantized, raw float32 otherwise.

    Keypoint payloads carry the CSR structure; dense payloads leave both
    row_offsets and time_indices as None. Value arrays are flat.
    """

    values_codes: np.ndarray | None = None
    values_raw: np.ndarray | None = None
    row_offsets: np.ndarray | None = None
    time_indices: np.ndarray | None = None

    @property
    def is_keypoints(self) -> bool:
        return self.row_offsets is not None

    def value_count(self) -> int:
        arr = self.values_codes if self.values_codes is not None else self.values_raw
        return int(arr.size)


@dataclass(frozen=True)
class CompressedContainer:
    num_gaussians: int
    num_frames: int
    pre_prune_gaussians: int
    mask_threshold: float
    tolerance: float
    max_keypoints: int
    masking: bool
    quantized: bool
    keypoints: bool
    codecs: dict            # group -> GroupCodec
    depth_order: np.ndarray
    payloads: dict          # group -> Payload


def pack_codes(codes: np.ndarray, bits: int, q_neg: int) -> bytes:
    """LSB-first bit packing of offset codes, padded to a byte boundary."""
    u = (np.asarray(codes, dtype=np.int64).ravel() - q_neg).astype(np.uint32)
    if u.size == 0:
        return b""
    mat = ((u[:, None] >> np.arange(bits, dtype=np.uint32)) & 1).astype(np.uint8)
    return np.packbits(mat.ravel(), bitorder="little").tobytes()


def unpack_codes(data: bytes, count: int, bits: int, q_neg: int) -> np.ndarray:
    need = packed_size(count, bits)
    if len(data) != need:
        raise ValueError(f"packed payload has {len(data)} bytes, expected {need}")
    if count == 0:
        return np.zeros(0, dtype=np.int32)
    raw = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")[: count * bits]
    mat = raw.reshape(count, bits).astype(np.uint32)
    u = (mat << np.arange(bits, dtype=np.uint32)).sum(axis=1, dtype=np.uint64)
    return (u.astype(np.int64) + q_neg).astype(np.int32)


def packed_size(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


def _encode_payload(name: str, payload: Payload, codec: GroupCodec) -> bytes:
    parts = []
    if payload.is_keypoints:
        parts.append(payload.row_offsets.astype("<u4").tobytes())
        parts.append(payload.time_indices.astype("<u2").tobytes())
    if codec.quantized:
        parts.append(pack_codes(payload.values_codes, codec.bits, codec.q_neg))
    else:
        parts.append(np.asarray(payload.values_raw, dtype="<f4").tobytes())
    return b"".join(parts)


def encode_container(c: CompressedContainer) -> bytes:
    flags = (
        (FLAG_MASKING if c.masking else 0)
        | (FLAG_QUANTIZED if c.quantized else 0)
        | (FLAG_KEYPOINTS if c.keypoints else 0)
    )
    head = [
        _FIXED.pack(
            CONTAINER_MAGIC,
            CONTAINER_VERSION,
            flags,
            c.num_gaussians,
            c.num_frames,
            c.pre_prune_gaussians,
            c.mask_threshold,
            c.tolerance,
            c.max_keypoints,
        )
    ]
    for name in PARAM_GROUPS:
        codec = c.codecs[name]
        head.append(_GROUP_ENTRY.pack(codec.bits, codec.step_size, codec.shift))
    head.append(_SECTION_COUNT.pack(len(SECTION_ORDER)))

    sections = []
    for name in SECTION_ORDER:
        if name == "depth_order":
            blob = c.depth_order.astype("<u4").tobytes()
        else:
            blob = _encode_payload(name, c.payloads[name], c.codecs[name])
        sections.append((SECTION_IDS[name], blob))

    header_size = (
        _FIXED.size
        + _GROUP_ENTRY.size * len(PARAM_GROUPS)
        + _SECTION_COUNT.size
        + _SECTION_ENTRY.size * len(sections)
    )
    offset = header_size
    for sid, blob in sections:
        head.append(_SECTION_ENTRY.pack(sid, offset, len(blob), zlib.crc32(blob) & 0xFFFFFFFF))
        offset += len(blob)
    return b"".join(head) + b"".join(blob for _, blob in sections)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: struct.Struct):
        if self.pos + fmt.size > len(self.data):
            raise ContainerDecodeError("truncated header", self.pos)
        out = fmt.unpack_from(self.data, self.pos)
        self.pos += fmt.size
        return out


def _check(cond: bool, message: str, offset: int):
    if not cond:
        raise ContainerDecodeError(message, offset)


def decode_container(data: bytes) -> CompressedContainer:
    rd = _Reader(data)
    magic, version, flags, n, t, n_pre, eps, tau, max_kp = rd.take(_FIXED)
    _check(magic == CONTAINER_MAGIC, f"bad magic {magic!r}", 0)
    _check(version == CONTAINER_VERSION, f"unsupported version {version}", 4)
    _check(flags < 8, f"unknown flag bits {flags:#x}", 6)
    _check(t >= 1, f"invalid frame count {t}", 12)
    _check(t <= 0xFFFF, f"frame count {t} exceeds u16 time indices", 12)
    _check(n <= n_pre, f"gaussian count {n} exceeds pre-prune count {n_pre}", 8)
    _check(0.0 < eps < 1.0, f"mask threshold {eps} outside (0, 1)", 20)
    _check(np.isfinite(tau) and tau >= 0.0, f"invalid tolerance {tau}", 28)
    _check(max_kp >= 2, f"invalid max_keypoints {max_kp}", 36)
    quantized = bool(flags & FLAG_QUANTIZED)
    keypoints = bool(flags & FLAG_KEYPOINTS)

    codecs = {}
    for name in PARAM_GROUPS:
        at = rd.pos
        bits, step, shift = rd.take(_GROUP_ENTRY)
        if quantized:
            _check(2 <= bits <= 16, f"{name}: bits {bits} outside 2..16", at)
        else:
            _check(bits == RAW_BITS_SENTINEL, f"{name}: expected raw sentinel bits", at)
        _check(np.isfinite(step) and step > 0.0, f"{name}: invalid step size {step}", at)
        _check(np.isfinite(shift), f"{name}: invalid shift {shift}", at)
        codecs[name] = GroupCodec(bits, step, shift)

    (count,) = rd.take(_SECTION_COUNT)
    _check(count == len(SECTION_ORDER), f"expected {len(SECTION_ORDER)} sections, got {count}", rd.pos)
    entries = []
    for name in SECTION_ORDER:
        at = rd.pos
        sid, offset, length, crc = rd.take(_SECTION_ENTRY)
        _check(sid == SECTION_IDS[name], f"section id {sid} where {name} expected", at)
        entries.append((name, offset, length, crc, at))
    header_size = rd.pos

    expect = header_size
    for name, offset, length, crc, at in entries:
        _check(offset == expect, f"section {name} offset {offset}, expected {expect}", at)
        _check(offset + length <= len(data), f"section {name} overruns file", at)
        expect = offset + length
    _check(expect == len(data), f"file has {len(data)} bytes, sections end at {expect}", len(data) - 1 if data else 0)

    blobs = {}
    for name, offset, length, crc, at in entries:
        blob = data[offset : offset + length]
        _check(zlib.crc32(blob) & 0xFFFFFFFF == crc, f"section {name} CRC mismatch", offset)
        blobs[name] = (blob, offset)

    blob, at = blobs["depth_order"]
    _check(len(blob) == 4 * n, f"depth_order has {len(blob)} bytes, expected {4 * n}", at)
    order = np.frombuffer(blob, dtype="<u4").astype(np.int64)
    _check(
        bool(np.array_equal(np.sort(order), np.arange(n))),
        "depth_order is not a permutation",
        at,
    )

    payloads = {}
    for name in STATIC_GROUPS:
        blob, at = blobs[name]
        payloads[name] = _decode_values(name, blob, at, n * GROUP_DIMS[name], codecs[name])
    for name in DYNAMIC_GROUPS:
        blob, at = blobs[name]
        payloads[name] = _decode_dynamic(
            name, blob, at, n, t, GROUP_DIMS[name], codecs[name], keypoints, max_kp
        )

    return CompressedContainer(
        num_gaussians=n,
        num_frames=t,
        pre_prune_gaussians=n_pre,
        mask_threshold=eps,
        tolerance=tau,
        max_keypoints=max_kp,
        masking=bool(flags & FLAG_MASKING),
        quantized=quantized,
        keypoints=keypoints,
        codecs=codecs,
        depth_order=order,
        payloads=payloads,
    )


def _decode_values(name, blob, at, count, codec, offsets=None, times=None):
    if codec.quantized:
        try:
            codes = unpack_codes(blob, count, codec.bits, codec.q_neg)
        except ValueError as e:
            raise ContainerDecodeError(f"section {name}: {e}", at) from e
        return Payload(values_codes=codes, row_offsets=offsets, time_indices=times)
    _check(len(blob) == 4 * count, f"section {name}: {len(blob)} bytes, expected {4 * count}", at)
    raw = np.frombuffer(blob, dtype="<f4")
    _check(bool(np.all(np.isfinite(raw))), f"section {name}: non-finite values", at)
    return Payload(values_raw=raw, row_offsets=offsets, time_indices=times)


def _decode_dynamic(name, blob, at, n, t, dim, codec, keypoints, max_kp):
    if not keypoints:
        return _decode_values(name, blob, at, t * n * dim, codec)
    rows = n * dim
    off_bytes = 4 * (rows + 1)
    _check(len(blob) >= off_bytes, f"section {name}: truncated row offsets", at)
    offsets = np.frombuffer(blob[:off_bytes], dtype="<u4").astype(np.int64)
    _check(offsets[0] == 0, f"section {name}: row offsets must start at 0", at)
    counts = np.diff(offsets)
    _check(bool(np.all(counts >= 1)), f"section {name}: empty keypoint row", at)
    _check(
        bool(np.all(counts <= min(max_kp, t))),
        f"section {name}: row exceeds keypoint budget",
        at,
    )
    total = int(offsets[-1])
    ti_bytes = 2 * total
    _check(
        len(blob) >= off_bytes + ti_bytes, f"section {name}: truncated time indices", at
    )
    times = np.frombuffer(blob[off_bytes : off_bytes + ti_bytes], dtype="<u2").astype(np.int64)
    _check(bool(times.size == 0 or times.max() <= t - 1), f"section {name}: time index out of range", at)
    for r in range(rows):
        row = times[offsets[r] : offsets[r + 1]]
        ok = (
            (row.size == 1 and row[0] == 0)
            if t == 1
            else (row[0] == 0 and row[-1] == t - 1 and bool(np.all(np.diff(row) > 0)))
        )
        _check(bool(ok), f"section {name}: malformed keypoint row {r}", at)
    return _decode_values(
        name, blob[off_bytes + ti_bytes :], at, total, codec, offsets=offsets, times=times
    )
