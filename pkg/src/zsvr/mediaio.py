"""Bit-exact readers/writers for frames, flows, raw tensors, and metric reports.

Formats:
  * PNM P5/P6 (binary, maxval 255) for frame sequences
  * Middlebury .flo (magic float 202021.25, little-endian) for flow fields
  * RawTensorFile: b"RTF1" | u32 rank | u32 dims[rank] | f32 payload, all LE
  * JSON metric reports with stable key order

Readers reject malformed inputs instead of sanitizing them.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

FLO_MAGIC = 202021.25
RTF_MAGIC = b"RTF1"
PNM_SUFFIXES = (".pgm", ".ppm", ".pnm")


class FormatError(ValueError):
    """A file does not conform to its declared format."""


@dataclass
class FrameSequence:
    """Ordered RGB frames with values in [0, 1]."""

    frames: list[np.ndarray]
    frame_rate: float | None = None

    def __post_init__(self):
        if not self.frames:
            raise ValueError("FrameSequence requires at least one frame")
        shape = self.frames[0].shape
        if len(shape) != 3 or shape[2] != 3 or shape[0] < 1 or shape[1] < 1:
            raise ValueError(f"frames must have shape (h, w, 3), got {shape}")
        for i, f in enumerate(self.frames):
            if f.shape != shape:
                raise ValueError(
                    f"frame {i} has shape {f.shape}, expected {shape}"
                )
            if not np.isfinite(f).all() or f.min() < 0.0 or f.max() > 1.0:
                raise ValueError(f"frame {i} has values outside [0, 1]")

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames[0].shape


def _read_pnm(path: str) -> np.ndarray:
    """Decode one binary PNM file into an (h, w, 3) float array in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()

    # Header fields are whitespace-separated; '#' starts a comment to EOL.
    pos = 0

    def next_token():
        nonlocal pos
        while pos < len(data):
            ch = data[pos : pos + 1]
            if ch == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PNM header")
        return data[start:pos]

    magic = next_token()
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported PNM magic {magic!r}")
    try:
        width = int(next_token())
        height = int(next_token())
        maxval = int(next_token())
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PNM header") from exc
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval

    channels = 1 if magic == b"P5" else 3
    expected = width * height * channels
    payload = data[pos:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    img = raw.astype(np.float64) / 255.0
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def read_frames(path: str) -> FrameSequence:
    """Read all PNM files in a directory, in lexicographic filename order."""
    names = sorted(
        n
        for n in os.listdir(path)
        if os.path.splitext(n)[1].lower() in PNM_SUFFIXES
    )
    if not names:
        raise FormatError(f"no frames found in {path}")
    frames = [_read_pnm(os.path.join(path, n)) for n in names]
    shape = frames[0].shape
    for name, f in zip(names, frames):
        if f.shape != shape:
            raise ValueError(
                f"{name}: frame shape {f.shape} differs from first frame {shape}"
            )
    return FrameSequence(frames)


def write_frames(seq: FrameSequence, path: str) -> None:
    """Write a FrameSequence as P6 files frame_0000.ppm, frame_0001.ppm, ..."""
    os.makedirs(path, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        raw = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
        h, w, _ = raw.shape
        header = f"P6\n{w} {h}\n255\n".encode("ascii")
        with open(os.path.join(path, f"frame_{i:04d}.ppm"), "wb") as fh:
            fh.write(header)
            fh.write(raw.tobytes())


def read_flo(path: str) -> np.ndarray:
    """Read a Middlebury .flo file into an (h, w, 2) float32 field."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise FormatError(f"{path}: too short for a .flo header")
    magic = struct.unpack("<f", data[0:4])[0]
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad .flo magic {magic}")
    w, h = struct.unpack("<ii", data[4:12])
    if w < 1 or h < 1:
        raise FormatError(f"{path}: bad .flo dimensions {w}x{h}")
    expected = 12 + 8 * w * h
    if len(data) != expected:
        raise FormatError(
            f"{path}: payload is {len(data) - 12} bytes, expected {8 * w * h}"
        )
    flow = np.frombuffer(data[12:], dtype="<f4").reshape(h, w, 2)
    return flow.copy()


def write_flo(flow: np.ndarray, path: str) -> None:
    """Write an (h, w, 2) field as a Middlebury .flo file."""
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must have shape (h, w, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        fh.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_raw_tensor(path: str) -> np.ndarray:
    """Read a RawTensorFile into a float32 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != RTF_MAGIC:
        raise FormatError(f"{path}: bad RawTensorFile magic")
    rank = struct.unpack("<I", data[4:8])[0]
    header_end = 8 + 4 * rank
    if len(data) < header_end:
        raise FormatError(f"{path}: truncated RawTensorFile dims")
    dims = struct.unpack(f"<{rank}I", data[8:header_end])
    count = int(np.prod(dims)) if rank else 1
    if len(data) != header_end + 4 * count:
        raise FormatError(
            f"{path}: payload is {len(data) - header_end} bytes, "
            f"expected {4 * count}"
        )
    return np.frombuffer(data[header_end:], dtype="<f4").reshape(dims).copy()


def write_raw_tensor(arr: np.ndarray, path: str) -> None:
    """Write an array as a RawTensorFile (float32, little-endian)."""
    arr = np.asarray(arr)
    with open(path, "wb") as fh:
        fh.write(RTF_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _mean_or_none(values):
    if not values:
        return None
    return float(np.mean([float(v) for v in values]))


def _json_value(x, label: str):
    """Map a metric value to JSON; +inf is a legal PSNR sentinel, NaN is a bug."""
    x = float(x)
    if math.isnan(x):
        raise ValueError(f"non-finite value in {label}")
    if math.isinf(x):
        if x > 0 and label.startswith("psnr"):
            return "inf"
        raise ValueError(f"non-finite value in {label}")
    return x


def report_to_dict(report) -> dict:
    """Serialize a MetricsReport-shaped object to a stable-order dict."""
    out = {}
    for key, items_key in (
        ("psnr", "per_frame"),
        ("ssim", "per_frame"),
        ("e_warp", "per_pair"),
        ("e_inter", "per_triple"),
    ):
        values = list(getattr(report, key))
        block = {
            items_key: [_json_value(v, key) for v in values],
            "mean": _json_value(np.mean(values), key) if values else None,
        }
        if key == "e_warp":
            block["mean_x1000"] = (
                _json_value(1000.0 * np.mean(values), key) if values else None
            )
        out[key] = block
    out["metadata"] = dict(getattr(report, "metadata", {}) or {})
    return out


def write_report(report, path: str) -> None:
    """Write a metrics report as JSON with stable key order."""
    text = json.dumps(report_to_dict(report), indent=2)
    with open(path, "w") as fh:
        fh.write(text + "\n")
