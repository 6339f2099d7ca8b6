"""Binary on-disk formats. Everything is little-endian and byte-stable.

Checkpoint ("SLDCKPT1"):
    magic[8] | header_len u32 | header JSON utf-8 | n_tensors u32 |
    repeat: name_len u32 | name utf-8 | rank u32 | extents u32[rank] |
            payload f32[prod(extents)] row-major

The header carries the network config, schedule parameters, normalization
stats, step and seed; unknown keys are preserved across load/save.

Shape file ("SLDSHP1"):
    magic[7] | count u32 | d_s u32 | flags u8 (bit0: labels present) |
    repeat per shape: N u32 | extrinsics f32[16N] | intrinsics f32[N*d_s] |
                      labels u16[N] | caption_len u16 | caption u16[len]
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .denoiser import DenoiserConfig, ModelParams
from .parts import EXT_DIM, ExtrinsicStats, PartSet
from .tensor import Tensor
from .trainer import MlpConfig

__all__ = [
    "FormatError",
    "CKPT_MAGIC",
    "SHAPE_MAGIC",
    "save_checkpoint",
    "load_checkpoint",
    "save_shapes",
    "load_shapes",
]

CKPT_MAGIC = b"SLDCKPT1"
SHAPE_MAGIC = b"SLDSHP1"


class FormatError(ValueError):
    """Malformed or truncated file."""


def _read(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}")
    return data


def _read_u32(f, what: str) -> int:
    return struct.unpack("<I", _read(f, 4, what))[0]


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, header: dict | None = None) -> None:
    """Write params plus a JSON header; tensor payloads are exact f32 bytes."""
    cfg = params.config
    head = dict(header or {})
    if isinstance(cfg, DenoiserConfig):
        head["arch"] = "set"
    elif isinstance(cfg, MlpConfig):
        head["arch"] = "mlp"
    else:
        raise FormatError(f"unknown config type {type(cfg).__name__}")
    head["config"] = cfg.to_json()
    head["stats"] = None if params.stats is None else params.stats.to_json()
    head_bytes = json.dumps(head, sort_keys=True).encode("utf-8")

    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(head_bytes)))
        f.write(head_bytes)
        names = params.names()
        f.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(params[name].data, dtype=np.float32)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for ext in arr.shape:
                f.write(struct.pack("<I", ext))
            f.write(arr.astype("<f4", copy=False).tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Read params and the full header (unknown keys included)."""
    with open(path, "rb") as f:
        if _read(f, len(CKPT_MAGIC), "magic") != CKPT_MAGIC:
            raise FormatError("not a checkpoint file (bad magic)")
        head = json.loads(_read(f, _read_u32(f, "header length"),
                                "header").decode("utf-8"))
        if head.get("arch") == "set":
            cfg = DenoiserConfig.from_json(head["config"])
        elif head.get("arch") == "mlp":
            cfg = MlpConfig.from_json(head["config"])
        else:
            raise FormatError(f"unknown arch {head.get('arch')!r}")
        stats = (None if head.get("stats") is None
                 else ExtrinsicStats.from_json(head["stats"]))

        tensors = {}
        for _ in range(_read_u32(f, "tensor count")):
            name = _read(f, _read_u32(f, "name length"),
                         "tensor name").decode("utf-8")
            rank = _read_u32(f, "rank")
            shape = tuple(_read_u32(f, "extent") for _ in range(rank))
            n = int(np.prod(shape)) if shape else 1
            payload = _read(f, 4 * n, f"payload of {name}")
            arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
            tensors[name] = Tensor(arr.copy(), requires_grad=True)
        if f.read(1):
            raise FormatError("trailing bytes after tensor table")
    return ModelParams(cfg, tensors, stats), head


# -- shape files ---------------------------------------------------------------


def save_shapes(path, shapes: list, captions=None) -> None:
    """Write a list of PartSets (+ optional caption token ids)."""
    if not shapes:
        raise FormatError("refusing to write an empty shape file")
    d_s = shapes[0].d_s
    labeled = shapes[0].labels is not None
    for s in shapes:
        if s.d_s != d_s:
            raise FormatError("all shapes in a file must share d_s")
        if (s.labels is not None) != labeled:
            raise FormatError("all shapes must agree on label presence")
    if captions is not None and len(captions) != len(shapes):
        raise FormatError("need one caption entry per shape")

    with open(path, "wb") as f:
        f.write(SHAPE_MAGIC)
        f.write(struct.pack("<IIB", len(shapes), d_s, 1 if labeled else 0))
        for i, s in enumerate(shapes):
            n = s.n_parts
            f.write(struct.pack("<I", n))
            f.write(s.extrinsics.astype("<f4").tobytes())
            f.write(s.intrinsics.astype("<f4").tobytes())
            labels = (s.labels if labeled
                      else np.zeros(n, dtype=np.int64))
            f.write(labels.astype("<u2").tobytes())
            cap = [] if captions is None else list(captions[i])
            f.write(struct.pack("<H", len(cap)))
            f.write(np.asarray(cap, dtype="<u2").tobytes())


def load_shapes(path) -> tuple[list, list]:
    """Read back (shapes, caption id lists)."""
    shapes = []
    captions = []
    with open(path, "rb") as f:
        if _read(f, len(SHAPE_MAGIC), "magic") != SHAPE_MAGIC:
            raise FormatError("not a shape file (bad magic)")
        count, d_s, flags = struct.unpack("<IIB", _read(f, 9, "file header"))
        labeled = bool(flags & 1)
        for _ in range(count):
            n = _read_u32(f, "part count")
            ext = np.frombuffer(_read(f, 4 * EXT_DIM * n, "extrinsics"),
                                dtype="<f4").reshape(n, EXT_DIM)
            intr = np.frombuffer(_read(f, 4 * d_s * n, "intrinsics"),
                                 dtype="<f4").reshape(n, d_s)
            labels = np.frombuffer(_read(f, 2 * n, "labels"), dtype="<u2")
            (cap_len,) = struct.unpack("<H", _read(f, 2, "caption length"))
            cap = np.frombuffer(_read(f, 2 * cap_len, "caption"), dtype="<u2")
            shapes.append(PartSet(
                ext.copy(), intr.copy(),
                labels.astype(np.int64) if labeled else None))
            captions.append(cap.astype(np.int64).tolist())
        if f.read(1):
            raise FormatError("trailing bytes after last shape")
    return shapes, captions
