"""Binary prediction files ("BATP") and parameter checkpoints.

BATP layout, little-endian:
    b"BATP" | u16 version | u32 N | f32[N*17] P (row-major)
    | u32 instance count | per instance: f32[17] class dist, f32 score, f32[N] mask

Checkpoint layout, little-endian:
    b"BATC" | u16 version | u32 json length | utf-8 json config
    | u32 array count | per array: u16 name length, utf-8 name, u8 ndim,
      u32[ndim] shape, f32[prod(shape)] data
"""

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import List, Tuple

import numpy as np

from ..head import InstancePrediction

BATP_MAGIC = b"BATP"
BATP_VERSION = 1
CKPT_MAGIC = b"BATC"
CKPT_VERSION = 1
N_COLUMNS = 17


class FormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def floats(self, count, what):
        return np.frombuffer(self.take(4 * count, what), dtype="<f4").copy()

    def finish(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes", self.pos)


def encode_prediction(probs, instances: List[InstancePrediction]) -> bytes:
    probs = np.asarray(probs)
    n = probs.shape[0]
    if probs.shape != (n, N_COLUMNS):
        raise ValueError(f"P must be N x {N_COLUMNS}, got {probs.shape}")
    parts = [BATP_MAGIC, struct.pack("<HI", BATP_VERSION, n), probs.astype("<f4").tobytes()]
    parts.append(struct.pack("<I", len(instances)))
    for inst in instances:
        dist = np.asarray(inst.class_dist)
        mask = np.asarray(inst.mask_prob)
        if dist.shape != (N_COLUMNS,) or mask.shape != (n,):
            raise ValueError("instance shapes do not match the prediction")
        parts += [dist.astype("<f4").tobytes(), struct.pack("<f", inst.score), mask.astype("<f4").tobytes()]
    return b"".join(parts)


def decode_prediction(buf: bytes) -> Tuple[np.ndarray, List[InstancePrediction]]:
    r = _Reader(buf)
    if r.take(4, "magic") != BATP_MAGIC:
        raise FormatError("bad magic, not a BATP file", 0)
    version, n = r.unpack("<HI", "header")
    if version != BATP_VERSION:
        raise FormatError(f"unsupported BATP version {version}", 4)
    probs = r.floats(n * N_COLUMNS, "probability matrix").reshape(n, N_COLUMNS)
    (count,) = r.unpack("<I", "instance count")
    instances = []
    for i in range(count):
        dist = r.floats(N_COLUMNS, f"instance {i} class distribution")
        (score,) = r.unpack("<f", f"instance {i} score")
        mask = r.floats(n, f"instance {i} mask")
        instances.append(InstancePrediction(mask, dist, float(np.float32(score))))
    r.finish()
    return probs, instances


def write_prediction(scan_id: str, probs, instances, path) -> Path:
    """Write a BATP file; a directory ``path`` gets ``<scan_id>.batp``."""
    path = Path(path)
    if path.is_dir():
        path = path / f"{scan_id}.batp"
    path.write_bytes(encode_prediction(probs, instances))
    return path


def read_prediction(path):
    """Returns (scan_id, P, instances); the scan id is the file stem."""
    path = Path(path)
    probs, instances = decode_prediction(path.read_bytes())
    return path.name.split(".")[0], probs, instances


def encode_checkpoint(arrays, config: dict) -> bytes:
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(cfg)), cfg, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes):
    r = _Reader(buf)
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError("bad magic, not a checkpoint", 0)
    version, cfg_len = r.unpack("<HI", "header")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    start = r.pos
    try:
        config = json.loads(r.take(cfg_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt config json ({exc})", start) from exc
    (count,) = r.unpack("<I", "array count")
    arrays = OrderedDict()
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"{name} ndim")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        arrays[name] = r.floats(int(np.prod(shape, dtype=np.int64)), f"{name} data").reshape(shape)
    r.finish()
    return arrays, config


def save_checkpoint(path, arrays, config: dict) -> Path:
    path = Path(path)
    path.write_bytes(encode_checkpoint(arrays, config))
    return path


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
