"""Binary dataset and checkpoint formats.

Dataset (little-endian)::

    magic "PADS" | u16 version | u16 T | u16 H | u16 W | u16 L | u16 reserved | u32 count
    count x record:
        u32 timestamp | u32 episode | u8 flags | 3 f64 pose (x, y, heading)
        H*W u8 image | L f32 lidar | T*2 f64 waypoints | T u8 labels

Checkpoint (little-endian)::

    magic "PAAD" | u16 version | u32 n | n bytes UTF-8 JSON config
    u32 count, then count x tensor:
        u16 name length | name | u8 ndim | ndim x u32 dims | prod(dims) f32 data
    u8 has_optimizer; if 1: u32 adam step, then two tensor tables (first, second moments)
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import ConfigurationError, LayerParams
from .fieldsim import ObservationFrame
from .geometry import PlannedPath
from .model import Paad, PaadConfig

DATASET_MAGIC = b"PADS"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"PAAD"
CHECKPOINT_VERSION = 1

_HEADER = struct.Struct("<4sHHHHHHI")
_REC_HEAD = struct.Struct("<IIB3d")


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


@dataclass
class DatasetHeader:
    version: int
    horizon: int
    image_h: int
    image_w: int
    lidar_len: int
    count: int


@dataclass
class Dataset:
    header: DatasetHeader
    frames: list[ObservationFrame]
    episodes: np.ndarray       # (count,) episode id per frame

    def __len__(self):
        return len(self.frames)


def write_dataset(path, frames, episodes=None, horizon=None, image_shape=None, lidar_len=1081):
    """Write frames; an empty list produces a header-only file."""
    frames = list(frames)
    if episodes is None:
        episodes = [0] * len(frames)
    if frames:
        horizon = horizon or len(frames[0].labels)
        image_shape = image_shape or frames[0].image.shape
        lidar_len = len(frames[0].lidar)
    horizon = horizon or 10
    H, W = image_shape or (60, 80)
    buf = io.BytesIO()
    buf.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, horizon, H, W, lidar_len, 0, len(frames)))
    for f, ep in zip(frames, episodes):
        if f.image.shape != (H, W) or f.lidar.shape != (lidar_len,) or len(f.labels) != horizon \
                or f.path.waypoints.shape != (horizon, 2):
            raise FormatError(f"frame {f.timestamp} does not match the dataset shapes")
        buf.write(_REC_HEAD.pack(f.timestamp, int(ep), f.flags, *map(float, f.path.pose)))
        buf.write(np.ascontiguousarray(f.image, dtype=np.uint8).tobytes())
        buf.write(np.ascontiguousarray(f.lidar, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(f.path.waypoints, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(f.labels, dtype=np.uint8).tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("dataset file shorter than its header")
    magic, version, T, H, W, L, _, count = _HEADER.unpack_from(data, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    rec = _REC_HEAD.size + H * W + 4 * L + 16 * T + T
    if len(data) != _HEADER.size + count * rec:
        raise FormatError(f"dataset declares {count} records but holds {len(data) - _HEADER.size} "
                          f"bytes of records ({rec} bytes each)")
    frames, episodes = [], np.empty(count, dtype=np.int64)
    off = _HEADER.size
    for i in range(count):
        ts, ep, flags, px, py, ph = _REC_HEAD.unpack_from(data, off)
        off += _REC_HEAD.size
        img = np.frombuffer(data, np.uint8, H * W, off).reshape(H, W).copy()
        off += H * W
        lidar = np.frombuffer(data, "<f4", L, off).astype(np.float32)
        off += 4 * L
        wp = np.frombuffer(data, "<f8", 2 * T, off).reshape(T, 2).astype(np.float64)
        off += 16 * T
        labels = np.frombuffer(data, np.uint8, T, off).copy()
        off += T
        frames.append(ObservationFrame(img, lidar, PlannedPath(wp, (px, py, ph)), labels, ts, flags))
        episodes[i] = ep
    return Dataset(DatasetHeader(version, T, H, W, L, count), frames, episodes)


# ------------------------------------------------------------- checkpoint

def _write_table(buf, tensors: dict[str, np.ndarray]):
    buf.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}I", *value.shape))
        buf.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def _read_table(data, off):
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, "<f4", size, off).reshape(shape).astype(np.float32)
        off += 4 * size
    return out, off


def save_checkpoint(path, model: Paad, include_optimizer: bool = True) -> None:
    buf = io.BytesIO()
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf.write(CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(cfg)) + cfg)
    _write_table(buf, model.params.values)
    if include_optimizer:
        buf.write(struct.pack("<BI", 1, model.params.step))
        _write_table(buf, model.params.m)
        _write_table(buf, model.params.v)
    else:
        buf.write(struct.pack("<B", 0))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Paad:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}")
    version, n = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 10
    config = PaadConfig.from_dict(json.loads(data[off:off + n].decode()))
    off += n
    values, off = _read_table(data, off)
    expected = Paad(config, params=LayerParams()).parameter_shapes()
    if set(values) != set(expected):
        raise ConfigurationError(
            f"checkpoint tensors differ from the configuration: "
            f"missing {sorted(set(expected) - set(values))[:3]}, "
            f"extra {sorted(set(values) - set(expected))[:3]}")
    for name, shape in expected.items():
        if values[name].shape != tuple(shape):
            raise ConfigurationError(f"{name}: stored {values[name].shape}, config needs {shape}")
    params = LayerParams()
    for name in expected:
        params.add(name, values[name])
    (has_opt,) = struct.unpack_from("<B", data, off)
    off += 1
    if has_opt:
        (params.step,) = struct.unpack_from("<I", data, off)
        off += 4
        m, off = _read_table(data, off)
        v, off = _read_table(data, off)
        for name in expected:
            params.m[name] = m[name]
            params.v[name] = v[name]
    return Paad(config, params)
