"""Interval (time-binned) and packet-level feature tensors."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .traffic import Trace

CHANNELS = (
    "interval_dirs_up",
    "interval_dirs_down",
    "interval_dirs_sum",
    "interval_dirs_sub",
    "interval_size_up",
    "interval_size_down",
    "interval_size_sum",
    "interval_size_sub",
    "interval_cumul_norm",
)
DEFAULT_DT = 0.030
DEFAULT_BINS = 1200
DEFAULT_MAX_LEN = 4096

PACKET_ROWS = ("dirs", "iat", "sizes", "burst_edges")

_MAGIC = b"SSFT"
_HEADER = struct.Struct("<4sIId")


@dataclass(frozen=True, eq=False)
class IntervalTensor:
    data: np.ndarray  # (9, T) float64
    dt: float = DEFAULT_DT

    @property
    def bins(self) -> int:
        return self.data.shape[1]

    def channel(self, name: str) -> np.ndarray:
        return self.data[CHANNELS.index(name)]


@dataclass(frozen=True, eq=False)
class PacketTensor:
    data: np.ndarray  # (4, max_len) float64
    length: int  # populated prefix

    @property
    def max_len(self) -> int:
        return self.data.shape[1]

    def row(self, name: str) -> np.ndarray:
        return self.data[PACKET_ROWS.index(name)]


def interval_features(trace: Trace, dt: float = DEFAULT_DT, bins: int = DEFAULT_BINS,
                      origin: float = 0.0) -> IntervalTensor:
    """Bin a trace into ``bins`` half-open intervals of width ``dt`` from ``origin``.

    ``origin`` must be the clock zero shared by every trace that will be
    compared, not the trace's own first packet.
    """
    if dt <= 0 or bins < 1:
        raise ValueError("dt must be positive and bins >= 1")
    idx = np.floor((trace.timestamps - origin) / dt).astype(np.int64)
    keep = (idx >= 0) & (idx < bins)
    idx = idx[keep]
    d = trace.directions[keep]
    s = trace.sizes[keep]
    up = d > 0
    dirs_up = np.bincount(idx[up], minlength=bins).astype(np.float64)
    dirs_down = np.bincount(idx[~up], minlength=bins).astype(np.float64)
    size_up = np.bincount(idx[up], weights=s[up], minlength=bins)
    size_down = np.bincount(idx[~up], weights=s[~up], minlength=bins)
    total = size_up.sum() + size_down.sum()
    if total > 0:
        cumul = np.cumsum(size_up - size_down) / total
    else:
        cumul = np.zeros(bins)
    data = np.stack([dirs_up, dirs_down, dirs_up + dirs_down, dirs_up - dirs_down,
                     size_up, size_down, size_up + size_down, size_up - size_down, cumul])
    return IntervalTensor(data, dt)


def packet_features(trace: Trace, max_len: int = DEFAULT_MAX_LEN) -> PacketTensor:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    n = min(len(trace), max_len)
    d = trace.directions[:n].astype(np.float64)
    t = trace.timestamps[:n]
    data = np.zeros((len(PACKET_ROWS), max_len))
    data[0, :n] = d
    if n:
        data[1, 1:n] = np.diff(t)
        data[2, :n] = trace.sizes[:n] * d
        data[3, 1:n] = np.diff(d)
    return PacketTensor(data, n)


def save_features(tensor: IntervalTensor, path) -> None:
    """Flat binary: magic, channel count, bin count, dt, then row-major float32."""
    data = np.ascontiguousarray(tensor.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, data.shape[0], data.shape[1], tensor.dt))
        fh.write(data.tobytes())


def load_features(path) -> IntervalTensor:
    raw = Path(path).read_bytes()
    magic, channels, bins, dt = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a feature tensor file")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if data.size != channels * bins:
        raise ValueError(f"{path}: truncated feature tensor")
    return IntervalTensor(data.reshape(channels, bins).astype(np.float64), dt)
