"""Packet traces, burst segmentation and the empirical burst model.

A :class:`Trace` stores its packets column-wise (timestamps, directions,
sizes) as numpy arrays; :attr:`Trace.packets` gives the row view as
:class:`PacketRecord` tuples when that is more convenient.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

UP = 1
DOWN = -1

# 97th percentile of SSH inter-packet delays in the reference CTF corpus
DEFAULT_GAP_THRESHOLD = 0.0065

CSV_HEADER = ("timestamp_s", "direction", "size_bytes")


class TraceError(ValueError):
    """Raised for malformed or empty traces."""


class EmptyTraceError(TraceError):
    pass


class TraceParseError(TraceError):
    def __init__(self, path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line


class PacketRecord(NamedTuple):
    timestamp: float
    direction: int  # +1 upstream, -1 downstream
    size: int


@dataclass(frozen=True, eq=False)
class Trace:
    """Ordered packets seen at one capture point.

    ``dummy`` is an optional provenance mask set by chaff padding. It is never
    written to disk.
    """

    timestamps: np.ndarray
    directions: np.ndarray
    sizes: np.ndarray
    capture_point: str = ""
    dummy: np.ndarray | None = None

    def __post_init__(self):
        t = np.ascontiguousarray(self.timestamps, dtype=np.float64)
        d = np.ascontiguousarray(self.directions, dtype=np.int8)
        s = np.ascontiguousarray(self.sizes, dtype=np.int64)
        if not (t.ndim == d.ndim == s.ndim == 1 and len(t) == len(d) == len(s)):
            raise TraceError("timestamps, directions and sizes must be 1-d and equally long")
        if len(t):
            if np.any(np.diff(t) < 0):
                raise TraceError("timestamps must be nondecreasing")
            if t[0] < 0 or not np.all(np.isfinite(t)):
                raise TraceError("timestamps must be finite and >= 0")
            if np.any((d != UP) & (d != DOWN)):
                raise TraceError("direction must be +1 or -1")
            if np.any(s < 1):
                raise TraceError("size must be >= 1")
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "sizes", s)
        if self.dummy is not None:
            m = np.ascontiguousarray(self.dummy, dtype=bool)
            if m.shape != t.shape:
                raise TraceError("dummy mask must match packet count")
            object.__setattr__(self, "dummy", m)

    @classmethod
    def from_records(cls, records: Iterable[Sequence], capture_point: str = "") -> "Trace":
        rows = list(records)
        if not rows:
            return cls.empty(capture_point)
        t, d, s = zip(*rows)
        order = np.argsort(np.asarray(t, dtype=np.float64), kind="stable")
        return cls(np.asarray(t, dtype=np.float64)[order], np.asarray(d)[order],
                   np.asarray(s)[order], capture_point)

    @classmethod
    def from_unsorted(cls, timestamps, directions, sizes, capture_point: str = "",
                      dummy=None) -> "Trace":
        t = np.asarray(timestamps, dtype=np.float64)
        order = np.argsort(t, kind="stable")
        return cls(t[order], np.asarray(directions)[order], np.asarray(sizes)[order],
                   capture_point, None if dummy is None else np.asarray(dummy)[order])

    @classmethod
    def empty(cls, capture_point: str = "") -> "Trace":
        return cls(np.zeros(0), np.zeros(0, np.int8), np.zeros(0, np.int64), capture_point)

    def __len__(self) -> int:
        return len(self.timestamps)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return (np.array_equal(self.timestamps, other.timestamps)
                and np.array_equal(self.directions, other.directions)
                and np.array_equal(self.sizes, other.sizes))

    @property
    def packets(self) -> list[PacketRecord]:
        return [PacketRecord(float(t), int(d), int(s))
                for t, d, s in zip(self.timestamps, self.directions, self.sizes)]

    @property
    def duration(self) -> float:
        return float(self.timestamps[-1] - self.timestamps[0]) if len(self) else 0.0

    @property
    def total_bytes(self) -> int:
        return int(self.sizes.sum())

    def with_capture_point(self, capture_point: str) -> "Trace":
        return Trace(self.timestamps, self.directions, self.sizes, capture_point, self.dummy)

    def shifted(self, offset: float) -> "Trace":
        return Trace(self.timestamps + offset, self.directions, self.sizes,
                     self.capture_point, self.dummy)

    def strip_dummies(self) -> "Trace":
        """Drop packets flagged as chaff and forget the provenance mask."""
        if self.dummy is None:
            return Trace(self.timestamps, self.directions, self.sizes, self.capture_point)
        keep = ~self.dummy
        return Trace(self.timestamps[keep], self.directions[keep], self.sizes[keep],
                     self.capture_point)


def _format_time(t: float) -> str:
    # shortest repr that round-trips, never in exponent form
    return np.format_float_positional(t, unique=True, trim="k", min_digits=9)


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt:
        return fmt
    return "jsonl" if path.suffix == ".jsonl" else "csv"


def load_trace(path, format: str | None = None, capture_point: str | None = None) -> Trace:
    """Read a trace file (``csv`` or ``jsonl``); rows are stably sorted by time."""
    path = Path(path)
    fmt = _infer_format(path, format)
    rows: list[tuple[float, int, int]] = []
    with open(path, newline="") as fh:
        if fmt == "csv":
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise EmptyTraceError(f"{path}: empty trace file")
            if tuple(h.strip() for h in header) != CSV_HEADER:
                raise TraceParseError(path, 1, f"expected header {','.join(CSV_HEADER)}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                rows.append(_parse_row(path, lineno, row))
        elif fmt == "jsonl":
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    row = (obj["t"], obj["d"], obj["s"])
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise TraceParseError(path, lineno, f"bad record: {exc}") from None
                rows.append(_parse_row(path, lineno, row))
        else:
            raise ValueError(f"unknown trace format {fmt!r}")
    if not rows:
        raise EmptyTraceError(f"{path}: trace has no packets")
    cp = capture_point if capture_point is not None else path.stem
    return Trace.from_records(rows, cp)


def _parse_row(path, lineno: int, row) -> tuple[float, int, int]:
    if len(row) != 3:
        raise TraceParseError(path, lineno, f"expected 3 fields, got {len(row)}")
    try:
        t = float(row[0])
        d = int(row[1])
        s = int(row[2])
    except (TypeError, ValueError) as exc:
        raise TraceParseError(path, lineno, str(exc)) from None
    if d not in (UP, DOWN):
        raise TraceParseError(path, lineno, f"direction must be +1 or -1, got {d}")
    if s < 1:
        raise TraceParseError(path, lineno, f"size must be >= 1, got {s}")
    if not np.isfinite(t) or t < 0:
        raise TraceParseError(path, lineno, f"timestamp must be finite and >= 0, got {t}")
    return t, d, s


def save_trace(trace: Trace, path, format: str | None = None) -> None:
    if len(trace) == 0:
        raise EmptyTraceError("refusing to write an empty trace")
    path = Path(path)
    fmt = _infer_format(path, format)
    times = [_format_time(t) for t in trace.timestamps.tolist()]
    dirs = trace.directions.tolist()
    sizes = trace.sizes.tolist()
    try:
        with open(path, "w", newline="") as fh:
            if fmt == "csv":
                fh.write(",".join(CSV_HEADER) + "\n")
                fh.writelines(f"{t},{d},{s}\n" for t, d, s in zip(times, dirs, sizes))
            elif fmt == "jsonl":
                fh.writelines(f'{{"t": {t}, "d": {d}, "s": {s}}}\n'
                              for t, d, s in zip(times, dirs, sizes))
            else:
                raise ValueError(f"unknown trace format {fmt!r}")
    except OSError as exc:
        raise OSError(f"could not write trace to {path}: {exc}") from exc


# --- bursts -----------------------------------------------------------------

@dataclass(frozen=True)
class Burst:
    start: float
    up_bytes: int
    down_bytes: int
    gap_after: float

    def __post_init__(self):
        if self.up_bytes < 0 or self.down_bytes < 0 or self.up_bytes + self.down_bytes == 0:
            raise ValueError("a burst needs a nonnegative, nonzero byte count")
        if self.gap_after < 0:
            raise ValueError("gap_after must be >= 0")


@dataclass(frozen=True)
class BurstSequence:
    bursts: tuple[Burst, ...]
    source_trace_id: str = ""

    def __len__(self) -> int:
        return len(self.bursts)


@dataclass(frozen=True)
class BurstSchedule:
    bursts: tuple[Burst, ...]

    def __len__(self) -> int:
        return len(self.bursts)


def burst_boundaries(trace: Trace, gap_threshold: float) -> np.ndarray:
    """Indices of the packets that open a new burst (always includes 0)."""
    gaps = np.diff(trace.timestamps)
    return np.concatenate([[0], np.flatnonzero(gaps > gap_threshold) + 1])


def parse_bursts(trace: Trace, gap_threshold: float = DEFAULT_GAP_THRESHOLD) -> BurstSequence:
    """Split a trace into bursts wherever the inter-packet delay exceeds the threshold."""
    if len(trace) == 0:
        raise EmptyTraceError("cannot parse bursts from an empty trace")
    if gap_threshold <= 0:
        raise ValueError("gap_threshold must be positive")
    starts = burst_boundaries(trace, gap_threshold)
    ends = np.concatenate([starts[1:], [len(trace)]])
    signed = trace.sizes * trace.directions
    up = np.add.reduceat(np.where(signed > 0, signed, 0), starts)
    down = np.add.reduceat(np.where(signed < 0, -signed, 0), starts)
    t = trace.timestamps
    bursts = []
    for i, (a, b) in enumerate(zip(starts, ends)):
        gap = float(t[ends[i]] - t[b - 1]) if i + 1 < len(starts) else 0.0
        bursts.append(Burst(float(t[a]), int(up[i]), int(down[i]), gap))
    return BurstSequence(tuple(bursts), trace.capture_point)


def gap_percentile(traces: Sequence[Trace], q: float = 97.0, pooled: bool = True) -> float:
    """Burst threshold as the q-th percentile of inter-packet delays.

    ``pooled`` takes the percentile over all delays together; otherwise the
    per-trace percentiles are averaged.
    """
    gaps = [np.diff(tr.timestamps) for tr in traces if len(tr) > 1]
    if not gaps:
        raise EmptyTraceError("need at least one trace with two packets")
    if pooled:
        return float(np.percentile(np.concatenate(gaps), q))
    return float(np.mean([np.percentile(g, q) for g in gaps]))


# --- empirical distributions -------------------------------------------------

@dataclass(frozen=True, eq=False)
class EmpiricalDistribution:
    values: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or len(v) == 0:
            raise ValueError("empirical distribution needs at least one value")
        order = np.argsort(v, kind="stable")
        object.__setattr__(self, "values", v[order])
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != v.shape or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError("weights must be positive, match values and sum to 1")
            object.__setattr__(self, "weights", w[order])

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmpiricalDistribution):
            return NotImplemented
        if (self.weights is None) != (other.weights is None):
            return False
        return np.array_equal(self.values, other.values) and (
            self.weights is None or np.array_equal(self.weights, other.weights))

    def __len__(self) -> int:
        return len(self.values)

    def sample(self, rng: np.random.Generator, size=None):
        """Bootstrap draw from the observed values."""
        return rng.choice(self.values, size=size, p=self.weights)

    def support_probabilities(self) -> dict[float, float]:
        w = self.weights if self.weights is not None else np.full(len(self), 1 / len(self))
        out: dict[float, float] = {}
        for v, p in zip(self.values.tolist(), w.tolist()):
            out[v] = out.get(v, 0.0) + p
        return out


@dataclass(frozen=True)
class BurstModel:
    burst_count_dist: EmpiricalDistribution
    inter_burst_gap_dist: EmpiricalDistribution
    up_bytes_dist: EmpiricalDistribution
    down_bytes_dist: EmpiricalDistribution

    _KEYS = ("burst_count", "inter_burst_gap_s", "up_bytes", "down_bytes")

    def __post_init__(self):
        if np.any(np.round(self.burst_count_dist.values) < 1):
            raise ValueError("burst counts must round to >= 1")
        for d in (self.up_bytes_dist, self.down_bytes_dist):
            if np.any(np.round(d.values) < 0):
                raise ValueError("byte counts must round to >= 0")
        if np.any(self.inter_burst_gap_dist.values < 0):
            raise ValueError("inter-burst gaps must be >= 0")

    def to_dict(self) -> dict:
        dists = (self.burst_count_dist, self.inter_burst_gap_dist,
                 self.up_bytes_dist, self.down_bytes_dist)
        return {k: d.values.tolist() for k, d in zip(self._KEYS, dists)}

    @classmethod
    def from_dict(cls, doc: dict) -> "BurstModel":
        missing = [k for k in cls._KEYS if k not in doc]
        if missing:
            raise ValueError(f"burst model document missing keys: {missing}")
        return cls(*(EmpiricalDistribution(np.asarray(doc[k], dtype=np.float64))
                     for k in cls._KEYS))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "BurstModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_burst_model(sequences: Sequence[BurstSequence]) -> BurstModel:
    """Pool the four burst statistics over all sequences."""
    sequences = [s for s in sequences]
    if not sequences:
        raise ValueError("fit_burst_model needs at least one burst sequence")
    counts = [len(s) for s in sequences]
    gaps, ups, downs = [], [], []
    for seq in sequences:
        for i, b in enumerate(seq.bursts):
            # the final burst has no successor, so its gap is not an observation
            if i + 1 < len(seq.bursts):
                gaps.append(b.gap_after)
            ups.append(b.up_bytes)
            downs.append(b.down_bytes)
    if not gaps:
        gaps = [0.0]
    return BurstModel(EmpiricalDistribution(counts), EmpiricalDistribution(gaps),
                      EmpiricalDistribution(ups), EmpiricalDistribution(downs))


def sample_burst_schedule(model: BurstModel, rng: np.random.Generator) -> BurstSchedule:
    """Draw J, then (N, M, Z) independently per burst.

    ``start`` holds the cumulative sum of the preceding gaps only; the
    simulator adds burst durations when it lays out packets.
    """
    j = max(1, int(np.round(model.burst_count_dist.sample(rng))))
    ups = np.round(model.up_bytes_dist.sample(rng, j)).astype(np.int64)
    downs = np.round(model.down_bytes_dist.sample(rng, j)).astype(np.int64)
    gaps = model.inter_burst_gap_dist.sample(rng, j)
    # a burst must carry data; resample degenerate (0, 0) draws
    for i in np.flatnonzero((ups == 0) & (downs == 0)):
        for _ in range(1000):
            ups[i] = int(np.round(model.up_bytes_dist.sample(rng)))
            downs[i] = int(np.round(model.down_bytes_dist.sample(rng)))
            if ups[i] or downs[i]:
                break
        else:
            raise ValueError("burst model cannot produce a nonempty burst")
    starts = np.concatenate([[0.0], np.cumsum(gaps[:-1])])
    bursts = tuple(Burst(float(s), int(u), int(d), float(z))
                   for s, u, d, z in zip(starts, ups, downs, gaps))
    return BurstSchedule(bursts)


def default_burst_model(seed: int = 25) -> BurstModel:
    """A stand-in model for when no real traces are available.

    Values are deterministic draws from heavy-tailed families shaped like
    interactive shell sessions: a few dozen bursts, sub-second to multi-second
    pauses, short keystroke-sized requests and larger responses.
    """
    rng = np.random.default_rng(seed)
    counts = np.round(rng.uniform(20, 80, 200))
    gaps = 0.0065 + rng.lognormal(mean=np.log(0.4), sigma=1.0, size=2000)
    gaps = np.minimum(gaps, 5.0)
    ups = np.round(rng.lognormal(np.log(120), 1.2, 2000)).clip(1, 20000)
    downs = np.round(rng.lognormal(np.log(900), 1.5, 2000)).clip(0, 60000)
    return BurstModel(EmpiricalDistribution(counts), EmpiricalDistribution(gaps),
                      EmpiricalDistribution(ups), EmpiricalDistribution(downs))
