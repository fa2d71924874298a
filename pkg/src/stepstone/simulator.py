"""Analytic stepping-stone chain simulator.

Each link of a chain is modelled as a :class:`HopSpec`. Relaying a trace over
a link first applies the link's tunnelling protocol at the sending host
(:func:`encapsulate`) and then the network transit (:func:`transit`).
Captures are taken on both sides of every stepping stone: a stone's ingress is
what the previous link delivered, its egress is the re-encapsulated stream it
puts on the next link.

Encapsulation is cumulative: a stone does not strip the previous tunnel, it
re-wraps what it received.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .traffic import (DOWN, UP, BurstModel, BurstSchedule, Trace, load_trace,
                      sample_burst_schedule, save_trace)

logger = logging.getLogger(__name__)

PROTOCOLS = ("ssh", "socat", "icmp", "dns")
ENDPOINT_MTU = 1448
INTRA_BURST_GAP = 1e-3
COALESCE_WINDOW = 1e-4
ICMP_REPLY_SIZE = 64


@dataclass(frozen=True)
class HopSpec:
    protocol: str = "socat"
    propagation_delay: float = 0.0
    jitter_std: float = 0.0
    mtu_payload: int = 1448
    per_hop_processing_delay: float = 0.0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.propagation_delay < 0 or self.jitter_std < 0 or self.per_hop_processing_delay < 0:
            raise ValueError("delays must be nonnegative")
        if self.mtu_payload < 64:
            raise ValueError("mtu_payload must be >= 64")


@dataclass(frozen=True)
class ProtocolModel:
    ssh_record_overhead: int = 32
    ssh_block_align: int = 16
    icmp_chunk_size: int = 1024
    icmp_per_chunk_overhead: int = 28
    dns_poll_period: float = 0.5
    dns_query_payload: int = 200
    dns_response_payload: int = 400
    dns_query_overhead: int = 60

    def __post_init__(self):
        ints = (self.ssh_record_overhead, self.ssh_block_align, self.icmp_chunk_size,
                self.icmp_per_chunk_overhead, self.dns_query_payload,
                self.dns_response_payload, self.dns_query_overhead)
        if min(ints) <= 0:
            raise ValueError("protocol byte parameters must be positive")
        if self.dns_poll_period <= 0:
            raise ValueError("dns_poll_period must be positive")


@dataclass(frozen=True)
class ChainConfig:
    hops: tuple[HopSpec, ...]
    seed: int = 0
    wan_link_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hops", tuple(self.hops))
        if not 2 <= len(self.hops) <= 4:
            raise ValueError("a chain has 2 to 4 links (1 to 3 stepping stones)")
        if not 0 <= self.wan_link_index < len(self.hops):
            raise ValueError("wan_link_index out of range")

    @property
    def n_links(self) -> int:
        return len(self.hops)

    @property
    def n_stones(self) -> int:
        return len(self.hops) - 1

    @property
    def protocols(self) -> list[str]:
        return [h.protocol for h in self.hops]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "wan_link_index": self.wan_link_index,
                "hops": [asdict(h) for h in self.hops]}

    @classmethod
    def from_dict(cls, doc: dict) -> "ChainConfig":
        return cls(tuple(HopSpec(**h) for h in doc["hops"]), doc["seed"], doc["wan_link_index"])


def capture_points(n_links: int) -> list[str]:
    """Capture names in path order: attacker egress, stone ingress/egress, target ingress."""
    names = ["h0_egress"]
    for s in range(1, n_links):
        names += [f"h{s}_ingress", f"h{s}_egress"]
    names.append(f"h{n_links}_ingress")
    return names


def capture_host(capture_point: str) -> int:
    return int(capture_point[1:capture_point.index("_")])


def host_labels(host: int, n_links: int) -> tuple[int, int]:
    """(hosts upstream, hosts downstream) of the host at path position ``host``."""
    return host, n_links - host


@dataclass(frozen=True)
class ChainSample:
    chain_id: str
    config: ChainConfig
    captures: dict[str, Trace]

    @property
    def up_hosts(self) -> int:
        """Hosts upstream of the target (attacker plus stepping stones)."""
        return self.config.n_links

    @property
    def down_hosts(self) -> int:
        """Hosts downstream of the attacker (stepping stones plus target)."""
        return self.config.n_links

    @property
    def attacker(self) -> Trace:
        return self.captures["h0_egress"]

    @property
    def target(self) -> Trace:
        return self.captures[f"h{self.config.n_links}_ingress"]

    def capture_labels(self, capture_point: str) -> tuple[int, int]:
        return host_labels(capture_host(capture_point), self.config.n_links)


# --- endpoint traffic --------------------------------------------------------

def _split_bytes(total: int, mtu: int) -> list[int]:
    full, rest = divmod(int(total), mtu)
    return [mtu] * full + ([rest] if rest else [])


def synthesize_endpoint_traffic(schedule: BurstSchedule, rng: np.random.Generator,
                                mtu_payload: int = ENDPOINT_MTU,
                                intra_gap: float = INTRA_BURST_GAP) -> Trace:
    """Lay a burst schedule out as packets at the attacker's host.

    Within a burst the N upstream bytes are sent first, then the M downstream
    bytes, with exponential inter-packet gaps of mean ``intra_gap``. The next
    burst starts Z seconds after the last packet of the current one.
    """
    if len(schedule) == 0:
        raise ValueError("schedule is empty")
    times, dirs, sizes = [], [], []
    t = 0.0
    first = True
    for burst in schedule.bursts:
        pkts = ([(UP, s) for s in _split_bytes(burst.up_bytes, mtu_payload)]
                + [(DOWN, s) for s in _split_bytes(burst.down_bytes, mtu_payload)])
        gaps = rng.exponential(intra_gap, len(pkts))
        for (d, s), g in zip(pkts, gaps):
            if first:
                first = False
            else:
                t += g
            times.append(t)
            dirs.append(d)
            sizes.append(s)
        t += burst.gap_after
    return Trace(np.array(times), np.array(dirs), np.array(sizes), "h0_egress")


# --- relay transforms --------------------------------------------------------

def _resegment(t: np.ndarray, s: np.ndarray, mtu: int) -> tuple[np.ndarray, np.ndarray]:
    """Re-segment one direction's byte stream at ``mtu``.

    Packets closer than the coalescing window share a stream run. Each output
    segment is stamped with the arrival of the packet that completes it.
    """
    if len(t) == 0:
        return t, s
    run_start = np.concatenate([[True], np.diff(t) >= COALESCE_WINDOW])
    starts = np.flatnonzero(run_start)
    cum = np.cumsum(s)
    base = np.concatenate([[0], cum])[starts]
    totals = np.add.reduceat(s, starts)
    n_seg = -(-totals // mtu)
    run_of_seg = np.repeat(np.arange(len(starts)), n_seg)
    k = np.arange(len(run_of_seg)) - np.repeat(np.cumsum(n_seg) - n_seg, n_seg) + 1
    bounds = np.minimum(k * mtu, totals[run_of_seg])
    idx = np.searchsorted(cum, base[run_of_seg] + bounds, side="left")
    seg_sizes = np.diff(np.concatenate([[0], bounds]))
    seg_sizes[k == 1] = bounds[k == 1]
    return t[idx], seg_sizes


def _socat(t, d, s, hop: HopSpec):
    parts = []
    for direction in (UP, DOWN):
        m = d == direction
        order = np.argsort(t[m], kind="stable")
        rt, rs = _resegment(t[m][order], s[m][order], hop.mtu_payload)
        parts.append((rt, np.full(len(rt), direction), rs))
    return tuple(np.concatenate(x) for x in zip(*parts))


def _ssh(t, d, s, proto: ProtocolModel):
    align = proto.ssh_block_align
    return t, d, -(-s // align) * align + proto.ssh_record_overhead


def _icmp(t, d, s, hop: HopSpec, proto: ProtocolModel):
    chunk = proto.icmp_chunk_size
    n_chunks = -(-s // chunk)
    rep = np.repeat(np.arange(len(s)), n_chunks)
    # byte count of each chunk: full chunks then the remainder
    offset = np.arange(len(rep)) - np.repeat(np.cumsum(n_chunks) - n_chunks, n_chunks)
    sizes = np.minimum(chunk, s[rep] - offset * chunk) + proto.icmp_per_chunk_overhead
    ct, cd = t[rep], d[rep]
    up = cd == UP
    rt = ct[up] + hop.propagation_delay
    out_t = np.concatenate([ct, rt])
    out_d = np.concatenate([cd, np.full(up.sum(), DOWN)])
    out_s = np.concatenate([sizes, np.full(up.sum(), ICMP_REPLY_SIZE)])
    return out_t, out_d, out_s


def _dns(t, d, s, hop: HopSpec, proto: ProtocolModel):
    period = proto.dns_poll_period
    t0 = t.min()
    up_t, up_s = t[d == UP], s[d == UP]
    dn_t, dn_s = t[d == DOWN], s[d == DOWN]
    up_cum = np.concatenate([[0], np.cumsum(up_s)])
    dn_cum = np.concatenate([[0], np.cumsum(dn_s)])
    sent_up = sent_dn = 0
    last = t.max()
    q_t, q_s, r_t, r_s = [], [], [], []
    k = 0
    while True:
        tick = t0 + k * period
        avail_up = int(up_cum[np.searchsorted(up_t, tick, side="right")]) - sent_up
        avail_dn = int(dn_cum[np.searchsorted(dn_t, tick, side="right")]) - sent_dn
        cu = min(avail_up, proto.dns_query_payload)
        cd = min(avail_dn, proto.dns_response_payload)
        sent_up += cu
        sent_dn += cd
        q_t.append(tick)
        q_s.append(cu + proto.dns_query_overhead)
        r_t.append(tick + hop.propagation_delay)
        r_s.append(cd + proto.dns_query_overhead)
        k += 1
        if tick >= last and sent_up == up_cum[-1] and sent_dn == dn_cum[-1]:
            break
    out_t = np.concatenate([q_t, r_t])
    out_d = np.concatenate([np.full(len(q_t), UP), np.full(len(r_t), DOWN)])
    out_s = np.concatenate([q_s, r_s])
    return out_t, out_d, out_s


def encapsulate(trace: Trace, hop: HopSpec, proto: ProtocolModel) -> Trace:
    """Protocol re-encapsulation and forwarding delay at the sending host."""
    if len(trace) == 0:
        raise ValueError("cannot relay an empty trace")
    t = trace.timestamps + hop.per_hop_processing_delay
    d, s = trace.directions.astype(np.int64), trace.sizes
    if hop.protocol == "socat":
        t, d, s = _socat(t, d, s, hop)
    elif hop.protocol == "ssh":
        t, d, s = _ssh(t, d, s, proto)
    elif hop.protocol == "icmp":
        t, d, s = _icmp(t, d, s, hop, proto)
    else:
        t, d, s = _dns(t, d, s, hop, proto)
    return Trace.from_unsorted(t, d, s, trace.capture_point)


def transit(trace: Trace, hop: HopSpec, rng: np.random.Generator) -> Trace:
    """Propagation delay plus half-normal jitter per packet, then re-sort."""
    jitter = np.abs(rng.normal(0.0, hop.jitter_std, len(trace))) if hop.jitter_std > 0 else 0.0
    t = trace.timestamps + hop.propagation_delay + jitter
    return Trace.from_unsorted(t, trace.directions, trace.sizes, trace.capture_point)


def relay_hop(trace: Trace, hop: HopSpec, proto: ProtocolModel,
              rng: np.random.Generator) -> Trace:
    return transit(encapsulate(trace, hop, proto), hop, rng)


# --- chains ------------------------------------------------------------------

def simulate_chain(config: ChainConfig, model: BurstModel, proto: ProtocolModel,
                   rng: np.random.Generator | None = None, chain_id: str = "") -> ChainSample:
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    schedule = sample_burst_schedule(model, rng)
    names = capture_points(config.n_links)
    current = synthesize_endpoint_traffic(schedule, rng)
    captures = {names[0]: current}
    for link, hop in enumerate(config.hops):
        if link > 0:
            current = encapsulate(current, hop, proto)
            captures[names[2 * link]] = current.with_capture_point(names[2 * link])
            current = transit(current, hop, rng)
        else:
            current = relay_hop(current, hop, proto, rng)
        captures[names[2 * link + 1]] = current.with_capture_point(names[2 * link + 1])
    return ChainSample(chain_id, config, captures)


@dataclass(frozen=True)
class SimConfig:
    """Dataset-level simulation settings."""

    protocol_mode: str = "socat"  # one of PROTOCOLS or "mixed"
    min_stones: int = 1
    max_stones: int = 3
    wan_delay: tuple[float, float] = (0.030, 0.080)
    lan_delay: tuple[float, float] = (0.0002, 0.002)
    jitter_fraction: float = 0.1
    processing_delay: float = 0.0
    mtu_payload: int = 1448
    protocol: ProtocolModel = field(default_factory=ProtocolModel)

    def __post_init__(self):
        if self.protocol_mode not in PROTOCOLS + ("mixed",):
            raise ValueError(f"unknown protocol mode {self.protocol_mode!r}")
        if not 1 <= self.min_stones <= self.max_stones <= 3:
            raise ValueError("stone counts must satisfy 1 <= min <= max <= 3")


def chain_seed(base_seed: int, index: int) -> int:
    return int(base_seed) ^ int(index)


def sample_chain_config(sim: SimConfig, seed: int) -> ChainConfig:
    rng = np.random.default_rng([seed, 1])
    n_links = int(rng.integers(sim.min_stones, sim.max_stones + 1)) + 1
    hops = []
    for link in range(n_links):
        lo, hi = sim.wan_delay if link == 0 else sim.lan_delay
        delay = float(rng.uniform(lo, hi))
        proto = (sim.protocol_mode if sim.protocol_mode != "mixed"
                 else PROTOCOLS[int(rng.integers(len(PROTOCOLS)))])
        hops.append(HopSpec(proto, delay, sim.jitter_fraction * delay, sim.mtu_payload,
                            sim.processing_delay))
    return ChainConfig(tuple(hops), seed, 0)


def _generate_one(args):
    sim, model, index, seed, out_dir, fmt = args
    chain_id = f"chain{index:06d}"
    config = sample_chain_config(sim, seed)
    entry = {"chain_id": chain_id, "seed": seed, "links": config.n_links,
             "protocols": config.protocols, "label_up": config.n_links,
             "label_down": config.n_links, "config": config.to_dict(), "captures": {}}
    try:
        sample = simulate_chain(config, model, sim.protocol, np.random.default_rng([seed, 2]),
                                chain_id)
        chain_dir = Path(out_dir) / chain_id
        chain_dir.mkdir(parents=True, exist_ok=True)
        for name, trace in sample.captures.items():
            rel = f"{chain_id}/{name}.{fmt}"
            save_trace(trace, Path(out_dir) / rel, fmt)
            entry["captures"][name] = rel
        entry["status"] = "ok"
    except OSError as exc:
        entry["status"] = "failed"
        entry["error"] = str(exc)
    return entry


@dataclass
class DatasetManifest:
    name: str
    protocol_mode: str
    n_chains: int
    base_seed: int
    chains: list[dict]
    root: Path | None = None

    def to_dict(self) -> dict:
        return {"name": self.name, "protocol_mode": self.protocol_mode,
                "n_chains": self.n_chains, "base_seed": self.base_seed, "chains": self.chains}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        return cls(doc["name"], doc["protocol_mode"], doc["n_chains"], doc["base_seed"],
                   doc["chains"], path.parent)

    @property
    def ok_chains(self) -> list[dict]:
        return [c for c in self.chains if c.get("status") == "ok"]

    @property
    def failures(self) -> list[dict]:
        return [c for c in self.chains if c.get("status") != "ok"]

    def load_chain(self, entry: dict) -> ChainSample:
        root = self.root or Path(".")
        captures = {name: load_trace(root / rel, capture_point=name)
                    for name, rel in entry["captures"].items()}
        return ChainSample(entry["chain_id"], ChainConfig.from_dict(entry["config"]), captures)

    def load_chains(self, entries: Sequence[dict] | None = None) -> list[ChainSample]:
        return [self.load_chain(e) for e in (entries if entries is not None else self.ok_chains)]

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def generate_dataset(sim: SimConfig, n_chains: int, base_seed: int, out_dir,
                     model: BurstModel, name: str = "dataset", fmt: str = "csv",
                     workers: int = 1) -> DatasetManifest:
    """Simulate and persist ``n_chains`` chains; chain i is seeded with base_seed ^ i."""
    if n_chains < 1:
        raise ValueError("n_chains must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(sim, model, i, chain_seed(base_seed, i), str(out_dir), fmt) for i in range(n_chains)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            entries = list(pool.map(_generate_one, jobs, chunksize=8))
    else:
        entries = [_generate_one(j) for j in jobs]
    manifest = DatasetManifest(name, sim.protocol_mode, n_chains, base_seed, entries, out_dir)
    manifest.save(out_dir / "manifest.json")
    failed = manifest.failures
    if failed:
        logger.warning("%d of %d chains failed", len(failed), n_chains)
    return manifest


def generate_chains(sim: SimConfig, n_chains: int, base_seed: int,
                    model: BurstModel) -> list[ChainSample]:
    """In-memory variant of :func:`generate_dataset` (same seeding)."""
    out = []
    for i in range(n_chains):
        seed = chain_seed(base_seed, i)
        config = sample_chain_config(sim, seed)
        out.append(simulate_chain(config, model, sim.protocol,
                                  np.random.default_rng([seed, 2]), f"chain{i:06d}"))
    return out


def with_hops(config: ChainConfig, **changes) -> ChainConfig:
    return replace(config, hops=tuple(replace(h, **changes) for h in config.hops))
