"""Stepping-stone intrusion detection toolkit.

Synthesizes relayed multi-hop traffic, extracts interval features, trains a
triplet-metric flow-correlation model and reports low-FPR detection metrics.
"""

from .features import IntervalTensor, PacketTensor, interval_features, packet_features
from .simulator import ChainConfig, ChainSample, HopSpec, ProtocolModel, SimConfig, simulate_chain
from .traffic import BurstModel, Trace, load_trace, parse_bursts, save_trace

__version__ = "0.1.0"

__all__ = [
    "BurstModel", "ChainConfig", "ChainSample", "HopSpec", "IntervalTensor", "PacketTensor",
    "ProtocolModel", "SimConfig", "Trace", "interval_features", "load_trace",
    "packet_features", "parse_bursts", "save_trace", "simulate_chain",
]
