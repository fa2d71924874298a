"""Transformer feature extraction network with post-encoder windowing.

Input is a (batch, 9, T) interval tensor. A strided convolution turns it into
T/3 tokens, a stack of pre-norm blocks mixes them, and a wide valid
convolution over the token sequence produces one embedding per window.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FenConfig:
    input_channels: int = 9
    input_len: int = 1200
    hidden_dim: int = 96
    feature_dim: int = 64
    depth: int = 9
    embed_kernel: int = 3
    embed_stride: int = 3
    window_kernel: int = 50
    window_stride: int = 3
    mixer: str = "mhsa"  # mhsa | conv7 | identity
    head_dim: int = 16
    kv_kernel: int = 3
    kv_stride: int = 2
    q_kernel: int = 3
    mixer_kernel: int = 7
    mlp_ratio: int = 4
    block_dropout: float = 0.1
    chain_token: bool = False

    def __post_init__(self):
        if self.mixer not in ("mhsa", "conv7", "identity"):
            raise ConfigError(f"unknown mixer {self.mixer!r}")
        if self.hidden_dim % self.head_dim:
            raise ConfigError("hidden_dim must be divisible by head_dim")
        if self.n_windows <= 0:
            raise ConfigError("input too short for the windowing convolution")

    @property
    def n_tokens(self) -> int:
        return (self.input_len - self.embed_kernel) // self.embed_stride + 1

    @property
    def n_windows(self) -> int:
        return (self.n_tokens - self.window_kernel) // self.window_stride + 1

    def window_span(self, dt: float) -> float:
        """Seconds of traffic covered by one output window."""
        return dt * self.embed_stride * self.window_kernel

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "FenConfig":
        return cls(**doc)

    @classmethod
    def greentea(cls, **kw) -> "FenConfig":
        return cls(mixer="conv7", **kw)

    @classmethod
    def hotwater(cls, **kw) -> "FenConfig":
        return cls(mixer="identity", **kw)

    @classmethod
    def tiny(cls, **kw) -> "FenConfig":
        """Small network for gradient checks: 9x60 input, hidden 8, depth 2."""
        base = dict(input_len=60, hidden_dim=8, feature_dim=6, depth=2, head_dim=4,
                    window_kernel=5, window_stride=3)
        base.update(kw)
        return cls(**base)

    @classmethod
    def toy(cls, **kw) -> "FenConfig":
        """Desk-scale network used by the smoke experiments."""
        base = dict(hidden_dim=32, depth=3)
        base.update(kw)
        return cls(**base)


def _seq_conv(x, conv):
    # (B, L, C) -> conv over L -> (B, L', C)
    return conv(x.transpose(1, 2)).transpose(1, 2)


class ConvAttention(nn.Module):
    """Multi-head attention with depthwise-convolutional q/k/v projections.

    Keys and values are strided, so attention runs over L queries and about
    L/2 keys. A chain token, when present, bypasses the convolutions and is
    projected linearly.
    """

    def __init__(self, cfg: FenConfig):
        super().__init__()
        dim = cfg.hidden_dim
        self.heads = dim // cfg.head_dim
        self.scale = cfg.head_dim ** -0.5
        self.q_conv = nn.Conv1d(dim, dim, cfg.q_kernel, 1, cfg.q_kernel // 2, groups=dim, bias=False)
        self.kv_conv = nn.Conv1d(dim, dim, cfg.kv_kernel, cfg.kv_stride, cfg.kv_kernel // 2,
                                 groups=dim, bias=False)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        self.has_token = cfg.chain_token

    def forward(self, x):
        if self.has_token:
            tok, seq = x[:, :1], x[:, 1:]
            q_in = torch.cat([tok, _seq_conv(seq, self.q_conv)], 1)
            kv_in = torch.cat([tok, _seq_conv(seq, self.kv_conv)], 1)
        else:
            q_in = _seq_conv(x, self.q_conv)
            kv_in = _seq_conv(x, self.kv_conv)
        b, lq, c = q_in.shape
        lk = kv_in.shape[1]
        q = self.q(q_in).view(b, lq, self.heads, -1).transpose(1, 2)
        k = self.k(kv_in).view(b, lk, self.heads, -1).transpose(1, 2)
        v = self.v(kv_in).view(b, lk, self.heads, -1).transpose(1, 2)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, lq, c)
        return self.proj(out)


class ConvMixer(nn.Module):
    """Local depthwise convolution mixer (attention ablation)."""

    def __init__(self, cfg: FenConfig):
        super().__init__()
        dim = cfg.hidden_dim
        self.conv = nn.Conv1d(dim, dim, cfg.mixer_kernel, 1, cfg.mixer_kernel // 2, groups=dim)
        self.proj = nn.Linear(dim, dim)
        self.has_token = cfg.chain_token

    def forward(self, x):
        if self.has_token:
            return self.proj(torch.cat([x[:, :1], _seq_conv(x[:, 1:], self.conv)], 1))
        return self.proj(_seq_conv(x, self.conv))


class Block(nn.Module):
    def __init__(self, cfg: FenConfig):
        super().__init__()
        dim = cfg.hidden_dim
        self.norm1 = nn.LayerNorm(dim)
        if cfg.mixer == "mhsa":
            self.mixer = ConvAttention(cfg)
        elif cfg.mixer == "conv7":
            self.mixer = ConvMixer(cfg)
        else:
            self.mixer = nn.Identity()
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * cfg.mlp_ratio), nn.GELU(),
                                 nn.Linear(dim * cfg.mlp_ratio, dim))
        self.drop = nn.Dropout(cfg.block_dropout)

    def forward(self, x):
        x = x + self.drop(self.mixer(self.norm1(x)))
        return x + self.drop(self.mlp(self.norm2(x)))


def scale_input(x):
    """Signed log compression; byte counts span several orders of magnitude."""
    return torch.sign(x) * torch.log1p(torch.abs(x))


class FEN(nn.Module):
    def __init__(self, cfg: FenConfig):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden_dim
        self.embed = nn.Conv1d(cfg.input_channels, h, cfg.embed_kernel, cfg.embed_stride)
        self.embed_norm = nn.LayerNorm(h)
        self.chain_token = nn.Parameter(torch.zeros(1, 1, h)) if cfg.chain_token else None
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(h)
        self.window = nn.Conv1d(h, cfg.feature_dim, cfg.window_kernel, cfg.window_stride)

    def tokens(self, x):
        cfg = self.cfg
        if x.dim() != 3 or x.shape[1] != cfg.input_channels or x.shape[2] != cfg.input_len:
            raise ConfigError(f"expected input (B, {cfg.input_channels}, {cfg.input_len}), "
                              f"got {tuple(x.shape)}")
        t = self.embed_norm(self.embed(scale_input(x)).transpose(1, 2))
        if self.chain_token is not None:
            t = torch.cat([self.chain_token.expand(t.shape[0], -1, -1), t], 1)
        for blk in self.blocks:
            t = blk(t)
        return self.norm(t)

    def forward(self, x):
        """Return (window embeddings (B, W, feature_dim), chain-token output or None)."""
        t = self.tokens(x)
        tok = None
        if self.chain_token is not None:
            tok, t = t[:, 0], t[:, 1:]
        return _seq_conv(t, self.window), tok


class ChainHead(nn.Module):
    """MLP on the chain-token output predicting (up_hosts, down_hosts)."""

    def __init__(self, hidden_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(hidden_dim, hidden_dim), nn.GELU(),
                                 nn.Linear(hidden_dim, 2))

    def forward(self, tok):
        return self.net(tok)


class CorrelationHead(nn.Module):
    """Per-window similarity vector -> probability that the pair is correlated."""

    def __init__(self, n_windows: int, hidden: int = 128):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(n_windows, hidden), nn.ReLU(),
                                 nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def logits(self, sims):
        return self.net(sims).squeeze(-1)

    def forward(self, sims):
        # float32 sigmoid rounds to exactly 1 above a logit of about 17
        return torch.sigmoid(self.logits(sims).double())
