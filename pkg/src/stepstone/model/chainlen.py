"""Standalone chain-length regressor over packet-level features."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from ..features import PacketTensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChainLenConfig:
    channels: tuple[int, ...] = (32, 64, 128, 256)
    kernel: int = 7
    stride: int = 2
    max_len: int = 4096
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    dropout: float = 0.3
    augment: bool = True  # random leading crop; the hop count does not depend on it
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ChainLenConfig":
        doc = dict(doc)
        doc["channels"] = tuple(doc.get("channels", cls.channels))
        return cls(**doc)


def prepare_packets(data: np.ndarray) -> np.ndarray:
    """Rescale packet rows (dirs, iat, signed sizes, burst edges) for the CNN."""
    x = np.array(data, dtype=np.float32, copy=True)
    x[..., 1, :] = np.log1p(x[..., 1, :] * 1e3)
    # hundreds of bytes: coarser units (or log compression) hide the few-byte
    # growth each tunnel adds to small packets
    x[..., 2, :] /= 100.0
    x[..., 3, :] /= 2.0
    return x


class ChainLenCNN(nn.Module):
    def __init__(self, cfg: ChainLenConfig = ChainLenConfig(), in_channels: int = 4):
        super().__init__()
        layers = []
        prev = in_channels
        for ch in cfg.channels:
            layers += [nn.Conv1d(prev, ch, cfg.kernel, cfg.stride, cfg.kernel // 2),
                       nn.BatchNorm1d(ch), nn.ReLU()]
            prev = ch
        self.features = nn.Sequential(*layers)
        self.out = nn.Sequential(nn.Dropout(cfg.dropout), nn.Linear(prev, 64), nn.ReLU(),
                                 nn.Linear(64, 2))

    def forward(self, x):
        h = self.features(x)
        # average over the positions that cover real packets, not the zero padding
        valid = (x[:, 0] != 0).float().unsqueeze(1)
        mask = nn.functional.adaptive_max_pool1d(valid, h.shape[-1])
        pooled = (h * mask).sum(-1) / mask.sum(-1).clamp(min=1.0)
        return self.out(pooled)


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return float(np.mean((pred - target) ** 2))


def chainlen_forward(model: ChainLenCNN, x: PacketTensor | np.ndarray) -> np.ndarray:
    """Predict (up_hosts, down_hosts) for one packet tensor or a stacked batch."""
    data = x.data if isinstance(x, PacketTensor) else np.asarray(x)
    single = data.ndim == 2
    batch = torch.from_numpy(prepare_packets(data[None] if single else data))
    model.eval()
    with torch.no_grad():
        out = model(batch).numpy().astype(np.float64)
    return out[0] if single else out


def random_crop(x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Drop a random number of leading packets (up to half the flow) from each row."""
    out = torch.zeros_like(x)
    lengths = (x[:, 0] != 0).sum(-1).numpy()
    for i, n in enumerate(lengths):
        k = int(rng.integers(0, n // 2 + 1))
        out[i, :, :x.shape[-1] - k] = x[i, :, k:]
        out[i, 1, 0] = 0.0  # iat and burst edge of the new first packet
        out[i, 3, 0] = 0.0
    return out


def train_chainlen(x: np.ndarray, y: np.ndarray, cfg: ChainLenConfig = ChainLenConfig(),
                   log_fn=None) -> tuple[ChainLenCNN, list[dict]]:
    """Fit the regressor by minimising MSE on (N, 4, L) packet tensors and (N, 2) labels."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = ChainLenCNN(cfg, x.shape[1])
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.epochs, 1))
    xt = torch.from_numpy(prepare_packets(x))
    yt = torch.as_tensor(y, dtype=torch.float32)
    log = []
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(xt))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size])
            if len(idx) < 2:
                continue
            xb = random_crop(xt[idx], rng) if cfg.augment else xt[idx]
            loss = nn.functional.mse_loss(model(xb), yt[idx])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"chain-length training diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        rec = {"phase": "chainlen", "epoch": epoch, "mse": total / len(xt)}
        log.append(rec)
        if log_fn:
            log_fn(rec)
    model.eval()
    return model, log
