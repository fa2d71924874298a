"""Training loops for the shared FEN and the similarity head, and inference."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ..features import DEFAULT_DT, interval_features
from ..traffic import Trace
from .chainlen import ChainLenCNN, ChainLenConfig
from .fen import FEN, ChainHead, CorrelationHead, FenConfig
from .losses import (all_triplet_losses, batch_feature_matrix, covariance_loss,
                     hybrid_triplet_loss, mine_batch_hard, orthogonality_loss,
                     window_similarities)

logger = logging.getLogger(__name__)

LAMBDA_GRID = (0.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
CHAIN_LAMBDA_GRID = (0.0, 0.1, 0.5, 1.0)


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite; ``state`` holds the last good parameters."""

    def __init__(self, msg, state, log):
        super().__init__(msg)
        self.state = state
        self.log = log


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.5
    mining: str = "batch_hard"  # batch_hard | batch_all
    loss: str = "triplet"  # triplet | hybrid
    w_mix: float = 0.5
    lambda_orth: float = 0.0
    lambda_cov: float = 0.0
    lambda_chain: float = 0.0
    orth_axis: str = "feature"
    batch_size: int = 64
    epochs: int = 20
    lr: float = 1e-3
    seed: int = 0
    head_epochs: int = 60
    head_lr: float = 1e-3
    head_negatives: int = 4

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if not 0 <= self.w_mix <= 1:
            raise ValueError("w_mix must lie in [0, 1]")
        if min(self.lambda_orth, self.lambda_cov, self.lambda_chain) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.mining not in ("batch_hard", "batch_all"):
            raise ValueError(f"unknown mining strategy {self.mining!r}")
        if self.loss not in ("triplet", "hybrid"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.orth_axis not in ("feature", "window"):
            raise ValueError(f"unknown orthogonality axis {self.orth_axis!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _pair_loss(cfg: TrainConfig, a, p, n):
    if cfg.loss == "hybrid":
        return hybrid_triplet_loss(a, p, n, cfg.margin, cfg.w_mix)
    return hybrid_triplet_loss(a, p, n, cfg.margin, 1.0)


def correlation_loss(cfg: TrainConfig, emb_a, emb_p):
    """Mined triplet (or hybrid) loss for a batch of anchor/positive embeddings."""
    if cfg.mining == "batch_hard":
        neg = mine_batch_hard(emb_a, emb_p)
        return _pair_loss(cfg, emb_a, emb_p, emb_p[neg]).mean()
    with torch.no_grad():
        mask = all_triplet_losses(emb_a, emb_p, cfg.margin) > 0
    if cfg.loss == "triplet":
        losses = all_triplet_losses(emb_a, emb_p, cfg.margin)
        n_active = mask.sum()
        return losses.sum() / n_active if n_active > 0 else losses.sum() * 0.0
    ii, jj = torch.nonzero(mask, as_tuple=True)
    if len(ii) == 0:
        return (emb_a.sum() + emb_p.sum()) * 0.0
    return _pair_loss(cfg, emb_a[ii], emb_p[ii], emb_p[jj]).mean()


def total_loss(cfg: TrainConfig, fen: FEN, xa, xp, chain_head: ChainHead | None = None,
               labels_a=None, labels_p=None):
    """Full training objective; returns (loss, dict of components)."""
    emb_a, tok_a = fen(xa)
    emb_p, tok_p = fen(xp)
    loss = correlation_loss(cfg, emb_a, emb_p)
    parts = {"triplet": loss.item()}
    if cfg.lambda_orth > 0:
        if cfg.orth_axis == "feature":
            orth = orthogonality_loss(batch_feature_matrix(torch.cat([emb_a, emb_p])))
        else:
            both = torch.cat([emb_a, emb_p])
            orth = torch.stack([orthogonality_loss(e.transpose(0, 1), "window")
                                for e in both]).mean()
        loss = loss + cfg.lambda_orth * orth
        parts["orth"] = orth.item()
    if cfg.lambda_cov > 0:
        cov = covariance_loss(batch_feature_matrix(torch.cat([emb_a, emb_p])))
        loss = loss + cfg.lambda_cov * cov
        parts["cov"] = cov.item()
    if cfg.lambda_chain > 0:
        if chain_head is None or tok_a is None:
            raise ValueError("lambda_chain > 0 needs a FEN with a chain token and a chain head")
        pred = chain_head(torch.cat([tok_a, tok_p]))
        target = torch.cat([labels_a, labels_p]).to(pred.dtype)
        chain = F.mse_loss(pred, target)
        loss = loss + cfg.lambda_chain * chain
        parts["chain"] = chain.item()
    return loss, parts


def _to_tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float32))


def embed(fen: FEN, x, batch_size: int = 64) -> torch.Tensor:
    """Eval-mode window embeddings for an (N, C, T) array."""
    fen.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            out.append(fen(_to_tensor(x[start:start + batch_size]))[0])
    return torch.cat(out) if out else torch.zeros(0)


def mean_similarity_auc(fen: FEN, xa, xp) -> float:
    from ..metrics import auc_score

    ea, ep = embed(fen, xa), embed(fen, xp)
    scores = window_similarities(ea.unsqueeze(1), ep.unsqueeze(0)).mean(-1).numpy()
    labels = np.eye(len(xa), dtype=bool)
    return auc_score(scores.ravel(), labels.ravel())


def train_fen(xa, xp, cfg: TrainConfig, fen_cfg: FenConfig, labels_a=None, labels_p=None,
              val: tuple | None = None, log_fn: Callable[[dict], None] | None = None):
    """Train the shared FEN on anchor (attacker-side) and positive (target-side) tensors.

    Returns ``(fen, chain_head, log)``; ``chain_head`` is None unless the FEN
    has a chain token.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    fen = FEN(fen_cfg)
    chain_head = ChainHead(fen_cfg.hidden_dim) if fen_cfg.chain_token else None
    params = list(fen.parameters()) + (list(chain_head.parameters()) if chain_head else [])
    opt = torch.optim.Adam(params, lr=cfg.lr)
    n = len(xa)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, cfg.epochs * steps_per_epoch))
    xa_t, xp_t = _to_tensor(xa), _to_tensor(xp)
    la = _to_tensor(labels_a) if labels_a is not None else None
    lp = _to_tensor(labels_p) if labels_p is not None else None
    log: list[dict] = []
    good = _snapshot(fen, chain_head)
    for epoch in range(cfg.epochs):
        fen.train()
        if chain_head:
            chain_head.train()
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size])
            if len(idx) < 2:
                continue
            loss, parts = total_loss(cfg, fen, xa_t[idx], xp_t[idx], chain_head,
                                     None if la is None else la[idx],
                                     None if lp is None else lp[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", good, log)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            batches += 1
            sums["loss"] = sums.get("loss", 0.0) + loss.item()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
        good = _snapshot(fen, chain_head)
        rec = {"phase": "fen", "epoch": epoch, **{k: v / max(batches, 1) for k, v in sums.items()}}
        if val is not None:
            rec["val_auc"] = mean_similarity_auc(fen, *val)
        log.append(rec)
        if log_fn:
            log_fn(rec)
    fen.eval()
    return fen, chain_head, log


def _snapshot(fen, chain_head):
    return {"fen": copy.deepcopy(fen.state_dict()),
            "chain_head": copy.deepcopy(chain_head.state_dict()) if chain_head else None}


def head_training_set(emb_a, emb_p, negatives: int, rng: np.random.Generator):
    """Similarity profiles for every positive pair plus sampled cross-chain negatives."""
    n = len(emb_a)
    sims, labels = [window_similarities(emb_a, emb_p)], [torch.ones(n)]
    k = min(negatives, n - 1)
    if k > 0:
        offs = np.stack([rng.choice(np.arange(1, n), size=k, replace=False) for _ in range(n)])
        j = (np.arange(n)[:, None] + offs) % n
        ii = torch.from_numpy(np.repeat(np.arange(n), k))
        jj = torch.from_numpy(j.ravel())
        sims.append(window_similarities(emb_a[ii], emb_p[jj]))
        labels.append(torch.zeros(len(ii)))
    return torch.cat(sims), torch.cat(labels)


def train_head(sims, labels, n_windows: int, epochs: int = 60, lr: float = 1e-3,
               seed: int = 0, batch_size: int = 256, log_fn=None):
    """Fit the MLP head on similarity profiles with binary cross-entropy."""
    sims = torch.as_tensor(sims, dtype=torch.float32)
    labels = torch.as_tensor(labels, dtype=torch.float32)
    if labels.min() == labels.max():
        raise ValueError("head training set contains a single class")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    head = CorrelationHead(n_windows)
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    pos_weight = (labels == 0).sum() / (labels == 1).sum()
    log = []
    for epoch in range(epochs):
        head.train()
        order = torch.from_numpy(rng.permutation(len(labels)))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            loss = F.binary_cross_entropy_with_logits(head.logits(sims[idx]), labels[idx],
                                                      pos_weight=pos_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        rec = {"phase": "head", "epoch": epoch, "bce": total / len(labels)}
        log.append(rec)
        if log_fn:
            log_fn(rec)
    head.eval()
    return head, log


@dataclass
class ModelBundle:
    fen: FEN
    head: CorrelationHead
    fen_config: FenConfig
    train_config: TrainConfig = field(default_factory=TrainConfig)
    chain_head: ChainHead | None = None
    log: list = field(default_factory=list)
    dt: float = DEFAULT_DT

    def featurize(self, trace: Trace, origin: float = 0.0) -> np.ndarray:
        return interval_features(trace, self.dt, self.fen_config.input_len, origin).data

    def embed(self, x) -> torch.Tensor:
        return embed(self.fen, x)

    def score_embeddings(self, emb_a, emb_b) -> np.ndarray:
        """Probability for each aligned pair (emb_a[i], emb_b[i])."""
        self.head.eval()
        with torch.no_grad():
            return self.head(window_similarities(emb_a, emb_b)).numpy().astype(np.float64)

    def score_matrix(self, emb_a, emb_b) -> np.ndarray:
        """Probabilities for every (a_i, b_j) combination, shape (len(a), len(b))."""
        rows = [self.score_embeddings(emb_a[i:i + 1].expand(len(emb_b), -1, -1), emb_b)
                for i in range(len(emb_a))]
        return np.stack(rows) if rows else np.zeros((0, len(emb_b)))

    def correlation_score(self, trace_a: Trace, trace_b: Trace, origin: float = 0.0) -> float:
        x = np.stack([self.featurize(trace_a, origin), self.featurize(trace_b, origin)])
        e = self.embed(x)
        return float(self.score_embeddings(e[:1], e[1:])[0])

    def predict_chain_length(self, x) -> np.ndarray:
        if self.chain_head is None:
            raise ValueError("model has no chain-length head")
        self.fen.eval()
        with torch.no_grad():
            _, tok = self.fen(_to_tensor(x))
            return self.chain_head(tok).numpy().astype(np.float64)


def fit_bundle(xa, xp, cfg: TrainConfig, fen_cfg: FenConfig, labels_a=None, labels_p=None,
               val=None, log_fn=None) -> ModelBundle:
    """Train the FEN, then the head on frozen embeddings of the same training set."""
    fen, chain_head, log = train_fen(xa, xp, cfg, fen_cfg, labels_a, labels_p, val, log_fn)
    ea, ep = embed(fen, xa), embed(fen, xp)
    sims, labels = head_training_set(ea, ep, cfg.head_negatives, np.random.default_rng(cfg.seed))
    head, head_log = train_head(sims, labels, fen_cfg.n_windows, cfg.head_epochs, cfg.head_lr,
                                cfg.seed, log_fn=log_fn)
    return ModelBundle(fen, head, fen_cfg, cfg, chain_head, log + head_log)


def untrained_bundle(fen_cfg: FenConfig, seed: int = 0) -> ModelBundle:
    torch.manual_seed(seed)
    fen = FEN(fen_cfg).eval()
    head = CorrelationHead(fen_cfg.n_windows).eval()
    return ModelBundle(fen, head, fen_cfg)


# --- checkpoints -------------------------------------------------------------

CHECKPOINT_FORMAT = "stepstone-checkpoint/1"


def _state_arrays(prefix: str, module: nn.Module | None) -> dict[str, np.ndarray]:
    if module is None:
        return {}
    return {f"{prefix}.{k}": v.detach().cpu().numpy().astype("<f4")
            for k, v in module.state_dict().items() if v.dtype.is_floating_point}


def save_checkpoint(path, bundle: ModelBundle, chainlen: ChainLenCNN | None = None,
                    chainlen_cfg: ChainLenConfig | None = None) -> None:
    """Write a single .npz with a JSON header and float32 parameter arrays."""
    meta = {"format": CHECKPOINT_FORMAT, "fen_config": bundle.fen_config.to_dict(),
            "train_config": bundle.train_config.to_dict(), "dt": bundle.dt,
            "has_chain_head": bundle.chain_head is not None,
            "chainlen_config": chainlen_cfg.to_dict() if chainlen is not None else None,
            "log": bundle.log}
    arrays = {**_state_arrays("fen", bundle.fen), **_state_arrays("head", bundle.head),
              **_state_arrays("chain_head", bundle.chain_head)}
    if chainlen is not None:
        arrays.update({f"chainlen.{k}": v.detach().cpu().numpy()
                       for k, v in chainlen.state_dict().items()})
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def _load_state(module: nn.Module, prefix: str, arrays) -> None:
    state = module.state_dict()
    for k in state:
        key = f"{prefix}.{k}"
        if key in arrays:
            state[k] = torch.from_numpy(np.array(arrays[key])).to(state[k].dtype)
    module.load_state_dict(state)


def load_checkpoint(path) -> tuple[ModelBundle, ChainLenCNN | None]:
    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    fen_cfg = FenConfig.from_dict(meta["fen_config"])
    fen = FEN(fen_cfg)
    _load_state(fen, "fen", arrays)
    head = CorrelationHead(fen_cfg.n_windows)
    _load_state(head, "head", arrays)
    chain_head = None
    if meta["has_chain_head"]:
        chain_head = ChainHead(fen_cfg.hidden_dim)
        _load_state(chain_head, "chain_head", arrays)
        chain_head.eval()
    bundle = ModelBundle(fen.eval(), head.eval(), fen_cfg, TrainConfig(**meta["train_config"]),
                         chain_head, meta["log"], meta["dt"])
    chainlen = None
    if meta.get("chainlen_config"):
        chainlen = ChainLenCNN(ChainLenConfig.from_dict(meta["chainlen_config"]))
        _load_state(chainlen, "chainlen", arrays)
        chainlen.eval()
    return bundle, chainlen
