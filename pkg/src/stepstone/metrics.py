"""Pair populations, ROC / low-FPR metrics and chain-level accuracy."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .simulator import ChainSample

DEFAULT_TAUS = (1e-3, 1e-4, 1e-5)


class MetricsError(ValueError):
    pass


# --- pair populations --------------------------------------------------------

@dataclass(frozen=True)
class TraceRef:
    chain_id: str
    capture_point: str


@dataclass(frozen=True)
class Pair:
    a: TraceRef
    b: TraceRef
    correlated: bool


@dataclass(frozen=True)
class PairPopulation:
    pairs: tuple[Pair, ...]
    mode: str

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.correlated for p in self.pairs], dtype=bool)

    def __len__(self) -> int:
        return len(self.pairs)


def stone_links(chain: ChainSample) -> list[tuple[str, str]]:
    """(ingress, egress) capture names for each stepping stone of a chain."""
    return [(f"h{s}_ingress", f"h{s}_egress") for s in range(1, chain.config.n_links)]


def make_pairs(chains: Sequence[ChainSample], mode: str = "network",
               neg_per_pos: int | str = "all", seed: int = 0) -> PairPopulation:
    """Correlated and cross-chain uncorrelated pairs.

    network: attacker egress of chain i vs target ingress of chain j.
    host: a stone's ingress vs its own egress (correlated) or vs the egress of
    a stone on a different chain (uncorrelated).
    """
    if len(chains) < 2:
        raise MetricsError("need at least two chains to form uncorrelated pairs")
    if mode == "network":
        a_refs = [TraceRef(c.chain_id, "h0_egress") for c in chains]
        b_refs = [TraceRef(c.chain_id, f"h{c.config.n_links}_ingress") for c in chains]
    elif mode == "host":
        a_refs, b_refs = [], []
        for c in chains:
            for ing, eg in stone_links(c):
                a_refs.append(TraceRef(c.chain_id, ing))
                b_refs.append(TraceRef(c.chain_id, eg))
    else:
        raise MetricsError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    pairs = []
    for i, a in enumerate(a_refs):
        pairs.append(Pair(a, b_refs[i], True))
        others = [j for j, b in enumerate(b_refs) if b.chain_id != a.chain_id]
        if neg_per_pos != "all" and int(neg_per_pos) < len(others):
            others = sorted(rng.choice(others, size=int(neg_per_pos), replace=False).tolist())
        pairs.extend(Pair(a, b_refs[j], False) for j in others)
    return PairPopulation(tuple(pairs), mode)


def default_neg_per_pos(n_chains: int) -> int | str:
    return "all" if n_chains <= 1000 else 1000


# --- ROC ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RocCurve:
    thresholds: np.ndarray  # descending; first is +inf
    tpr: np.ndarray
    fpr: np.ndarray
    n_pos: int
    n_neg: int


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise MetricsError("scores and labels differ in length")
    if labels.all() or not labels.any():
        raise MetricsError("ROC needs both positive and negative examples")
    return scores, labels


def roc_curve(scores, labels) -> RocCurve:
    """Threshold sweep over unique scores; a pair is flagged when score >= threshold."""
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last_of_group = np.concatenate([s[1:] != s[:-1], [True]])
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(~y)[last_of_group]
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    thresholds = np.concatenate([[np.inf], s[last_of_group]])
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    return RocCurve(thresholds, tpr, fpr, n_pos, n_neg)


def max_tpr_at_fpr(roc: RocCurve, tau: float) -> float:
    ok = roc.fpr <= tau
    return float(roc.tpr[ok].max()) if ok.any() else 0.0


def threshold_at_fpr(roc: RocCurve, tau: float) -> float:
    """Lowest threshold whose operating point keeps fpr <= tau (+inf if none)."""
    ok = np.flatnonzero(roc.fpr <= tau)
    return float(roc.thresholds[ok[-1]])


def pauc_raw(roc: RocCurve, tau: float) -> float:
    """Trapezoidal area under the ROC for fpr in [0, tau]."""
    if not 0 < tau <= 1:
        raise MetricsError("tau must lie in (0, 1]")
    fpr, tpr = roc.fpr, roc.tpr
    stop = int(np.searchsorted(fpr, tau, side="right"))
    x, y = fpr[:stop], tpr[:stop]
    if stop < len(fpr) and x[-1] < tau:
        x0, x1, y0, y1 = fpr[stop - 1], fpr[stop], tpr[stop - 1], tpr[stop]
        x = np.append(x, tau)
        y = np.append(y, y0 + (y1 - y0) * (tau - x0) / (x1 - x0))
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2))


def pauc(roc: RocCurve, tau: float) -> float:
    """Partial AUC over fpr in [0, tau] divided by tau (a perfect classifier scores 1)."""
    return pauc_raw(roc, tau) / tau


def auc_score(scores, labels) -> float:
    """Full ROC AUC via the rank-sum statistic (ties count one half)."""
    scores, labels = _check_binary(scores, labels)
    ranks = rankdata(scores)
    n_pos = labels.sum()
    n_neg = len(labels) - n_pos
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def metrics_report(scores, labels, taus: Sequence[float] = DEFAULT_TAUS, **meta) -> dict:
    roc = roc_curve(scores, labels)
    return {
        **meta,
        "n_pos": roc.n_pos,
        "n_neg": roc.n_neg,
        "auc": auc_score(scores, labels),
        "per_tau": {repr(float(t)): {"max_tpr": max_tpr_at_fpr(roc, t), "pauc": pauc(roc, t),
                                     "pauc_raw": pauc_raw(roc, t)} for t in taus},
        "roc": {"fpr": roc.fpr.tolist(), "tpr": roc.tpr.tolist(),
                "thresholds": [None if np.isinf(t) else float(t) for t in roc.thresholds]},
    }


def export_roc_csv(roc: RocCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(roc.thresholds, roc.fpr, roc.tpr):
            w.writerow(["inf" if np.isinf(t) else repr(float(t)), repr(float(f)), repr(float(p))])


# --- chain reconstruction ----------------------------------------------------

@dataclass(frozen=True)
class ChainReport:
    taus: tuple[float, ...]
    threshold: tuple[float, ...]
    avg_tpr_mean: tuple[float, ...]
    avg_tpr_std: tuple[float, ...]
    chain_accuracy: tuple[float, ...]

    def to_dict(self) -> dict:
        return {repr(t): {"threshold": th, "avg_tpr": m, "avg_tpr_std": s, "chain_accuracy": a}
                for t, th, m, s, a in zip(self.taus, self.threshold, self.avg_tpr_mean,
                                          self.avg_tpr_std, self.chain_accuracy)}


def chain_report(link_scores: Sequence[Sequence[float]], negative_scores,
                 taus: Sequence[float] = DEFAULT_TAUS) -> ChainReport:
    """Per-link recall and all-links success per chain at each FPR budget.

    The threshold for budget tau comes from the population of every link
    score (positives) and ``negative_scores``.
    """
    links = [np.asarray(s, dtype=np.float64) for s in link_scores]
    if not links or any(len(s) == 0 for s in links):
        raise MetricsError("every chain needs at least one link score")
    pos = np.concatenate(links)
    neg = np.asarray(negative_scores, dtype=np.float64)
    roc = roc_curve(np.concatenate([pos, neg]),
                    np.concatenate([np.ones(len(pos), bool), np.zeros(len(neg), bool)]))
    th, means, stds, accs = [], [], [], []
    for tau in taus:
        theta = threshold_at_fpr(roc, tau)
        recall = np.array([(s >= theta).mean() for s in links])
        th.append(theta)
        means.append(float(recall.mean()))
        stds.append(float(recall.std()))
        accs.append(float((recall == 1.0).mean()))
    return ChainReport(tuple(taus), tuple(th), tuple(means), tuple(stds), tuple(accs))


def chain_trace_accuracy(chains: Sequence[ChainSample], scorer, taus=DEFAULT_TAUS,
                         neg_per_pos: int | str = "all", seed: int = 0) -> ChainReport:
    """Score every stepping-stone link and the host-mode negatives, then report.

    ``scorer(trace_a, trace_b) -> float``.
    """
    pop = make_pairs(chains, "host", neg_per_pos, seed)
    by_id = {c.chain_id: c for c in chains}
    scores = {}
    for p in pop.pairs:
        ta = by_id[p.a.chain_id].captures[p.a.capture_point]
        tb = by_id[p.b.chain_id].captures[p.b.capture_point]
        scores[p] = scorer(ta, tb)
    link_scores = [[scores[Pair(TraceRef(c.chain_id, a), TraceRef(c.chain_id, b), True)]
                    for a, b in stone_links(c)] for c in chains]
    negs = [v for p, v in scores.items() if not p.correlated]
    return chain_report(link_scores, negs, taus)


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def chainlen_accuracy(preds, labels) -> tuple[float, float, float]:
    """(up accuracy, down accuracy, mean of the two) on rounded predictions."""
    preds = round_half_away(np.asarray(preds, dtype=np.float64).reshape(-1, 2))
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 2)
    hit = preds == labels
    up, down = float(hit[:, 0].mean()), float(hit[:, 1].mean())
    return up, down, (up + down) / 2


def majority_baseline(train_labels, test_labels) -> tuple[float, float, float]:
    """Accuracy of always predicting the most common training label per direction."""
    train = np.asarray(train_labels).reshape(-1, 2)
    test = np.asarray(test_labels).reshape(-1, 2)
    mode = []
    for k in range(2):
        vals, counts = np.unique(train[:, k], return_counts=True)
        mode.append(vals[np.argmax(counts)])
    return chainlen_accuracy(np.tile(mode, (len(test), 1)), test)
