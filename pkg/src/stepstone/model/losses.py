"""Cosine similarities, triplet losses, online mining and decorrelation terms.

Embeddings are (..., W, D) tensors: W windows of D features each.
"""

from __future__ import annotations

import torch


class MiningError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


def _cosine(a, b, dim: int):
    num = (a * b).sum(dim)
    den = a.norm(dim=dim) * b.norm(dim=dim)
    # a zero vector is similar to nothing
    return torch.where(den > 0, num / torch.where(den > 0, den, torch.ones_like(den)),
                       torch.zeros_like(num))


def window_similarities(a, b):
    """Cosine similarity of matching windows: (..., W, D) x (..., W, D) -> (..., W)."""
    return _cosine(a, b, -1)


def temporal_similarities(a, b):
    """Cosine similarity of each feature's trajectory across windows -> (..., D)."""
    return _cosine(a, b, -2)


def triplet_loss(sim_ap, sim_an, margin: float = 0.5):
    """Mean over entries of max(0, sim_an - sim_ap + margin)."""
    if sim_ap.shape != sim_an.shape:
        raise ValueError("similarity vectors must have equal shapes")
    return torch.relu(sim_an - sim_ap + margin).mean(-1)


def pairwise_mean_similarity(anchors, positives):
    """S[i, j] = mean window similarity between anchor i and positive j."""
    a = anchors.unsqueeze(1)
    p = positives.unsqueeze(0)
    return window_similarities(a, p).mean(-1)


def mine_batch_hard(anchors, positives) -> torch.Tensor:
    """Index of the hardest negative for every anchor.

    The negative for anchor i is the positive j != i with the highest mean
    window similarity to it; ties go to the lowest index.
    """
    b = anchors.shape[0]
    if b < 2:
        raise MiningError("batch-hard mining needs at least two items")
    with torch.no_grad():
        sims = pairwise_mean_similarity(anchors, positives)
        sims = sims.masked_fill(torch.eye(b, dtype=torch.bool, device=sims.device), -torch.inf)
        # first maximal index on ties
        best = sims.max(dim=1, keepdim=True).values
        idx = (sims == best).to(torch.int8).argmax(dim=1)
    return idx


def all_triplet_losses(anchors, positives, margin: float = 0.5):
    """Window-form loss for every (i, i, j) triplet, shape (B, B); diagonal is 0."""
    a = anchors.unsqueeze(1)
    sim_ap = window_similarities(anchors, positives).unsqueeze(1)
    sim_an = window_similarities(a, positives.unsqueeze(0))
    losses = triplet_loss(sim_ap.expand_as(sim_an), sim_an, margin)
    eye = torch.eye(anchors.shape[0], dtype=torch.bool, device=losses.device)
    return losses.masked_fill(eye, 0.0)


def mine_batch_all(anchors, positives, margin: float = 0.5) -> list[tuple[int, int, int]]:
    """All (anchor, positive, negative) index triplets with nonzero loss."""
    if anchors.shape[0] < 2:
        raise MiningError("batch-all mining needs at least two items")
    with torch.no_grad():
        losses = all_triplet_losses(anchors, positives, margin)
    ii, jj = torch.nonzero(losses > 0, as_tuple=True)
    return [(int(i), int(i), int(j)) for i, j in zip(ii, jj)]


def hybrid_triplet_loss(a, p, n, margin: float = 0.5, w_mix: float = 0.5):
    """Blend of window-axis and temporal-axis triplet losses.

    ``w_mix`` weights the window form; the two endpoints return exactly one
    constituent.
    """
    window = triplet_loss(window_similarities(a, p), window_similarities(a, n), margin)
    if w_mix == 1:
        return window
    temporal = triplet_loss(temporal_similarities(a, p), temporal_similarities(a, n), margin)
    if w_mix == 0:
        return temporal
    return w_mix * window + (1 - w_mix) * temporal


def orthogonality_loss(f, axis: str = "feature"):
    """Squared Frobenius distance between the row-normalised Gram matrix and I.

    ``f`` is a (d, n) matrix of d features observed over n columns. With
    ``axis="window"`` the columns are normalised and the n x n Gram is used.
    """
    if f.dim() != 2 or f.shape[1] < 1:
        raise ValueError("expected a (d, n) matrix with n >= 1")
    if axis == "window":
        f = f.transpose(0, 1)
    elif axis != "feature":
        raise ValueError(f"unknown axis {axis!r}")
    norms = f.norm(dim=1, keepdim=True)
    f = f / torch.where(norms > 0, norms, torch.ones_like(norms))
    gram = f @ f.transpose(0, 1)
    eye = torch.eye(gram.shape[0], dtype=gram.dtype, device=gram.device)
    return ((gram - eye) ** 2).sum()


COV_EPS = 1e-4


def covariance_loss(f, eps: float = COV_EPS):
    """-log det(Cov(f) + eps*I), covariance of the d rows over n >= 2 columns."""
    if f.dim() != 2 or f.shape[1] < 2:
        raise ValueError("expected a (d, n) matrix with n >= 2")
    centred = f - f.mean(dim=1, keepdim=True)
    cov = centred @ centred.transpose(0, 1) / (f.shape[1] - 1)
    cov = cov + eps * torch.eye(cov.shape[0], dtype=cov.dtype, device=cov.device)
    sign, logdet = torch.linalg.slogdet(cov)
    if not torch.isfinite(logdet) or sign <= 0:
        raise NumericalError(f"covariance not positive definite after regularisation "
                             f"(sign={float(sign)}, logdet={float(logdet)}, "
                             f"min diag={float(cov.diagonal().min())})")
    return -logdet


def batch_feature_matrix(embeddings):
    """Stack a batch of (B, W, D) embeddings into a (D, B*W) feature matrix."""
    return embeddings.reshape(-1, embeddings.shape[-1]).transpose(0, 1)
