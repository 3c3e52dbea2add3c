"""Stereo selective whitening: instance-normalized feature covariances, their
left/right variance, and an L1 penalty on the view-sensitive covariance entries."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import Tensor


class LossTerm(NamedTuple):
    value: Tensor
    skipped: bool = False


@dataclass
class SswConfig:
    epsilon: float = 1e-5
    layers: tuple[int, ...] = (0, 1)
    clusters: int = 3
    warmup_steps: int = 50
    mask_refresh: int = 50

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not self.layers:
            raise ValueError("at least one whitening layer is required")
        if self.clusters < 2:
            raise ValueError("clusters must be at least 2")
        self.layers = tuple(self.layers)


def instance_normalize(x: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Standardize every row of ``(..., C, N)`` over its last axis (population variance)."""
    if x.shape[-1] < 2:
        raise ValueError("instance normalization needs at least two positions")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + epsilon)


def covariance(x_hat: Tensor) -> Tensor:
    """``X̂ X̂ᵀ / N`` for ``(..., C, N)`` input."""
    n = x_hat.shape[-1]
    return x_hat @ x_hat.transpose(-1, -2) / n


def flatten_spatial(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C, H*W)."""
    return x.flatten(-2)


def variance_matrix(cov_left: Sequence[Tensor] | Tensor, cov_right: Sequence[Tensor] | Tensor) -> Tensor:
    """Elementwise left/right variance of covariance matrices, averaged over samples."""
    if len(cov_left) != len(cov_right):
        raise ValueError(f"{len(cov_left)} left vs {len(cov_right)} right covariances")
    if len(cov_left) == 0:
        raise ValueError("no covariance samples")
    L = torch.stack(list(cov_left)) if not isinstance(cov_left, Tensor) else cov_left
    R = torch.stack(list(cov_right)) if not isinstance(cov_right, Tensor) else cov_right
    mu = 0.5 * (L + R)
    n = L.shape[0]
    return ((L - mu) ** 2 + (R - mu) ** 2).sum(dim=0) / (2 * n)


def kmeans_1d(values: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Globally optimal 1-D k-means (least squares) by dynamic programming.

    Returns ``(labels, centroids)`` with clusters numbered in increasing
    centroid order. Optimal 1-D clusters are contiguous in sorted order, so
    the DP over split points is exact in O(k n²).
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    n = len(x)
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    k = min(k, n)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    s1 = np.concatenate([[0.0], np.cumsum(xs)])
    s2 = np.concatenate([[0.0], np.cumsum(xs * xs)])

    def sse(i, j):
        # cost of xs[i:j] as one cluster; i may be an array
        cnt = j - i
        tot = s1[j] - s1[i]
        return (s2[j] - s2[i]) - tot * tot / np.maximum(cnt, 1)

    cost = np.full((k + 1, n + 1), np.inf)
    split = np.zeros((k + 1, n + 1), dtype=np.int64)
    cost[0, 0] = 0.0
    for c in range(1, k + 1):
        for j in range(c, n + 1):
            i = np.arange(c - 1, j)
            cand = cost[c - 1, i] + sse(i, j)
            best = int(np.argmin(cand))
            cost[c, j] = cand[best]
            split[c, j] = i[best]
    bounds = [n]
    for c in range(k, 0, -1):
        bounds.append(split[c, bounds[-1]])
    bounds = bounds[::-1]
    labels_sorted = np.zeros(n, dtype=np.int64)
    centroids = np.zeros(k)
    for c in range(k):
        a, b = bounds[c], bounds[c + 1]
        labels_sorted[a:b] = c
        centroids[c] = xs[a:b].mean() if b > a else np.nan
    labels = np.empty(n, dtype=np.int64)
    labels[order] = labels_sorted
    return labels, centroids


def select_mask(V, clusters: int = 3) -> np.ndarray:
    """Boolean C×C mask of the highest-variance cluster of strict-upper entries, mirrored.

    With fewer distinct values than clusters the values are split into as
    many clusters as there are distinct values; a single distinct value
    (nothing stands out) selects nothing.
    """
    V = np.asarray(V.detach().cpu() if isinstance(V, Tensor) else V, dtype=np.float64)
    C = V.shape[0]
    iu = np.triu_indices(C, k=1)
    vals = V[iu]
    upper = np.zeros(len(vals), dtype=bool)
    n_distinct = len(np.unique(vals))
    if n_distinct >= 2:
        labels, _ = kmeans_1d(vals, min(clusters, n_distinct))
        upper = labels == labels.max()
    mask = np.zeros((C, C), dtype=bool)
    mask[iu] = upper
    return mask | mask.T


def whitening_penalty(x_hat: Tensor, mask: Tensor | np.ndarray) -> Tensor:
    """‖Σ(X̂) ⊙ mask ⊙ strict_upper‖₁, averaged over any leading batch axes."""
    cov = covariance(x_hat)
    m = torch.as_tensor(np.asarray(mask), dtype=cov.dtype)
    m = torch.triu(m, diagonal=1)
    per = (cov * m).abs().sum(dim=(-1, -2))
    return per.mean() if per.dim() else per


@dataclass
class CovarianceStats:
    """Running left/right covariance variance per whitening layer and the frozen masks.

    ``V`` is accumulated as an exact sample mean over every pair seen so far;
    masks are computed after ``warmup_steps`` steps and refreshed every
    ``mask_refresh`` steps.
    """

    n_layers: int
    clusters: int = 3
    warmup_steps: int = 50
    mask_refresh: int = 50
    sums: list = field(default_factory=list)
    sample_count: int = 0
    steps: int = 0
    masks: list = field(default_factory=list)

    @property
    def ready(self) -> bool:
        return bool(self.masks)

    @property
    def V(self) -> list[np.ndarray]:
        if self.sample_count == 0:
            return []
        return [s / (2 * self.sample_count) for s in self.sums]

    @torch.no_grad()
    def accumulate(self, cov_left: Sequence[Tensor], cov_right: Sequence[Tensor]) -> None:
        """Add one step of per-layer (B, C, C) covariances for both views."""
        if len(cov_left) != self.n_layers or len(cov_right) != self.n_layers:
            raise ValueError("covariance lists must cover every whitening layer")
        batch = None
        for li, (L, R) in enumerate(zip(cov_left, cov_right)):
            L = L.detach().double().reshape(-1, *L.shape[-2:])
            R = R.detach().double().reshape(-1, *R.shape[-2:])
            mu = 0.5 * (L + R)
            s = ((L - mu) ** 2 + (R - mu) ** 2).sum(dim=0).cpu().numpy()
            if len(self.sums) <= li:
                self.sums.append(np.zeros_like(s))
            self.sums[li] += s
            batch = L.shape[0]
        self.sample_count += batch
        self.steps += 1
        if self.steps == self.warmup_steps or (
            self.steps > self.warmup_steps and (self.steps - self.warmup_steps) % self.mask_refresh == 0
        ):
            self.refresh()

    def refresh(self) -> None:
        self.masks = [select_mask(v, self.clusters) for v in self.V]


def ssw_loss(normalized_left: Sequence[Tensor], stats: CovarianceStats | Sequence) -> LossTerm:
    """Mean whitening penalty over the whitening layers, left view only.

    ``stats`` is either a :class:`CovarianceStats` or a plain list of masks.
    Before the masks exist the loss is zero and flagged as skipped.
    """
    masks = stats.masks if isinstance(stats, CovarianceStats) else list(stats)
    if not normalized_left:
        raise ValueError("no whitening layers")
    if not masks:
        return LossTerm(normalized_left[0].sum() * 0.0, True)
    if len(masks) != len(normalized_left):
        raise ValueError(f"{len(masks)} masks for {len(normalized_left)} layers")
    total = sum(whitening_penalty(x, m) for x, m in zip(normalized_left, masks))
    return LossTerm(total / len(normalized_left), False)
