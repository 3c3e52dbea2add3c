"""Pixel-wise stereo contrastive loss with a momentum key encoder and a negative queue.

Query vectors come from the left feature map, their positives from the right
(key) feature map at the ground-truth correspondence. Negatives are drawn from
a local window of the right map around the match plus every vector currently
held in the FIFO queue of past keys.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .geometry import PositivePairSet

NORM_EPS = 1e-12


class DegenerateFeatureError(ValueError):
    """A zero-length feature vector cannot be unit-normalized."""


@dataclass
class FeatureMap:
    values: Tensor  # (C, H, W)
    stride: int = 1
    view: str = "left"

    def __post_init__(self):
        if self.values.dim() != 3:
            raise ValueError(f"feature map must be (C, H, W), got {tuple(self.values.shape)}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    def vectors_at(self, coords: np.ndarray) -> Tensor:
        """(P, C) vectors at integer ``(u, v)`` rows of ``coords``."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        u = torch.as_tensor(coords[:, 0])
        v = torch.as_tensor(coords[:, 1])
        return self.values[:, v, u].T


@dataclass
class ScfConfig:
    n_negatives: int = 60
    window: int = 50
    queue_size: int = 6000
    tau: float = 0.07
    normalize: bool = True
    queue_push_per_step: int = 256
    denominator: str = "standard"  # or "negatives-only": negatives only
    window_center: str = "match"  # or "query"
    exclude_neighbors: int = 1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.n_negatives < 1:
            raise ValueError("n_negatives must be at least 1")
        if self.window < 3:
            raise ValueError("window must be at least 3")
        if self.denominator not in ("standard", "negatives-only"):
            raise ValueError(f"unknown denominator mode {self.denominator!r}")
        if self.window_center not in ("match", "query"):
            raise ValueError(f"unknown window center {self.window_center!r}")


def _param_list(obj) -> list[Tensor]:
    if isinstance(obj, nn.Module):
        return list(obj.parameters())
    return list(obj)


@dataclass
class MomentumEncoderPair:
    """Query parameters θ and their moving-average copy η."""

    query: object
    key: object
    m: float = 0.999
    t: int = 0

    @classmethod
    def from_query(cls, query: nn.Module, m: float) -> "MomentumEncoderPair":
        key = copy.deepcopy(query)
        for p in key.parameters():
            p.requires_grad_(False)
        return cls(query=query, key=key, m=m, t=0)


@torch.no_grad()
def momentum_update(pair: MomentumEncoderPair) -> MomentumEncoderPair:
    """η ← m·η + (1 − m)·θ in place; θ is left alone."""
    if not 0.0 <= pair.m <= 1.0:
        raise ValueError(f"momentum {pair.m} outside [0, 1]")
    q_params = _param_list(pair.query)
    k_params = _param_list(pair.key)
    if len(q_params) != len(k_params):
        raise ValueError("query and key hold different numbers of tensors")
    for q, k in zip(q_params, k_params):
        if q.shape != k.shape:
            raise ValueError(f"parameter shape mismatch {tuple(q.shape)} vs {tuple(k.shape)}")
        k.mul_(pair.m).add_(q.detach(), alpha=1.0 - pair.m)
    pair.t += 1
    return pair


class NegativeQueue:
    """Fixed-capacity FIFO of key vectors, oldest first."""

    def __init__(self, capacity: int = 6000, dim: int | None = None, dtype=torch.float32):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.capacity = int(capacity)
        self.dim = dim
        self._data = torch.zeros((0, dim or 0), dtype=dtype)

    def __len__(self) -> int:
        return self._data.shape[0]

    @property
    def entries(self) -> Tensor:
        return self._data

    def push(self, keys: Tensor) -> "NegativeQueue":
        keys = torch.as_tensor(keys).detach()
        if keys.numel() == 0:
            return self
        keys = keys.reshape(-1, keys.shape[-1])
        if self.dim is None:
            self.dim = keys.shape[1]
            self._data = self._data.reshape(0, self.dim)
        if keys.shape[1] != self.dim:
            raise ValueError(f"key dimension {keys.shape[1]} does not match queue dimension {self.dim}")
        self._data = torch.cat([self._data.to(keys.dtype), keys])[-self.capacity :].clone()
        return self


def queue_push(queue: NegativeQueue, keys) -> NegativeQueue:
    return queue.push(keys)


def unit(x: Tensor) -> Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if x.numel() and bool((norms <= NORM_EPS).any()):
        raise DegenerateFeatureError("zero feature vector under normalize=True")
    return x / norms


def pixel_infonce(
    query: Tensor,
    positive: Tensor,
    negatives: Tensor | Sequence[Tensor],
    tau: float = 0.07,
    normalize: bool = True,
    denominator: str = "standard",
) -> Tensor:
    """Single-pixel InfoNCE term, evaluated with log-sum-exp.

    ``standard`` keeps the positive in the denominator (loss ≥ 0); the
    ``negatives-only`` variant sums negatives only.
    """
    q = torch.as_tensor(query)
    p = torch.as_tensor(positive).to(q.dtype)
    if isinstance(negatives, (list, tuple)):
        negatives = torch.stack(list(negatives)) if len(negatives) else q.new_zeros((0, q.shape[-1]))
    n = torch.as_tensor(negatives).to(q.dtype).reshape(-1, q.shape[-1])
    losses = _infonce_rows(q[None], p[None], n[None], None, tau, normalize, denominator)
    return losses[0]


def _infonce_rows(q, p, window_neg, queue, tau, normalize, denominator):
    """Per-row InfoNCE for q, p: (P, C); window_neg: (P, N, C); queue: (K, C) or None."""
    if normalize:
        q, p, window_neg = unit(q), unit(p), unit(window_neg)
        if queue is not None and len(queue):
            queue = unit(queue)
    pos = (q * p).sum(-1, keepdim=True) / tau
    parts = [torch.einsum("pc,pnc->pn", q, window_neg) / tau]
    if queue is not None and len(queue):
        parts.append(q @ queue.to(q.dtype).T / tau)
    neg = torch.cat(parts, dim=1)
    if denominator == "standard":
        logits = torch.cat([pos, neg], dim=1)
        return torch.logsumexp(logits, dim=1) - pos[:, 0]
    if neg.shape[1] == 0:
        raise ValueError("negatives-only denominator needs at least one negative")
    return torch.logsumexp(neg, dim=1) - pos[:, 0]


def window_side(cfg: ScfConfig, stride: int) -> int:
    # window is given in image pixels; convert to feature cells, keep it odd
    side = max(3, int(round(cfg.window / stride)))
    return side if side % 2 else side + 1


def sample_negative_coords(
    shape: tuple[int, int],
    centers: np.ndarray,
    n: int,
    side: int,
    rng: np.random.Generator,
    exclude: int = 1,
) -> tuple[np.ndarray, int]:
    """Uniform window negatives for every center: (P, n, 2) coords and the short-window count.

    Sampling is without replacement; a window with fewer than ``n`` candidates
    falls back to sampling with replacement and is counted.
    """
    h, w = shape
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    P = len(centers)
    if P == 0:
        return np.zeros((0, n, 2), dtype=np.int64), 0
    half = side // 2
    vv, uu = np.mgrid[0:h, 0:w]
    uu = uu.ravel()[None, :]
    vv = vv.ravel()[None, :]
    cu = centers[:, :1]
    cv = centers[:, 1:]
    cand = (np.abs(uu - cu) <= half) & (np.abs(vv - cv) <= half)
    cand &= ~((vv == cv) & (np.abs(uu - cu) <= exclude))
    counts = cand.sum(axis=1)
    keys = rng.random(cand.shape)
    keys[~cand] = np.inf
    order = np.argsort(keys, axis=1, kind="stable")
    idx = np.zeros((P, n), dtype=np.int64)
    take = min(n, order.shape[1])
    idx[:, :take] = order[:, :take]
    short = np.flatnonzero(counts < n)
    for row in short:
        if counts[row] == 0:
            raise ValueError("negative window holds no candidates")
        pool = order[row, : counts[row]]
        idx[row] = pool[rng.integers(0, counts[row], size=n)]
    flat_u = uu[0][idx]
    flat_v = vv[0][idx]
    return np.stack([flat_u, flat_v], axis=-1), int(len(short))


def sample_negatives(
    right: FeatureMap, match_coord: tuple[int, int], cfg: ScfConfig, rng: np.random.Generator
) -> Tensor:
    """(N, C) window negatives for one match coordinate."""
    _, h, w = right.shape
    coords, _ = sample_negative_coords(
        (h, w), np.array([match_coord]), cfg.n_negatives, window_side(cfg, right.stride), rng, cfg.exclude_neighbors
    )
    return right.vectors_at(coords[0])


@dataclass
class ScfResult:
    loss: Tensor
    per_pixel: Tensor
    skipped: bool = False
    short_windows: int = 0
    n_pairs: int = 0

    def __iter__(self):
        return iter((self.loss, self.per_pixel))


def _pair_losses(left: FeatureMap, keys: Tensor, stride: int, pairs, queue, cfg, rng):
    _, h, w = keys.shape
    q = left.vectors_at(pairs.query)
    p = FeatureMap(keys, stride).vectors_at(pairs.key)
    centers = pairs.key if cfg.window_center == "match" else pairs.query
    coords, short = sample_negative_coords(
        (h, w), centers, cfg.n_negatives, window_side(cfg, stride), rng, cfg.exclude_neighbors
    )
    u = torch.as_tensor(coords[..., 0])
    v = torch.as_tensor(coords[..., 1])
    neg = keys[:, v, u].permute(1, 2, 0)  # (P, N, C)
    entries = queue.entries if queue is not None and len(queue) else None
    losses = _infonce_rows(q, p, neg, entries, cfg.tau, cfg.normalize, cfg.denominator)
    return losses, short


def scf_loss(
    left: FeatureMap,
    right: FeatureMap,
    pairs: PositivePairSet,
    queue: NegativeQueue | None,
    cfg: ScfConfig,
    rng: np.random.Generator,
    detach_keys: bool = True,
) -> ScfResult:
    """Mean InfoNCE over the masked positive pairs of one stereo sample.

    ``pairs`` already excludes pixels rejected by the left-right check, so the
    plain mean equals the mask-weighted average. Keys (right features and
    queue entries) are detached unless ``detach_keys`` is False.
    """
    return scf_loss_batch([left], [right], [pairs], queue, cfg, rng, detach_keys)


def scf_loss_batch(
    lefts: Sequence[FeatureMap],
    rights: Sequence[FeatureMap],
    pair_sets: Sequence[PositivePairSet],
    queue: NegativeQueue | None,
    cfg: ScfConfig,
    rng: np.random.Generator,
    detach_keys: bool = True,
) -> ScfResult:
    """Contrastive loss pooled over every pair of every sample in a batch."""
    if not lefts:
        raise ValueError("empty batch")
    grids, all_losses = [], []
    short = 0
    for left, right, pairs in zip(lefts, rights, pair_sets):
        if left.stride != right.stride:
            raise ValueError(f"stride mismatch: {left.stride} vs {right.stride}")
        if left.shape != right.shape:
            raise ValueError(f"feature shapes differ: {left.shape} vs {right.shape}")
        _, h, w = left.shape
        grid = left.values.new_zeros((h, w))
        if len(pairs):
            keys = right.values.detach() if detach_keys else right.values
            losses, s = _pair_losses(left, keys, right.stride, pairs, queue, cfg, rng)
            short += s
            qu = torch.as_tensor(pairs.query[:, 0])
            qv = torch.as_tensor(pairs.query[:, 1])
            grid = grid.index_put((qv, qu), losses)
            all_losses.append(losses)
        grids.append(grid)
    n_pairs = sum(len(x) for x in all_losses)
    if n_pairs == 0:
        zero = lefts[0].values.sum() * 0.0
        return ScfResult(zero, torch.stack(grids) if len(grids) > 1 else grids[0], True, 0, 0)
    loss = torch.cat(all_losses).mean()
    per_pixel = torch.stack(grids) if len(grids) > 1 else grids[0]
    return ScfResult(loss, per_pixel, False, short, n_pairs)


def sample_keys_for_queue(
    rights: Iterable[Tensor], count: int, rng: np.random.Generator, normalize: bool = True
) -> Tensor:
    """Uniformly chosen key vectors (without replacement) from a batch of right maps."""
    vecs = torch.cat([r.detach().flatten(1).T for r in rights])
    if count >= len(vecs):
        chosen = vecs
    else:
        chosen = vecs[torch.as_tensor(np.sort(rng.choice(len(vecs), size=count, replace=False)))]
    if normalize:
        chosen = F.normalize(chosen, dim=1, eps=NORM_EPS)
    return chosen


def infonce_lower_bound(n_negatives: int, tau: float) -> float:
    """Loss for a perfect positive with orthogonal unit negatives."""
    return math.log1p(n_negatives * math.exp(-1.0 / tau))
