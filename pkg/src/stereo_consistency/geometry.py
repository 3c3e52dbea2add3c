"""Reprojection between rectified views, left-right consistency masks and positive pairs.

All column lookups round half up (``floor(x + 0.5)``), the same convention the
scene renderer uses, so masks agree exactly with generated occlusion on
integer-disparity scenes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import round_half_up

DEFAULT_DELTA = 3.0


@dataclass(frozen=True)
class ReprojectionField:
    R: np.ndarray
    valid: np.ndarray
    method: str = "left-right"


@dataclass(frozen=True)
class MatchMask:
    M: np.ndarray
    delta: float = DEFAULT_DELTA


@dataclass(frozen=True)
class PositivePairSet:
    """Query/key feature-cell coordinates, both stored as ``(u, v)`` integer rows."""

    query: np.ndarray
    key: np.ndarray
    stride: int = 1

    def __len__(self) -> int:
        return len(self.query)

    def as_set(self) -> set[tuple[int, int, int, int]]:
        return {(int(a), int(b), int(c), int(d)) for (a, b), (c, d) in zip(self.query, self.key)}

    @classmethod
    def empty(cls, stride: int = 1) -> "PositivePairSet":
        z = np.zeros((0, 2), dtype=np.int64)
        return cls(z, z.copy(), stride)


def reproject(coord: tuple[int, int], disparity: float) -> tuple[float, int] | None:
    """Shift ``(u, v)`` left by ``disparity``; ``None`` when it leaves the image."""
    u, v = coord
    ur = u - disparity
    if ur < 0:
        return None
    return (ur, v)


def reprojection_error(disparity_left: np.ndarray, disparity_right: np.ndarray) -> ReprojectionField:
    """Left-right disagreement ``|d_l(u, v) - d_r(u - round(d_l), v)|`` per left pixel."""
    dl = np.asarray(disparity_left, dtype=np.float64)
    dr = np.asarray(disparity_right, dtype=np.float64)
    if dl.shape != dr.shape:
        raise ValueError(f"disparity shapes differ: {dl.shape} vs {dr.shape}")
    h, w = dl.shape
    finite = np.isfinite(dl)
    cols = np.arange(w)[None, :] - round_half_up(np.where(finite, dl, 0.0))
    in_bounds = finite & (cols >= 0) & (cols < w)
    looked = dr[np.arange(h)[:, None], np.clip(cols, 0, w - 1)]
    valid = in_bounds & np.isfinite(looked)
    R = np.where(valid, np.abs(dl - np.where(valid, looked, 0.0)), np.inf)
    return ReprojectionField(R=R, valid=valid)


def left_only_consistency(disparity_left: np.ndarray) -> ReprojectionField:
    """Fallback check when no right disparity exists.

    A pixel is invalid when another pixel in its row lands on the same right
    column with a larger disparity (it would be hidden behind it). This is a
    uniqueness heuristic, not a true left-right check; ``method`` records that.
    """
    dl = np.asarray(disparity_left, dtype=np.float64)
    h, w = dl.shape
    finite = np.isfinite(dl)
    target = np.arange(w)[None, :] - round_half_up(np.where(finite, dl, 0.0))
    in_bounds = finite & (target >= 0)
    valid = in_bounds.copy()
    for v in range(h):
        best = {}
        for u in np.flatnonzero(in_bounds[v]):
            t = int(target[v, u])
            if t not in best or dl[v, u] > dl[v, best[t]]:
                best[t] = u
        keep = np.zeros(w, dtype=bool)
        keep[list(best.values())] = True
        valid[v] &= keep
    R = np.where(valid, 0.0, np.inf)
    return ReprojectionField(R=R, valid=valid, method="left-only")


def matching_mask(field: ReprojectionField, delta: float = DEFAULT_DELTA) -> MatchMask:
    if not delta > 0:
        raise ValueError("delta must be positive")
    M = field.valid & (field.R < delta)
    return MatchMask(M=M, delta=float(delta))


def cell_mask(mask: MatchMask | np.ndarray, stride: int, rule: str = "center") -> np.ndarray:
    """Downsample a full-resolution mask onto the feature grid.

    ``"center"`` keeps a cell when its center pixel is in the mask, ``"all"``
    only when every pixel of the cell is.
    """
    M = mask.M if isinstance(mask, MatchMask) else np.asarray(mask, dtype=bool)
    h, w = M.shape
    if stride < 1 or h % stride or w % stride:
        raise ValueError(f"stride {stride} must divide image shape {M.shape}")
    if rule == "center":
        c = stride // 2
        return M[c::stride, c::stride].copy()
    if rule == "all":
        return M.reshape(h // stride, stride, w // stride, stride).all(axis=(1, 3))
    raise ValueError(f"unknown cell rule {rule!r}")


def collect_positive_pairs(
    disparity_left: np.ndarray,
    mask: MatchMask | np.ndarray,
    stride: int = 1,
    rule: str = "center",
    max_offset_error: float = 0.5,
) -> PositivePairSet:
    """Feature-cell correspondences ``(u, v) -> (u - round(d / stride), v)``.

    ``d`` is read at the center pixel of each cell. Keys that fall off the map
    or whose rounded offset misses ``d / stride`` by more than
    ``max_offset_error`` cells are dropped.
    """
    d = np.asarray(disparity_left, dtype=np.float64)
    keep = cell_mask(mask, stride, rule)
    c = stride // 2
    dc = d[c::stride, c::stride] / stride
    finite = np.isfinite(dc)
    offset = round_half_up(np.where(finite, dc, 0.0))
    hc, wc = keep.shape
    vv, uu = np.mgrid[0:hc, 0:wc]
    ku = uu - offset
    ok = keep & finite & (ku >= 0) & (ku < wc) & (np.abs(offset - dc) <= max_offset_error)
    v_idx, u_idx = np.nonzero(ok)
    query = np.stack([u_idx, v_idx], axis=1).astype(np.int64)
    key = np.stack([ku[ok], v_idx], axis=1).astype(np.int64)
    return PositivePairSet(query=query, key=key, stride=stride)


def pairs_for_sample(
    disparity_left: np.ndarray,
    disparity_right: np.ndarray | None,
    stride: int,
    delta: float = DEFAULT_DELTA,
    rule: str = "center",
) -> PositivePairSet:
    """Mask + pair collection in one call; falls back to the left-only check."""
    if disparity_right is None:
        field = left_only_consistency(disparity_left)
    else:
        field = reprojection_error(disparity_left, disparity_right)
    return collect_positive_pairs(disparity_left, matching_mask(field, delta), stride, rule)
