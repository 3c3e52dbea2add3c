"""Learning-free winner-take-all matcher and the RGB-volume vs feature-volume comparison."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import DomainStyle, StereoSample

VARIANTS = ("rgb-volume", "feature-volume", "wta-sad")


@dataclass(frozen=True)
class BaselineResult:
    variant: str
    in_style_err: float
    shifted_style_err: float

    @property
    def degradation(self) -> float:
        return self.shifted_style_err - self.in_style_err

    def row(self) -> dict:
        return dict(
            variant=self.variant,
            in_style_err=self.in_style_err,
            shifted_style_err=self.shifted_style_err,
            degradation=self.degradation,
        )


def box_sum(x: np.ndarray, window: int) -> np.ndarray:
    """Sum over a ``window``×``window`` neighborhood with edge replication, via an integral image.

    Sums are formed by adding and subtracting prefix sums, so equal windows of
    exactly representable values give bit-equal totals.
    """
    r = window // 2
    p = np.pad(x, r, mode="edge")
    c = np.zeros((p.shape[0] + 1, p.shape[1] + 1))
    c[1:, 1:] = p.cumsum(0).cumsum(1)
    h, w = x.shape
    return c[window : window + h, window : window + w] - c[:h, window : window + w] - c[window : window + h, :w] + c[:h, :w]


def sad_costs(left: np.ndarray, right: np.ndarray, window: int, max_disp: int) -> np.ndarray:
    """(D, H, W) window-summed absolute color differences; ``inf`` where ``u < d``.

    Window pixels past the image border reuse the nearest edge value.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.shape != right.shape:
        raise ValueError(f"shape mismatch {left.shape} vs {right.shape}")
    h, w = left.shape[:2]
    costs = np.full((max_disp, h, w), np.inf)
    for d in range(min(max_disp, w)):
        shifted = np.concatenate([np.repeat(right[:, :1], d, axis=1), right[:, : w - d]], axis=1)
        diff = np.abs(left - shifted).sum(axis=-1) if left.ndim == 3 else np.abs(left - shifted)
        box = box_sum(diff, window)
        box[:, :d] = np.inf
        costs[d] = box
    return costs


def wta_sad_match(sample: StereoSample, window: int = 5, max_disp: int = 48) -> np.ndarray:
    """Per-pixel argmin of SAD over ``d ∈ [0, max_disp)``; ties go to the smaller ``d``."""
    costs = sad_costs(sample.left_image, sample.right_image, window, max_disp)
    return np.argmin(costs, axis=0).astype(np.float32)


def run_volume_comparison(
    corpus: Sequence[StereoSample],
    test_corpus: Sequence[StereoSample],
    train_style: DomainStyle,
    shift_style: DomainStyle,
    variants: Sequence[str] = VARIANTS,
    base_config=None,
    window: int = 5,
) -> list[BaselineResult]:
    """Train each learned variant on ``train_style`` and compare >3px error across styles.

    ``base_config`` is an :class:`~stereo_consistency.experiment.ExperimentConfig`;
    the feature-volume variant runs it with both consistency losses off (keeping
    its feature volume kind), and the rgb-volume variant swaps in the RGB volume.
    """
    from . import experiment as ex

    cfg = base_config if base_config is not None else ex.ExperimentConfig()
    feature_kind = cfg.net.volume_kind if cfg.net.volume_kind != "rgb" else "correlation"
    results = []
    for variant in variants:
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if variant == "wta-sad":
            errs = []
            for style in (train_style, shift_style):
                styled = ex.styled_samples(test_corpus, style, cfg.seed)
                preds = [wta_sad_match(s, window, cfg.net.max_disp) for s in styled]
                errs.append(ex.corpus_error(preds, styled, cfg.net.max_disp))
            results.append(BaselineResult(variant, *errs))
            continue
        vcfg = ex.with_overrides(
            cfg,
            {
                "scf.enabled": False,
                "ssw.enabled": False,
                "net.volume_kind": "rgb" if variant == "rgb-volume" else feature_kind,
                "net.in_layers": [],
                "data.train_style": ex.style_to_dict(train_style),
            },
        )
        run = ex.train(vcfg, corpus)
        errs = []
        for style in (train_style, shift_style):
            styled = ex.styled_samples(test_corpus, style, cfg.seed)
            errs.append(ex.corpus_error(ex.predict(run.net, styled), styled, cfg.net.max_disp))
        results.append(BaselineResult(variant, *errs))
    return results
