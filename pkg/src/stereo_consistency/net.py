"""A small end-to-end stereo network: encoder, cost volume, 3-D aggregation, soft-argmin."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .data import StereoSample
from .scf import FeatureMap
from .ssw import LossTerm, instance_normalize

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
VOLUME_KINDS = ("concat", "correlation", "rgb")


@dataclass
class NetworkConfig:
    channels: int = 16
    stride: int = 4
    max_disp: int = 48
    volume_kind: str = "correlation"
    aggregation_depth: int = 2
    aggregation_width: int = 8
    in_layers: tuple[int, ...] = (0, 1)
    epsilon: float = 1e-5
    residual: bool = True

    def __post_init__(self):
        self.in_layers = tuple(self.in_layers)
        if self.channels < 4:
            raise ValueError("channels must be at least 4")
        if self.stride not in (1, 2, 4):
            raise ValueError("stride must be 1, 2 or 4")
        if self.max_disp % self.stride:
            raise ValueError(f"max_disp={self.max_disp} not divisible by stride={self.stride}")
        if self.volume_kind not in VOLUME_KINDS:
            raise ValueError(f"unknown volume kind {self.volume_kind!r}")
        if any(i not in (0, 1, 2) for i in self.in_layers):
            raise ValueError("in_layers index encoder stages 0, 1, 2")

    @property
    def levels(self) -> int:
        return self.max_disp // self.stride


@dataclass
class TotalLossConfig:
    lambda_scf: float = 1.0
    lambda_ssw: float = 0.1
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        if self.lambda_scf < 0 or self.lambda_ssw < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.smooth_l1_beta <= 0:
            raise ValueError("smooth_l1_beta must be positive")


def normalize_colors(images: Tensor) -> Tensor:
    """(B, 3, H, W) in [0, 1] -> ImageNet-standardized."""
    mean = images.new_tensor(IMAGENET_MEAN)[None, :, None, None]
    std = images.new_tensor(IMAGENET_STD)[None, :, None, None]
    return (images - mean) / std


def to_tensor_images(images, dtype=torch.float32) -> Tensor:
    """Accept (H, W, 3), (B, H, W, 3) arrays or (B, 3, H, W) tensors."""
    if isinstance(images, Tensor):
        t = images
        if t.dim() == 3:
            t = t[None]
        if t.shape[1] != 3 and t.shape[-1] == 3:
            t = t.permute(0, 3, 1, 2)
        return t.to(dtype)
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


class InstanceNorm(nn.Module):
    """Affine-free instance normalization that also exposes its output for whitening."""

    def __init__(self, epsilon: float = 1e-5):
        super().__init__()
        self.epsilon = epsilon

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        return instance_normalize(x.reshape(b, c, h * w), self.epsilon).reshape(b, c, h, w)


class Encoder(nn.Module):
    """Three conv stages; the first log2(stride) of them downsample by two.

    Stages listed in ``in_layers`` apply instance normalization after their
    convolution; the others apply none (no batch statistics anywhere).
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        c = cfg.channels
        widths = [3, c // 2, c, c]
        n_down = int(math.log2(cfg.stride))
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2 if i < n_down else 1, padding=1)
            for i in range(3)
        )
        self.norms = nn.ModuleList(
            InstanceNorm(cfg.epsilon) if i in cfg.in_layers else nn.Identity() for i in range(3)
        )
        self.in_layers = cfg.in_layers

    def stages(self, images: Tensor) -> list[Tensor]:
        """Every stage's output before its nonlinearity (after IN where present)."""
        x = normalize_colors(images)
        outs = []
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            x = norm(conv(x))
            outs.append(x)
            if i < 2:
                x = F.relu(x)
        return outs

    def forward(self, images: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Features (B, C, H/s, W/s) and the instance-normalized stage outputs."""
        outs = self.stages(images)
        return outs[-1], [outs[i] for i in self.in_layers]


def concat_volume(left: Tensor, right: Tensor, levels: int) -> Tensor:
    """(B, 2C, levels, H, W): left features stacked with right shifted k columns."""
    b, c, h, w = left.shape
    vol = left.new_zeros((b, 2 * c, levels, h, w))
    for k in range(levels):
        vol[:, :c, k] = left
        if k == 0:
            vol[:, c:, k] = right
        elif k < w:
            vol[:, c:, k, :, k:] = right[..., : w - k]
    return vol


def correlation_volume(left: Tensor, right: Tensor, levels: int) -> Tensor:
    """(B, 1, levels, H, W) per-pixel dot products with the shifted right map."""
    b, c, h, w = left.shape
    vol = left.new_zeros((b, 1, levels, h, w))
    for k in range(levels):
        if k == 0:
            vol[:, 0, k] = (left * right).sum(1)
        elif k < w:
            vol[:, 0, k, :, k:] = (left[..., k:] * right[..., : w - k]).sum(1)
    return vol


def rgb_volume(left_images: Tensor, right_images: Tensor, max_disp: int) -> Tensor:
    """(B, 6, D, H, W) full-resolution stack of color-normalized image pairs."""
    return concat_volume(normalize_colors(left_images), normalize_colors(right_images), max_disp)


def build_cost_volume(left, right, kind: str, max_disp: int) -> Tensor:
    """Cost volume for feature maps (concat, correlation) or raw images (rgb).

    ``left``/``right`` may be :class:`FeatureMap` objects or batched tensors.
    Feature inputs use ``max_disp / stride`` disparity levels.
    """
    stride = 1
    if isinstance(left, FeatureMap):
        stride = left.stride
        if isinstance(right, FeatureMap) and right.stride != stride:
            raise ValueError("left and right strides differ")
        left_t, right_t = left.values[None], right.values[None] if isinstance(right, FeatureMap) else right
    else:
        left_t, right_t = left, right
    if left_t.shape != right_t.shape:
        raise ValueError(f"shape mismatch {tuple(left_t.shape)} vs {tuple(right_t.shape)}")
    if kind == "rgb":
        if stride != 1 or left_t.shape[1] != 3:
            raise ValueError("rgb volumes are built from 3-channel images at stride 1, not feature maps")
        return rgb_volume(left_t, right_t, max_disp)
    levels = max_disp // stride
    if levels < 1:
        raise ValueError("max_disp / stride must be at least 1")
    if kind == "concat":
        return concat_volume(left_t, right_t, levels)
    if kind == "correlation":
        return correlation_volume(left_t, right_t, levels)
    raise ValueError(f"unknown volume kind {kind!r}")


class RgbMixer(nn.Module):
    """Single learned 3-D conv taking the full-resolution RGB volume to aggregation size."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        s = cfg.stride
        self.conv = nn.Conv3d(6, 2 * cfg.channels, kernel_size=s, stride=s)

    def forward(self, vol: Tensor) -> Tensor:
        return self.conv(vol)


class Aggregator(nn.Module):
    def __init__(self, in_channels: int, cfg: NetworkConfig):
        super().__init__()
        layers = []
        c = in_channels
        for _ in range(cfg.aggregation_depth):
            layers += [nn.Conv3d(c, cfg.aggregation_width, 3, padding=1), nn.ReLU()]
            c = cfg.aggregation_width
        layers.append(nn.Conv3d(c, 1, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, vol: Tensor) -> Tensor:
        return self.body(vol)[:, 0]


def aggregate(
    volume: Tensor, aggregator: Aggregator, out_shape: tuple[int, int, int] | None = None, residual: bool = False
) -> Tensor:
    """Matching costs (B, D', H', W'), trilinearly upsampled to ``out_shape`` when given.

    ``residual`` adds the negated single-channel volume to the learned costs,
    so a correlation volume yields a matching cost before any training.
    """
    costs = aggregator(volume)
    if residual:
        costs = costs - volume[:, 0]
    if out_shape is not None and tuple(costs.shape[1:]) != tuple(out_shape):
        costs = F.interpolate(costs[:, None], size=out_shape, mode="trilinear", align_corners=False)[:, 0]
    return costs


def soft_argmin(costs: Tensor) -> Tensor:
    """Expected disparity under softmax(−cost) along axis 1 of (B, D, H, W)."""
    prob = F.softmax(-costs, dim=1)
    d = torch.arange(costs.shape[1], dtype=costs.dtype, device=costs.device)
    return (prob * d[None, :, None, None]).sum(dim=1)


class StereoNet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        if cfg.volume_kind == "rgb":
            self.mixer = RgbMixer(cfg)
            agg_in = 2 * cfg.channels
        else:
            self.mixer = None
            agg_in = 2 * cfg.channels if cfg.volume_kind == "concat" else 1
        self.aggregator = Aggregator(agg_in, cfg)

    def forward(self, left_images: Tensor, right_images: Tensor, key_encoder: Encoder | None = None) -> dict:
        """Disparity plus the intermediate features used by the consistency losses.

        With ``key_encoder`` the right view goes through it (training with a
        momentum encoder); otherwise the query encoder sees both views.
        """
        h, w = left_images.shape[-2:]
        s = self.cfg.stride
        if h % s or w % s:
            raise ValueError(f"image size {(h, w)} not divisible by stride {s}")
        out = {}
        if self.cfg.volume_kind == "rgb":
            vol = self.mixer(rgb_volume(left_images, right_images, self.cfg.max_disp))
        else:
            left_feat, left_norm = self.encoder(left_images)
            right_enc = key_encoder if key_encoder is not None else self.encoder
            right_feat, right_norm = right_enc(right_images)
            vol = build_cost_volume(left_feat, right_feat, self.cfg.volume_kind, self.cfg.levels)
            out.update(left_features=left_feat, right_features=right_feat, left_normalized=left_norm, right_normalized=right_norm)
        residual = self.cfg.volume_kind == "correlation" and self.cfg.residual
        costs = aggregate(vol, self.aggregator, (self.cfg.max_disp, h, w), residual)
        out["costs"] = costs
        out["disparity"] = soft_argmin(costs)
        return out


def extract_features(image, encoder: Encoder, stride: int | None = None, view: str = "left") -> FeatureMap:
    """Feature map of one image (H, W, 3) with the given encoder."""
    t = to_tensor_images(image, dtype=next(encoder.parameters()).dtype)
    feats, _ = encoder(t)
    if stride is None:
        stride = t.shape[-1] // feats.shape[-1]
    return FeatureMap(feats[0], stride, view)


def smooth_l1_disparity_loss(
    pred: Tensor, gt: Tensor, valid_mask: Tensor | None = None, beta: float = 1.0, max_disp: float | None = None
) -> LossTerm:
    """Mean Huber penalty over valid pixels (finite gt, below ``max_disp``, inside the mask)."""
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    valid = torch.isfinite(gt)
    if valid_mask is not None:
        valid &= torch.as_tensor(valid_mask, dtype=torch.bool)
    if max_disp is not None:
        valid &= torch.nan_to_num(gt, nan=float(max_disp)) < max_disp
    if not bool(valid.any()):
        return LossTerm(pred.sum() * 0.0, True)
    return LossTerm(F.smooth_l1_loss(pred[valid], gt[valid], beta=beta), False)


def total_loss(disp_loss, scf_loss, ssw_loss, cfg: TotalLossConfig) -> Tensor:
    """Disparity loss plus the weighted consistency terms; zero weights drop their term."""
    value = lambda t: t.value if isinstance(t, LossTerm) else (t.loss if hasattr(t, "loss") else t)
    loss = value(disp_loss)
    if cfg.lambda_scf:
        loss = loss + cfg.lambda_scf * value(scf_loss)
    if cfg.lambda_ssw:
        loss = loss + cfg.lambda_ssw * value(ssw_loss)
    return loss


@torch.no_grad()
def infer(sample: StereoSample, net: StereoNet) -> np.ndarray:
    """Predicted left disparity; the query encoder handles both views."""
    dtype = next(net.parameters()).dtype
    left = to_tensor_images(sample.left_image, dtype)
    right = to_tensor_images(sample.right_image, dtype)
    return net(left, right)["disparity"][0].cpu().numpy()


@torch.no_grad()
def infer_batch(left: np.ndarray, right: np.ndarray, net: StereoNet, batch_size: int = 16) -> np.ndarray:
    dtype = next(net.parameters()).dtype
    out = []
    for i in range(0, len(left), batch_size):
        l = to_tensor_images(left[i : i + batch_size], dtype)
        r = to_tensor_images(right[i : i + batch_size], dtype)
        out.append(net(l, r)["disparity"].cpu().numpy())
    return np.concatenate(out)
