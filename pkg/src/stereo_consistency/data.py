"""Synthetic rectified stereo pairs and photometric domain shifts.

Scenes are random-dot stereograms built from piecewise-planar layers. Every
layer carries its own random texture, indexed by left-view column, so the
right view can be rendered exactly by inverting the plane equation per row.
Ground truth for both views and the left occlusion mask fall out of the
z-buffer.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class SceneError(ValueError):
    """Scene description that cannot be rendered under the given limits."""


class StyleError(ValueError):
    """Photometric style parameters outside their documented range."""


def round_half_up(x):
    """Nearest-integer rounding used for every disparity lookup in the package."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


@dataclass
class StereoSample:
    left_image: np.ndarray
    right_image: np.ndarray
    disparity_left: np.ndarray
    disparity_right: np.ndarray | None = None
    occlusion_left: np.ndarray | None = None
    sample_id: str = ""
    style_tag: str = "clean"

    @property
    def shape(self) -> tuple[int, int]:
        return self.disparity_left.shape

    def replace(self, **changes) -> "StereoSample":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class Layer:
    """A planar patch in left-image coordinates.

    ``x0, y0, x1, y1`` is the bounding box (end exclusive); ``shape`` is
    ``"rect"`` or ``"disc"`` (ellipse inscribed in the box). Disparity over the
    patch is ``disparity + slope_x * (x - xc) + slope_y * (y - yc)`` with
    ``(xc, yc)`` the box center.
    """

    x0: float
    y0: float
    x1: float
    y1: float
    disparity: float
    shape: str = "rect"
    slope_x: float = 0.0
    slope_y: float = 0.0

    def contains(self, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
        if self.shape == "rect":
            return (xx >= self.x0) & (xx < self.x1) & (yy >= self.y0) & (yy < self.y1)
        if self.shape == "disc":
            cx, cy = (self.x0 + self.x1 - 1) / 2, (self.y0 + self.y1 - 1) / 2
            rx, ry = max((self.x1 - self.x0) / 2, 0.5), max((self.y1 - self.y0) / 2, 0.5)
            return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        raise SceneError(f"unknown layer shape {self.shape!r}")

    def center(self) -> tuple[float, float]:
        return (self.x0 + self.x1 - 1) / 2, (self.y0 + self.y1 - 1) / 2


@dataclass(frozen=True)
class SceneSpec:
    """Background plane plus foreground layers.

    The background covers the whole image; its plane is anchored at the image
    center. An empty ``layers`` tuple with zero background disparity is the
    identity scene.
    """

    background_disparity: float = 0.0
    background_slope_x: float = 0.0
    background_slope_y: float = 0.0
    layers: tuple[Layer, ...] = ()
    dot_size: int = 1


@dataclass(frozen=True)
class DomainStyle:
    """Photometric transform; the default instance is the identity.

    ``hue_rotation`` is in degrees about the gray axis. When ``asymmetric`` is
    set, each view draws its own parameters around these values with relative
    spread ``jitter``.
    """

    gamma: float = 1.0
    brightness_offset: float = 0.0
    contrast_scale: float = 1.0
    noise_sigma: float = 0.0
    hue_rotation: float = 0.0
    asymmetric: bool = False
    jitter: float = 0.1
    name: str = ""

    def validate(self) -> None:
        if not 0.25 <= self.gamma <= 4.0:
            raise StyleError(f"gamma={self.gamma} outside [0.25, 4]")
        if not 0.0 <= self.noise_sigma <= 0.2:
            raise StyleError(f"noise_sigma={self.noise_sigma} outside [0, 0.2]")
        if not 0.0 < self.contrast_scale <= 4.0:
            raise StyleError(f"contrast_scale={self.contrast_scale} outside (0, 4]")
        if not -1.0 <= self.brightness_offset <= 1.0:
            raise StyleError(f"brightness_offset={self.brightness_offset} outside [-1, 1]")
        if not -180.0 <= self.hue_rotation <= 180.0:
            raise StyleError(f"hue_rotation={self.hue_rotation} outside [-180, 180]")
        if not 0.0 <= self.jitter <= 1.0:
            raise StyleError(f"jitter={self.jitter} outside [0, 1]")

    @property
    def is_identity(self) -> bool:
        return (
            self.gamma == 1.0
            and self.brightness_offset == 0.0
            and self.contrast_scale == 1.0
            and self.noise_sigma == 0.0
            and self.hue_rotation == 0.0
        )

    @property
    def tag(self) -> str:
        if self.name:
            return self.name
        if self.is_identity:
            return "clean"
        parts = [
            f"g{self.gamma:g}",
            f"b{self.brightness_offset:g}",
            f"c{self.contrast_scale:g}",
            f"n{self.noise_sigma:g}",
            f"h{self.hue_rotation:g}",
        ]
        return "-".join(parts) + ("-asym" if self.asymmetric else "")


IDENTITY_STYLE = DomainStyle()


def sample_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    # (seed, index) keyed streams keep serial and parallel generation identical
    return np.random.default_rng([int(seed), int(index), int(stream)])


def _plane(layer_disp, sx, sy, xc, yc, xx, yy):
    return layer_disp + sx * (xx - xc) + sy * (yy - yc)


def _texture(rng: np.random.Generator, height: int, width: int, dot_size: int) -> np.ndarray:
    dot_size = max(int(dot_size), 1)
    h = -(-height // dot_size)
    w = -(-width // dot_size)
    coarse = rng.random((h, w, 3), dtype=np.float32)
    tex = np.repeat(np.repeat(coarse, dot_size, axis=0), dot_size, axis=1)
    return tex[:height, :width]


def _surfaces(spec: SceneSpec, height: int, width: int):
    """Yield (contains(xx, yy), disparity(xx, yy), slope_x, anchor) per surface, background first."""
    bx, by = (width - 1) / 2, (height - 1) / 2
    out = [
        (
            lambda xx, yy: np.ones(np.broadcast(xx, yy).shape, dtype=bool),
            spec.background_disparity,
            spec.background_slope_x,
            spec.background_slope_y,
            bx,
            by,
        )
    ]
    for layer in spec.layers:
        xc, yc = layer.center()
        out.append((layer.contains, layer.disparity, layer.slope_x, layer.slope_y, xc, yc))
    return out


def render_scene(
    spec: SceneSpec,
    height: int,
    width: int,
    max_disp: float,
    rng: np.random.Generator,
    sample_id: str = "",
) -> StereoSample:
    """Render a scene description into a stereo sample with exact ground truth."""
    if height < 16 or width < 16:
        raise SceneError("height and width must be at least 16")
    if not 0 < max_disp < width:
        raise SceneError(f"max_disp={max_disp} must be in (0, width)")
    ext = width + int(np.ceil(max_disp)) + 2
    yy, xx = np.mgrid[0:height, 0:ext].astype(np.float64)
    surfaces = _surfaces(spec, height, width)

    members, disps = [], []
    for contains, d0, sx, sy, xc, yc in surfaces:
        if not -0.5 <= sx <= 0.5:
            raise SceneError(f"horizontal slope {sx} outside [-0.5, 0.5]")
        m = contains(xx, yy)
        d = _plane(d0, sx, sy, xc, yc, xx, yy)
        if m.any():
            lo, hi = d[m].min(), d[m].max()
            if lo < 0 or hi >= max_disp:
                raise SceneError(
                    f"surface disparity range [{lo:.3f}, {hi:.3f}] outside [0, {max_disp})"
                )
        members.append(m)
        disps.append(d)
    n_surf = len(surfaces)
    textures = [_texture(rng, height, ext, spec.dot_size) for _ in range(n_surf)]

    # left view: z-buffer on disparity, later layers win ties
    zl = np.where(np.stack(members)[:, :, :width], np.stack(disps)[:, :, :width], -np.inf)
    order = np.arange(n_surf)[::-1]
    layer_left = order[np.argmax(zl[::-1], axis=0)]
    disp_left = np.take_along_axis(zl, layer_left[None], axis=0)[0]

    # right view: invert x - d(x, y) = x_r for every plane
    xr = np.arange(width, dtype=np.float64)[None, :]
    yr = np.arange(height, dtype=np.float64)[:, None]
    zr = np.full((n_surf, height, width), -np.inf)
    src_idx = np.zeros((n_surf, height, width), dtype=np.int64)
    for k, (contains, d0, sx, sy, xc, yc) in enumerate(surfaces):
        a = d0 - sx * xc + sy * (yr - yc)
        xs = (xr + a) / (1.0 - sx)
        idx = round_half_up(xs)
        inside = (idx >= 0) & (idx < ext)
        idx = np.clip(idx, 0, ext - 1)
        hit = inside & np.take_along_axis(members[k], idx, axis=1)
        zr[k] = np.where(hit, a + sx * xs, -np.inf)
        src_idx[k] = idx
    layer_right = order[np.argmax(zr[::-1], axis=0)]
    disp_right = np.take_along_axis(zr, layer_right[None], axis=0)[0]
    src_right = np.take_along_axis(src_idx, layer_right[None], axis=0)[0]

    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    tex = np.stack(textures)
    left = tex[layer_left, rows, cols]
    right = tex[layer_right, rows, src_right]

    xr_of_left = cols - round_half_up(disp_left)
    in_bounds = xr_of_left >= 0
    xq = np.clip(xr_of_left, 0, width - 1)
    visible = (
        in_bounds
        & (layer_right[rows, xq] == layer_left)
        & (src_right[rows, xq] == cols)
    )
    return StereoSample(
        left_image=np.ascontiguousarray(left, dtype=np.float32),
        right_image=np.ascontiguousarray(right, dtype=np.float32),
        disparity_left=disp_left.astype(np.float32),
        disparity_right=disp_right.astype(np.float32),
        occlusion_left=visible,
        sample_id=sample_id,
        style_tag="clean",
    )


def random_scene(
    rng: np.random.Generator,
    height: int,
    width: int,
    max_disp: float,
    max_layers: int = 3,
    background_range: float = 0.25,
    max_slope_y: float = 0.05,
    min_separation: float = 4.0,
    dot_size: int = 1,
    integer: bool = False,
) -> SceneSpec:
    """Draw a layered scene whose disparities stay below ``max_disp``.

    Foreground layers are fronto-parallel, sorted front-to-back by disparity and
    separated by at least ``min_separation`` pixels so occlusion boundaries are
    always visible to a left-right check at the default threshold. ``integer``
    rounds every disparity and drops the background slope.
    """
    span_y = (height - 1) / 2
    bg_top = background_range * max_disp
    bg = float(rng.uniform(0.0, bg_top))
    slope = float(rng.uniform(-max_slope_y, max_slope_y))
    # shrink the clip slightly so rounding in the plane evaluation cannot dip below 0
    limit = min(bg, max_disp - 1 - bg) / span_y * (1 - 1e-9)
    slope = float(np.clip(slope, -limit, limit))
    if integer:
        bg, slope = float(np.floor(bg)), 0.0
    bg_max = bg + abs(slope) * span_y
    n_layers = int(rng.integers(0, max_layers + 1))
    layers = []
    current = bg_max
    for _ in range(n_layers):
        lo = current + min_separation
        hi = min(lo + 0.35 * max_disp, max_disp - 1.0)
        if lo >= hi:
            break
        d = float(rng.uniform(lo, hi))
        if integer:
            d = float(np.floor(d))
        w = float(rng.uniform(width / 6, width / 2))
        h = float(rng.uniform(height / 6, height / 2))
        x0 = float(rng.uniform(0, width - w))
        y0 = float(rng.uniform(0, height - h))
        shape = "rect" if rng.random() < 0.5 else "disc"
        layers.append(Layer(round(x0), round(y0), round(x0 + w), round(y0 + h), d, shape))
        current = d
    return SceneSpec(
        background_disparity=bg,
        background_slope_y=slope,
        layers=tuple(layers),
        dot_size=dot_size,
    )


def generate_rds(
    seed: int,
    height: int = 64,
    width: int = 64,
    max_disp: float = 48,
    scene_spec: SceneSpec | None = None,
    index: int = 0,
    **scene_kwargs,
) -> StereoSample:
    """Random-dot stereogram for sample ``index`` of the stream ``seed``.

    Without ``scene_spec`` a layered scene is drawn with :func:`random_scene`.
    The result is a pure function of ``(seed, index, scene_spec)``.
    """
    if height < 16 or width < 16:
        raise SceneError("height and width must be at least 16")
    if not 0 < max_disp < width:
        raise SceneError(f"max_disp={max_disp} must be in (0, width)")
    rng = sample_rng(seed, index)
    if scene_spec is None:
        scene_spec = random_scene(rng, height, width, max_disp, **scene_kwargs)
    return render_scene(scene_spec, height, width, max_disp, rng, sample_id=f"rds-{seed}-{index:05d}")


def generate_corpus(seed: int, count: int, start: int = 0, **kwargs) -> list[StereoSample]:
    return [generate_rds(seed, index=i, **kwargs) for i in range(start, start + count)]


def _hue_matrix(degrees: float) -> np.ndarray:
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    k = np.full((3, 3), 1.0 / 3.0)
    cross = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]]) / np.sqrt(3.0)
    return c * np.eye(3) + (1 - c) * k + s * cross


def _photometric(img, gamma, brightness, contrast, hue, noise, rng) -> np.ndarray:
    out = img
    if hue != 0.0:
        out = np.clip(out @ _hue_matrix(hue).T.astype(np.float32), 0.0, 1.0)
    if contrast != 1.0 or brightness != 0.0:
        out = np.clip((out - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0)
    if gamma != 1.0:
        out = np.power(out, gamma)
    if noise > 0.0:
        out = np.clip(out + rng.normal(0.0, noise, size=out.shape), 0.0, 1.0)
    return np.asarray(out, dtype=img.dtype) if out is not img else img.copy()


def _draw(style: DomainStyle, rng: np.random.Generator) -> tuple[float, float, float, float]:
    if not style.asymmetric or style.jitter == 0.0:
        return style.gamma, style.brightness_offset, style.contrast_scale, style.hue_rotation
    z = rng.standard_normal(4)
    j = style.jitter
    gamma = float(np.clip(style.gamma * np.exp(j * z[0]), 0.25, 4.0))
    brightness = float(np.clip(style.brightness_offset + 0.5 * j * z[1], -1.0, 1.0))
    contrast = float(np.clip(style.contrast_scale * np.exp(j * z[2]), 1e-3, 4.0))
    hue = float(np.clip(style.hue_rotation + 30.0 * j * z[3], -180.0, 180.0))
    return gamma, brightness, contrast, hue


def apply_style(sample: StereoSample, style: DomainStyle, seed: int = 0) -> StereoSample:
    """Photometric shift of both views; geometry fields are passed through untouched."""
    style.validate()
    rng_l = np.random.default_rng([int(seed), 0])
    rng_r = np.random.default_rng([int(seed), 1])
    left = _photometric(sample.left_image, *_draw(style, rng_l), style.noise_sigma, rng_l)
    right = _photometric(sample.right_image, *_draw(style, rng_r), style.noise_sigma, rng_r)
    return sample.replace(left_image=left, right_image=right, style_tag=style.tag)


def stack_samples(samples: Sequence[StereoSample]):
    """Batch arrays (B, H, W, 3) / (B, H, W) for a list of equally sized samples."""
    left = np.stack([s.left_image for s in samples])
    right = np.stack([s.right_image for s in samples])
    disp = np.stack([s.disparity_left for s in samples])
    occ = np.stack(
        [s.occlusion_left if s.occlusion_left is not None else np.isfinite(s.disparity_left) for s in samples]
    )
    return left, right, disp, occ

