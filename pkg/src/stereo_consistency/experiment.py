"""Experiment configuration, the training loop, evaluation, diagnosis and plot tables.

Everything here is a deterministic function of an :class:`ExperimentConfig`;
its hash is stamped into every artifact so reruns can be checked byte-for-byte.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
import yaml

from . import __version__
from .data import DomainStyle, StereoSample, apply_style, generate_corpus, stack_samples
from .geometry import PositivePairSet, collect_positive_pairs, pairs_for_sample
from .io import load_archive, save_archive
from .metrics import (
    D1_HEADER,
    MetricError,
    MetricsReport,
    aggregate_reports,
    append_jsonl,
    cosine_consistency,
    disparity_report,
    per_channel_inconsistency,
    threshold_error_rate,
)
from .net import (
    Encoder,
    NetworkConfig,
    StereoNet,
    TotalLossConfig,
    infer_batch,
    smooth_l1_disparity_loss,
    to_tensor_images,
    total_loss,
)
from .scf import (
    FeatureMap,
    MomentumEncoderPair,
    NegativeQueue,
    ScfConfig,
    momentum_update,
    queue_push,
    sample_keys_for_queue,
    scf_loss_batch,
)
from .ssw import CovarianceStats, covariance, flatten_spatial, instance_normalize, select_mask, ssw_loss, variance_matrix


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(RuntimeError):
    """Missing or malformed corpus."""


class HashMismatchError(RuntimeError):
    """A checkpoint was produced by a different configuration."""


TRAIN_STYLE = dict(noise_sigma=0.01, asymmetric=True, jitter=0.15, name="train")
SHIFT_STYLE = dict(gamma=1.6, contrast_scale=0.7, hue_rotation=45.0, noise_sigma=0.03, asymmetric=True, jitter=0.4, name="shift")


@dataclass
class DataConfig:
    height: int = 64
    width: int = 64
    train_count: int = 200
    test_count: int = 50
    max_layers: int = 3
    dot_size: int = 4
    delta: float = 3.0
    pair_rule: str = "center"
    train_style: dict = field(default_factory=lambda: dict(TRAIN_STYLE))


@dataclass
class ScfSection:
    enabled: bool = True
    momentum: bool = True
    m: float = 0.999
    n_negatives: int = 60
    window: int = 50
    queue_size: int = 6000
    tau: float = 0.07
    normalize: bool = True
    queue_push_per_step: int = 256
    denominator: str = "standard"
    window_center: str = "match"
    exclude_neighbors: int = 1

    def loss_config(self) -> ScfConfig:
        names = {f.name for f in fields(ScfConfig)}
        return ScfConfig(**{k: v for k, v in asdict(self).items() if k in names})


@dataclass
class SswSection:
    enabled: bool = True
    epsilon: float = 1e-5
    layers: tuple[int, ...] = (0, 1)
    clusters: int = 3
    warmup_steps: int = 50
    mask_refresh: int = 50


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    lr_late: float = 1e-4
    lr_drop: float = 0.8
    probe_size: int = 4
    log_every: int = 25
    augment: bool = True


@dataclass
class EvalConfig:
    styles: dict = field(default_factory=lambda: {"clean": {}, "train": dict(TRAIN_STYLE), "shift": dict(SHIFT_STYLE)})
    metrics: tuple[str, ...] = ("mean_cosine", "per_channel_abs_diff", "err_gt_1px", "err_gt_2px", "err_gt_3px", "d1_all")


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    net: NetworkConfig = field(default_factory=NetworkConfig)
    scf: ScfSection = field(default_factory=ScfSection)
    ssw: SswSection = field(default_factory=SswSection)
    loss: TotalLossConfig = field(default_factory=TotalLossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs"

    def validate(self) -> "ExperimentConfig":
        try:
            if self.net.max_disp >= self.data.width:
                raise ConfigError("net.max_disp must be smaller than data.width")
            if self.data.height % self.net.stride or self.data.width % self.net.stride:
                raise ConfigError("image size must be divisible by net.stride")
            if self.ssw.enabled:
                if self.net.volume_kind == "rgb":
                    raise ConfigError("whitening needs a feature encoder (volume_kind != rgb)")
                missing = set(self.ssw.layers) - set(self.net.in_layers)
                if missing:
                    raise ConfigError(f"ssw.layers {sorted(missing)} are not instance-normalized (net.in_layers)")
            if self.scf.enabled:
                if self.net.volume_kind == "rgb":
                    raise ConfigError("the contrastive loss needs a feature encoder (volume_kind != rgb)")
                self.scf.loss_config()
                if not 0.0 <= self.scf.m <= 1.0:
                    raise ConfigError("scf.m must lie in [0, 1]")
            if self.train.steps < 1 or self.train.batch_size < 1:
                raise ConfigError("train.steps and train.batch_size must be positive")
            if self.data.train_count < 1 or self.data.test_count < 1:
                raise ConfigError("corpus sizes must be positive")
            for name, st in self.eval.styles.items():
                make_style(st, name).validate()
            make_style(self.data.train_style).validate()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        return self


_SECTIONS = {
    "data": DataConfig,
    "net": NetworkConfig,
    "scf": ScfSection,
    "ssw": SswSection,
    "loss": TotalLossConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _plain(obj):
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _plain(cfg)


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d or {})
    unknown = set(d) - {f.name for f in fields(ExperimentConfig)}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    try:
        for name, cls in _SECTIONS.items():
            sec = d.pop(name, None) or {}
            if not isinstance(sec, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            known = {f.name for f in fields(cls)}
            bad = set(sec) - known
            if bad:
                raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
            sec = {k: tuple(v) if isinstance(v, list) and k in ("in_layers", "layers", "metrics") else v for k, v in sec.items()}
            kwargs[name] = cls(**sec)
        cfg = ExperimentConfig(**kwargs, **d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable digest of everything that affects results (the output location is excluded)."""
    d = config_to_dict(cfg)
    d.pop("output_dir", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def data_hash(cfg: ExperimentConfig) -> str:
    d = {"seed": cfg.seed, "max_disp": cfg.net.max_disp, **config_to_dict(cfg)["data"]}
    for k in ("train_style", "delta", "pair_rule"):
        d.pop(k)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        if not isinstance(cur.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        cur = cur[p]
    # style mappings accept arbitrary new entries
    free = len(parts) > 2 and parts[:2] in (["eval", "styles"], ["data", "train_style"])
    if parts[-1] not in cur and not free:
        raise ConfigError(f"unknown config key {key!r}")
    cur[parts[-1]] = value


def with_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    d = config_to_dict(cfg)
    for k, v in overrides.items():
        _set_dotted(d, k, v)
    return config_from_dict(d)


ABLATIONS = {
    # name: (contrastive, momentum encoder + queue, whitening)
    "baseline": (False, False, False),
    "C": (True, False, False),
    "C+M": (True, True, False),
    "W": (False, False, True),
    "C+W": (True, False, True),
    "C+M+W": (True, True, True),
}


def ablation_overrides(name: str, cfg: ExperimentConfig | None = None) -> dict:
    """Flag settings for one ablation cell. Whitening cells instance-normalize the whitened stages."""
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    c, m, w = ABLATIONS[name]
    layers = list((cfg or ExperimentConfig()).ssw.layers)
    return {"scf.enabled": c, "scf.momentum": m, "ssw.enabled": w, "net.in_layers": layers if w else []}


def load_config(path=None, overrides: Sequence[str] = (), provenance: list | None = None) -> ExperimentConfig:
    """Read a YAML config and apply ``key=value`` overrides (values parsed as YAML)."""
    d = config_to_dict(ExperimentConfig())
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            loaded = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(d, loaded, "", provenance, f"file:{path}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        _set_dotted(d, key.strip(), value)
        if provenance is not None:
            provenance.append({"key": key.strip(), "value": value, "source": "--set"})
    return config_from_dict(d)


def _merge(base: dict, new: dict, prefix: str, provenance, source) -> None:
    for k, v in new.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and isinstance(base.get(k), dict) and k not in ("styles", "train_style"):
            _merge(base[k], v, key + ".", provenance, source)
        else:
            if k not in base:
                raise ConfigError(f"unknown config key {key!r}")
            base[k] = v
            if provenance is not None:
                provenance.append({"key": key, "value": v, "source": source})


DEFAULT_CONFIG_YAML = """\
# Experiment configuration. Every key is optional; shown values are the defaults.
seed: 0                    # drives data, initialization, batching and negative sampling
output_dir: runs           # overridden by $STEREO_CONSISTENCY_OUTPUT when set
data:
  height: 64
  width: 64
  train_count: 200         # training scenes
  test_count: 50           # held-out scenes (indices after the training ones)
  max_layers: 3            # foreground layers per scene
  dot_size: 4              # texture dot size in pixels
  delta: 3.0               # left-right check threshold (px) for positive pairs
  pair_rule: center        # feature cell kept if its center pixel passes (or: all)
  train_style:             # photometric augmentation applied while training
    noise_sigma: 0.01
    asymmetric: true       # independent draws per view
    jitter: 0.15
    name: train
net:
  channels: 16
  stride: 4
  max_disp: 48
  volume_kind: correlation # correlation | concat | rgb
  aggregation_depth: 2
  aggregation_width: 8
  in_layers: [0, 1]        # encoder stages with instance normalization
  epsilon: 1.0e-05
  residual: true           # correlation volumes feed their negation into the costs
scf:
  enabled: true            # contrastive feature-consistency loss
  momentum: true           # momentum key encoder plus negative queue
  m: 0.999
  n_negatives: 60          # window negatives per positive
  window: 50               # negative window side in pixels
  queue_size: 6000
  tau: 0.07
  normalize: true
  queue_push_per_step: 256
  denominator: standard    # standard (positive in denominator) | negatives-only
  window_center: match     # match | query
  exclude_neighbors: 1
ssw:
  enabled: true            # selective whitening of view-sensitive covariances
  epsilon: 1.0e-05
  layers: [0, 1]
  clusters: 3
  warmup_steps: 50         # steps of covariance statistics before the first mask
  mask_refresh: 50
loss:
  lambda_scf: 1.0
  lambda_ssw: 0.1
  smooth_l1_beta: 1.0
train:
  steps: 300
  batch_size: 8
  lr: 0.001
  lr_late: 0.0001
  lr_drop: 0.8             # fraction of steps after which lr_late applies
  probe_size: 4            # training scenes used for the logged cosine probe
  log_every: 25
  augment: true
eval:
  styles:
    clean: {}
    train: {noise_sigma: 0.01, asymmetric: true, jitter: 0.15, name: train}
    shift: {gamma: 1.6, contrast_scale: 0.7, hue_rotation: 45.0, noise_sigma: 0.03, asymmetric: true, jitter: 0.4, name: shift}
  metrics: [mean_cosine, per_channel_abs_diff, err_gt_1px, err_gt_2px, err_gt_3px, d1_all]
"""


def make_style(d: dict | DomainStyle, name: str = "") -> DomainStyle:
    if isinstance(d, DomainStyle):
        return d
    d = dict(d or {})
    if name and not d.get("name"):
        d["name"] = name
    try:
        return DomainStyle(**d)
    except TypeError as exc:
        raise ConfigError(f"bad style {name or d}: {exc}") from exc


def style_to_dict(style: DomainStyle) -> dict:
    return asdict(style)


def _style_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def styled_samples(samples: Sequence[StereoSample], style: DomainStyle, seed: int, salt: int = 1) -> list[StereoSample]:
    """Apply ``style`` with an independent draw per sample."""
    return [apply_style(s, style, _style_seed(seed, salt, i)) for i, s in enumerate(samples)]


def build_corpora(cfg: ExperimentConfig) -> tuple[list[StereoSample], list[StereoSample]]:
    kw = dict(height=cfg.data.height, width=cfg.data.width, max_disp=cfg.net.max_disp,
              max_layers=cfg.data.max_layers, dot_size=cfg.data.dot_size)
    train = generate_corpus(cfg.seed, cfg.data.train_count, **kw)
    test = generate_corpus(cfg.seed, cfg.data.test_count, start=cfg.data.train_count, **kw)
    return train, test


def sample_pairs(samples: Sequence[StereoSample], cfg: ExperimentConfig) -> list[PositivePairSet]:
    return [
        pairs_for_sample(s.disparity_left, s.disparity_right, cfg.net.stride, cfg.data.delta, cfg.data.pair_rule)
        for s in samples
    ]


def unmasked_pairs(samples: Sequence[StereoSample], cfg: ExperimentConfig) -> list[PositivePairSet]:
    return [
        collect_positive_pairs(s.disparity_left, np.ones(s.shape, dtype=bool), cfg.net.stride, cfg.data.pair_rule)
        for s in samples
    ]


@dataclass
class TrainRun:
    cfg: ExperimentConfig
    net: StereoNet
    key_pair: MomentumEncoderPair | None
    queue: NegativeQueue | None
    stats: CovarianceStats | None
    log: list[dict]


def _lr_at(cfg: TrainConfig, step: int) -> float:
    return cfg.lr if step < math.floor(cfg.lr_drop * cfg.steps) else cfg.lr_late


def _batch_tensors(samples: Sequence[StereoSample]):
    left, right, disp, _ = stack_samples(samples)
    return to_tensor_images(left), to_tensor_images(right), torch.from_numpy(np.ascontiguousarray(disp, dtype=np.float32))


@torch.no_grad()
def probe_cosine(encoder: Encoder, samples, pairs, stride: int) -> float:
    l, r, _ = _batch_tensors(samples)
    fl, _ = encoder(l)
    fr, _ = encoder(r)
    vals = []
    for b, p in enumerate(pairs):
        if len(p):
            vals.append(cosine_consistency(FeatureMap(fl[b], stride), FeatureMap(fr[b], stride, "right"), p))
    return float(np.mean(vals)) if vals else float("nan")


def train(
    cfg: ExperimentConfig,
    corpus: Sequence[StereoSample] | None = None,
    log_path=None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainRun:
    """Train one configuration from scratch.

    Each iteration runs forward, losses, the parameter step, the momentum
    update and finally the queue push, in that order.
    """
    cfg.validate()
    if corpus is None:
        corpus, _ = build_corpora(cfg)
    corpus = list(corpus)
    if not corpus:
        raise DataError("empty training corpus")
    torch.manual_seed(cfg.seed)
    net = StereoNet(cfg.net)
    stride = cfg.net.stride
    use_scf = cfg.scf.enabled and cfg.loss.lambda_scf > 0
    use_ssw = cfg.ssw.enabled and cfg.loss.lambda_ssw > 0
    scf_cfg = cfg.scf.loss_config()
    pair = queue = stats = None
    if use_scf and cfg.scf.momentum:
        pair = MomentumEncoderPair.from_query(net.encoder, cfg.scf.m)
        queue = NegativeQueue(scf_cfg.queue_size)
    ssw_pos = [cfg.net.in_layers.index(l) for l in cfg.ssw.layers] if use_ssw else []
    if use_ssw:
        stats = CovarianceStats(len(ssw_pos), cfg.ssw.clusters, cfg.ssw.warmup_steps, cfg.ssw.mask_refresh)
    pairs = sample_pairs(corpus, cfg)
    probe_idx = list(range(min(cfg.train.probe_size, len(corpus)))) if cfg.net.volume_kind != "rgb" else []
    train_style = make_style(cfg.data.train_style)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.train.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    order = np.zeros(0, dtype=np.int64)
    log = []
    if log_path is not None:
        Path(log_path).write_text("", encoding="utf-8")
    for step in range(cfg.train.steps):
        if len(order) < cfg.train.batch_size:
            order = np.concatenate([order, rng.permutation(len(corpus))])
        idx, order = order[: cfg.train.batch_size], order[cfg.train.batch_size :]
        batch = [corpus[i] for i in idx]
        if cfg.train.augment:
            batch = [apply_style(s, train_style, _style_seed(cfg.seed, 2, step, j)) for j, s in enumerate(batch)]
        left, right, gt = _batch_tensors(batch)
        lr = _lr_at(cfg.train, step)
        for g in opt.param_groups:
            g["lr"] = lr

        out = net(left, right, key_encoder=pair.key if pair is not None else None)
        rec = {"step": step, "lr": lr}
        l_disp = smooth_l1_disparity_loss(out["disparity"], gt, beta=cfg.loss.smooth_l1_beta, max_disp=cfg.net.max_disp)
        rec["l_disp"] = float(l_disp.value.detach())
        l_scf = l_ssw = None
        if use_scf:
            lefts = [FeatureMap(f, stride, "left") for f in out["left_features"]]
            rights = [FeatureMap(f, stride, "right") for f in out["right_features"]]
            res = scf_loss_batch(
                lefts, rights, [pairs[i] for i in idx], queue, scf_cfg, rng, detach_keys=pair is not None
            )
            l_scf = res.loss
            rec.update(l_scf=float(res.loss.detach()), scf_pairs=res.n_pairs, scf_short_windows=res.short_windows)
        if use_ssw:
            xl = [flatten_spatial(out["left_normalized"][p]) for p in ssw_pos]
            term = ssw_loss(xl, stats)
            l_ssw = term
            rec.update(l_ssw=abs(float(term.value.detach())), ssw_skipped=term.skipped)
            with torch.no_grad():
                if pair is not None:
                    _, rn = net.encoder(right)
                else:
                    rn = out["right_normalized"]
                xr = [flatten_spatial(rn[p]) for p in ssw_pos]
                stats.accumulate([covariance(x.detach()) for x in xl], [covariance(x.detach()) for x in xr])
        loss = total_loss(l_disp, l_scf if l_scf is not None else 0.0, l_ssw if l_ssw is not None else 0.0, cfg.loss)
        rec["l_total"] = float(loss.detach())

        opt.zero_grad()
        loss.backward()
        opt.step()
        if pair is not None:
            momentum_update(pair)
            keys = sample_keys_for_queue(out["right_features"], scf_cfg.queue_push_per_step, rng, scf_cfg.normalize)
            queue_push(queue, keys)

        if probe_idx and (step % cfg.train.log_every == 0 or step == cfg.train.steps - 1):
            rec["probe_cosine"] = probe_cosine(net.encoder, [corpus[i] for i in probe_idx], [pairs[i] for i in probe_idx], stride)
        log.append(rec)
        if log_path is not None:
            append_jsonl([rec], log_path)
        if on_step is not None:
            on_step(rec)
    return TrainRun(cfg, net, pair, queue, stats, log)


def predict(net: StereoNet, samples: Sequence[StereoSample]) -> list[np.ndarray]:
    net.eval()
    left, right, _, _ = stack_samples(samples)
    return list(infer_batch(left, right, net))


def eval_mask(sample: StereoSample, max_disp: float) -> np.ndarray:
    gt = np.asarray(sample.disparity_left, dtype=np.float64)
    return np.isfinite(gt) & (np.nan_to_num(gt, nan=max_disp) < max_disp)


def corpus_error(preds, samples, max_disp: float, t: float = 3.0) -> float:
    """Pixel-weighted >t px error over a corpus."""
    bad = total = 0
    for p, s in zip(preds, samples):
        m = eval_mask(s, max_disp)
        n = int(m.sum())
        if n:
            bad += threshold_error_rate(p, s.disparity_left, m, t) * n / 100.0
            total += n
    if total == 0:
        raise MetricError("no valid pixels in corpus")
    return 100.0 * bad / total


@torch.no_grad()
def _features(net: StereoNet, samples: Sequence[StereoSample], batch_size: int = 16):
    feats_l, feats_r = [], []
    for i in range(0, len(samples), batch_size):
        l, r, _ = _batch_tensors(samples[i : i + batch_size])
        feats_l.append(net.encoder(l)[0])
        feats_r.append(net.encoder(r)[0])
    return torch.cat(feats_l), torch.cat(feats_r)


def _safe(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except MetricError:
        return float("nan")


def evaluate(
    net: StereoNet, test_corpus: Sequence[StereoSample], cfg: ExperimentConfig, styles: dict | None = None, extra: dict | None = None
) -> tuple[list[MetricsReport], list[MetricsReport]]:
    """Per-sample and per-style aggregate reports on the held-out corpus.

    Cosine metrics use the query encoder for both views over masked pairs;
    the unmasked variant pairs every cell whose match stays in the image.
    """
    styles = cfg.eval.styles if styles is None else styles
    stride = cfg.net.stride
    pairs = sample_pairs(test_corpus, cfg)
    pairs_all = unmasked_pairs(test_corpus, cfg)
    has_features = cfg.net.volume_kind != "rgb"
    per_sample, summary = [], []
    for name, st in styles.items():
        style = make_style(st, name)
        samples = styled_samples(test_corpus, style, cfg.seed)
        preds = predict(net, samples)
        if has_features:
            fl, fr = _features(net, samples)
        reports = []
        for b, (s, p) in enumerate(zip(samples, preds)):
            cos = cos_all = float("nan")
            chan = [float("nan")] * cfg.net.channels
            if has_features:
                L, R = FeatureMap(fl[b], stride), FeatureMap(fr[b], stride, "right")
                cos = _safe(cosine_consistency, L, R, pairs[b])
                cos_all = _safe(cosine_consistency, L, R, pairs_all[b])
                if len(pairs[b]):
                    chan = [float(v) for v in per_channel_inconsistency(L, R, pairs[b], cfg.scf.normalize)]
            rep = MetricsReport(
                mean_cosine=cos,
                per_channel_abs_diff=chan,
                style_tag=name,
                sample_id=s.sample_id,
                mean_cosine_unmasked=cos_all,
                extra=dict(extra or {}),
                **disparity_report(p, s.disparity_left, eval_mask(s, cfg.net.max_disp)),
            )
            reports.append(rep)
        agg = aggregate_reports(reports, name)
        agg.mean_cosine = float(np.nanmean([r.mean_cosine for r in reports])) if has_features else float("nan")
        agg.mean_cosine_unmasked = float(np.nanmean([r.mean_cosine_unmasked for r in reports])) if has_features else float("nan")
        agg.per_channel_abs_diff = [float(v) for v in np.nanmean([r.per_channel_abs_diff for r in reports], axis=0)] if has_features else agg.per_channel_abs_diff
        agg.extra = dict(extra or {})
        per_sample.extend(reports)
        summary.append(agg)
    return per_sample, summary


def run_label(cfg: ExperimentConfig) -> dict:
    """Columns identifying a run in report tables."""
    c = cfg.scf.enabled and cfg.loss.lambda_scf > 0
    m = c and cfg.scf.momentum
    w = cfg.ssw.enabled and cfg.loss.lambda_ssw > 0
    name = "+".join(x for x, on in (("C", c), ("M", m), ("W", w)) if on) or "baseline"
    if cfg.net.volume_kind == "rgb":
        name = "rgb-volume"
    return {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "variant": name,
        "momentum": cfg.scf.m if m else 0.0,
    }


# checkpoints


def versions() -> dict:
    return {"stereo_consistency": __version__, "numpy": np.__version__, "torch": torch.__version__.split("+")[0]}


def save_checkpoint(run: TrainRun, path) -> None:
    arrays = {f"query.{k}": v.detach().cpu().numpy() for k, v in run.net.state_dict().items()}
    if run.key_pair is not None:
        arrays.update({f"key.{k}": v.detach().cpu().numpy() for k, v in run.key_pair.key.state_dict().items()})
    if run.stats is not None and run.stats.sample_count:
        for i, (v, m) in enumerate(zip(run.stats.V, run.stats.masks or [None] * len(run.stats.V))):
            arrays[f"ssw.V{i}"] = v
            if m is not None:
                arrays[f"ssw.mask{i}"] = m
    manifest = {
        "config_hash": config_hash(run.cfg),
        "seed": run.cfg.seed,
        "versions": versions(),
        "arrays": {k: list(np.shape(v)) for k, v in sorted(arrays.items())},
        "config": config_to_dict(run.cfg),
    }
    save_archive(path, arrays, manifest)


def load_checkpoint(path, cfg: ExperimentConfig | None = None) -> tuple[StereoNet, dict, dict]:
    """Rebuild the query network; refuses a checkpoint whose hash differs from ``cfg``."""
    try:
        arrays, manifest = load_archive(path)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if cfg is not None and manifest.get("config_hash") != config_hash(cfg):
        raise HashMismatchError(
            f"checkpoint {path} was trained with config {manifest.get('config_hash')}, "
            f"but the current config hashes to {config_hash(cfg)}; retrain or pass the matching config"
        )
    ckpt_cfg = config_from_dict(manifest["config"])
    net = StereoNet(ckpt_cfg.net)
    state = {k[len("query.") :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("query.")}
    net.load_state_dict(state)
    net.eval()
    return net, arrays, manifest


# diagnosis and plot tables


@torch.no_grad()
def covariance_variance(net: StereoNet, samples: Sequence[StereoSample], layers: Sequence[int], epsilon: float):
    """Left/right covariance variance per encoder stage over a corpus (query encoder, both views)."""
    l, r, _ = _batch_tensors(samples)
    sl, sr = net.encoder.stages(l), net.encoder.stages(r)
    out = []
    for i in layers:
        cl = covariance(instance_normalize(flatten_spatial(sl[i]).double(), epsilon))
        cr = covariance(instance_normalize(flatten_spatial(sr[i]).double(), epsilon))
        out.append(variance_matrix(cl, cr).numpy())
    return out


def diagnose(net: StereoNet, test_corpus: Sequence[StereoSample], cfg: ExperimentConfig) -> tuple[dict, dict]:
    """Consistency by style, per-channel inconsistency vectors, V matrices and selective masks."""
    _, summary = evaluate(net, test_corpus, cfg)
    report = {
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "versions": versions(),
        "styles": {
            r.style_tag: {
                "mean_cosine": r.mean_cosine,
                "mean_cosine_unmasked": r.mean_cosine_unmasked,
                "per_channel_abs_diff": r.per_channel_abs_diff,
                "err_gt_3px": r.err_gt_3px,
            }
            for r in summary
        },
    }
    arrays = {}
    if cfg.net.volume_kind != "rgb":
        for name, st in cfg.eval.styles.items():
            samples = styled_samples(test_corpus, make_style(st, name), cfg.seed)
            for layer, V in zip(cfg.ssw.layers, covariance_variance(net, samples, cfg.ssw.layers, cfg.ssw.epsilon)):
                arrays[f"{name}.V{layer}"] = V
                arrays[f"{name}.mask{layer}"] = select_mask(V, cfg.ssw.clusters)
    return report, arrays


def plot_tables(rows: Sequence[dict]) -> dict[str, list[dict]]:
    """Plot-ready tables from aggregate report rows.

    ``momentum``: one row per momentum value with the mean cosine per style
    (mean over seeds), from contrastive runs without whitening. ``style_error``: >3px error per variant and style.
    ``per_channel``: per-channel inconsistency per variant and style.
    """
    rows = [r for r in rows if r.get("sample_id", "ALL") == "ALL"]

    def num(x):
        try:
            return float(x)
        except (TypeError, ValueError):
            return float("nan")

    styles = sorted({r["style_tag"] for r in rows})
    momentum = []
    feature_rows = [r for r in rows if r.get("variant") != "rgb-volume" and "momentum" in r]
    for m in sorted({num(r["momentum"]) for r in feature_rows if r.get("variant") in ("C", "C+M")}):
        row = {"momentum": m}
        for st in styles:
            vals = [num(r["mean_cosine"]) for r in feature_rows if num(r["momentum"]) == m and r["style_tag"] == st and r.get("variant") in ("C", "C+M")]
            row[st] = float(np.nanmean(vals)) if vals else float("nan")
        momentum.append(row)
    style_error, per_channel = [], []
    for v in sorted({r.get("variant", "") for r in rows}):
        row = {"variant": v}
        for st in styles:
            vals = [num(r["err_gt_3px"]) for r in rows if r.get("variant", "") == v and r["style_tag"] == st]
            row[st] = float(np.mean(vals)) if vals else float("nan")
            chans = [
                [num(x) for x in str(r["per_channel_abs_diff"]).split()]
                for r in rows
                if r.get("variant", "") == v and r["style_tag"] == st
            ]
            if chans and all(len(c) == len(chans[0]) for c in chans):
                mean = np.nanmean(np.array(chans), axis=0) if not np.all(np.isnan(chans)) else np.full(len(chans[0]), np.nan)
                for c, val in enumerate(mean):
                    per_channel.append({"variant": v, "style_tag": st, "channel": c, "abs_diff": float(val)})
        style_error.append(row)
    return {"momentum": momentum, "style_error": style_error, "per_channel": per_channel}
