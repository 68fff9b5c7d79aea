"""Temporal region classifier.

A window of W frames centred on a keyframe is described by fixed per-frame
descriptors (by default a joint colour histogram of the frame). A small
shared encoder maps each descriptor to d_t, temporal self-attention mixes
the window, and the rows are pooled through time. The pooled vector goes
through the Time MLP, is concatenated with a linear projection of each
region's segment embedding and classified over C + 1 classes. A separate
MLP on the pooled vector predicts which classes are present in the
keyframe and adds a BCE term to the loss.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigInvalid, NonFiniteInput, NonFiniteLoss, ShapeMismatch, VersionMismatch
from .model import PixelLayer

log = logging.getLogger(__name__)


@dataclass
class TemporalConfig:
    window: int = 8
    stride: int = 1
    descriptor: str = "hist"  # "hist": joint RGB histogram; "grid": frame pooled to grid x grid x 3
    bins: int = 4  # histogram levels per channel
    grid: int = 8
    d_t: int = 32
    d_s: int = 32
    d_h: Optional[int] = None  # defaults to max(d_t, d_s)
    num_classes: int = 7
    temporal_layers: int = 2
    time_mlp: bool = True
    presence: bool = True
    lambda_presence: float = 1.0
    pool: str = "mean"
    blend: float = 1.0  # 1 replaces the baseline's class probabilities outright
    seed: int = 0

    def __post_init__(self):
        if self.d_h is None:
            self.d_h = max(self.d_t, self.d_s)
        self.validate()

    def validate(self) -> None:
        if self.window < 1 or self.stride < 1:
            raise ConfigInvalid(f"window and stride must be >= 1, got W={self.window}, s={self.stride}")
        if min(self.grid, self.d_t, self.d_s, self.d_h, self.num_classes) < 1 or self.temporal_layers < 0:
            raise ConfigInvalid("widths and class count must be >= 1")
        if self.lambda_presence < 0:
            raise ConfigInvalid("lambda_presence must be >= 0")
        if self.descriptor not in ("hist", "grid") or self.bins < 1:
            raise ConfigInvalid(f"descriptor must be 'hist' or 'grid' with bins >= 1, got {self.descriptor!r}")
        if self.pool not in ("mean", "max"):
            raise ConfigInvalid(f"pool must be 'mean' or 'max', got {self.pool!r}")
        if not 0.0 <= self.blend <= 1.0:
            raise ConfigInvalid("blend must lie in [0, 1]")

    @property
    def d_f(self) -> int:
        return self.bins**3 if self.descriptor == "hist" else 3 * self.grid * self.grid

    @property
    def effective_lambda(self) -> float:
        return self.lambda_presence if self.presence else 0.0

    def replace(self, **changes) -> "TemporalConfig":
        doc = asdict(self)
        doc.update(changes)
        return TemporalConfig(**doc)

    def to_json(self) -> dict:
        return asdict(self)


def ablation_variant(cfg: TemporalConfig, time_mlp: bool, presence: bool) -> TemporalConfig:
    """One cell of the Time MLP x presence-supervision grid."""
    return cfg.replace(time_mlp=bool(time_mlp), presence=bool(presence))


@dataclass
class TemporalWindow:
    keyframe: str
    features: np.ndarray  # (W, d) per-frame vectors

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 2:
            raise ShapeMismatch(f"window features must be (W, d), got {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise NonFiniteInput(f"window for {self.keyframe} has non-finite features")


def window_indices(t: int, window: int, stride: int, length: int) -> list[int]:
    """``t + s * (i - W // 2)`` for i in 0..W-1, clamped into [0, length - 1]."""
    if not 0 <= t < length:
        raise IndexError(f"keyframe {t} outside video of length {length}")
    half = window // 2
    return [min(max(t + stride * (i - half), 0), length - 1) for i in range(window)]


def pool_time(features, mode: str = "mean"):
    """Pool the window axis (second to last) away.

    Tensors use the differentiable ``mean``/``amax``. Arrays take the
    reference path: column sums through ``math.fsum`` are correctly rounded,
    so the result does not depend on frame order.
    """
    if isinstance(features, torch.Tensor):
        return features.mean(-2) if mode == "mean" else features.amax(-2)
    x = np.asarray(features, dtype=np.float64)
    if mode == "max":
        return x.max(-2)
    w = x.shape[-2]
    cols = np.moveaxis(x, -2, -1).reshape(-1, w)
    return np.array([math.fsum(c) / w for c in cols]).reshape(x.shape[:-2] + x.shape[-1:])


def colour_histogram(image: np.ndarray, bins: int = 4) -> np.ndarray:
    """Fraction of pixels in each of ``bins**3`` joint RGB cells; position-free."""
    q = np.clip((np.asarray(image) * bins).astype(np.int64), 0, bins - 1)
    code = (q[0] * bins + q[1]) * bins + q[2]
    return (np.bincount(code.ravel(), minlength=bins**3) / code.size).astype(np.float32)


def grid_pool(image: np.ndarray, grid: int = 8) -> np.ndarray:
    """(3, H, W) image -> flat (3 * grid * grid,) block averages."""
    c, h, w = image.shape
    if h % grid or w % grid:
        raise ShapeMismatch(f"image {h}x{w} not divisible into a {grid}x{grid} grid")
    x = np.asarray(image, dtype=np.float32).reshape(c, grid, h // grid, grid, w // grid)
    return x.mean(axis=(2, 4)).reshape(-1)


def frame_descriptor(image: np.ndarray, cfg: "TemporalConfig") -> np.ndarray:
    if cfg.descriptor == "hist":
        return colour_histogram(image, cfg.bins)
    return grid_pool(image, cfg.grid)


def video_descriptors(images: np.ndarray, cfg: "TemporalConfig") -> np.ndarray:
    return np.stack([frame_descriptor(im, cfg) for im in images]).astype(np.float32)


def _mlp(d_in: int, d_h: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_h), nn.GELU(), nn.Linear(d_h, d_out))


class TemporalHead(nn.Module):
    def __init__(self, cfg: TemporalConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = _mlp(cfg.d_f, cfg.d_h, cfg.d_t)
        self.time_pos = nn.Parameter(torch.zeros(cfg.window, cfg.d_t))
        self.layers = nn.ModuleList(PixelLayer(cfg.d_t) for _ in range(cfg.temporal_layers))
        self.time_mlp = _mlp(cfg.d_t, cfg.d_h, cfg.d_t) if cfg.time_mlp else nn.Identity()
        self.seg_proj = nn.Linear(cfg.d_s, cfg.d_t)
        self.classifier = nn.Linear(2 * cfg.d_t, cfg.num_classes + 1)
        self.presence_mlp = _mlp(cfg.d_t, cfg.d_h, cfg.num_classes) if cfg.presence else None
        self.reset_parameters(cfg.seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, prm in self.named_parameters():
                if "norm" in name:
                    prm.fill_(1.0 if name.endswith("weight") else 0.0)
                elif name.endswith("bias"):
                    prm.zero_()
                else:
                    fan_in = prm.shape[-1] if prm.ndim > 1 else 1
                    std = 0.02 if name == "time_pos" else 1.0 / math.sqrt(fan_in)
                    prm.copy_(torch.randn(prm.shape, generator=gen, dtype=torch.float64).to(prm.dtype) * std)

    def encode(self, windows: torch.Tensor) -> torch.Tensor:
        """(B, W, d_f) descriptors -> (B, d_t) pooled window features."""
        if windows.shape[-2:] != (self.cfg.window, self.cfg.d_f):
            raise ShapeMismatch(f"windows {tuple(windows.shape)}, expected (B, {self.cfg.window}, {self.cfg.d_f})")
        x = self.encoder(windows)
        for layer in self.layers:
            x = layer(x, self.time_pos)
        return pool_time(x, self.cfg.pool)

    def classify(self, pooled: torch.Tensor, seg: torch.Tensor, window_of: torch.Tensor) -> torch.Tensor:
        """Logits (R, C + 1) for regions ``seg`` (R, d_s) of windows ``window_of`` (R,)."""
        if seg.shape[-1] != self.cfg.d_s:
            raise ShapeMismatch(f"segment embeddings are {seg.shape[-1]} wide, expected {self.cfg.d_s}")
        u = self.time_mlp(pooled)
        return self.classifier(torch.cat([u[window_of], self.seg_proj(seg)], -1))

    def presence_probs(self, pooled: torch.Tensor) -> Optional[torch.Tensor]:
        return None if self.presence_mlp is None else torch.sigmoid(self.presence_mlp(pooled))

    def forward(self, windows, seg, window_of):
        pooled = self.encode(windows)
        return self.classify(pooled, seg, window_of), self.presence_probs(pooled)


def fuse_classify(pooled, seg, head: TemporalHead) -> torch.Tensor:
    """Logits for the N regions of one window: ``classifier([time_mlp(pooled), seg_proj(seg[q])])``."""
    dtype = next(head.parameters()).dtype
    pooled = torch.as_tensor(pooled, dtype=dtype)
    seg = torch.as_tensor(seg, dtype=dtype)
    if pooled.shape != (head.cfg.d_t,):
        raise ShapeMismatch(f"pooled features {tuple(pooled.shape)}, expected ({head.cfg.d_t},)")
    if seg.ndim != 2:
        raise ShapeMismatch(f"segment embeddings must be (N, d_s), got {tuple(seg.shape)}")
    return head.classify(pooled.unsqueeze(0), seg, torch.zeros(len(seg), dtype=torch.long))


def presence_head(pooled, head: TemporalHead) -> torch.Tensor:
    if head.presence_mlp is None:
        raise ConfigInvalid("this head was built without presence supervision")
    dtype = next(head.parameters()).dtype
    return head.presence_probs(torch.as_tensor(pooled, dtype=dtype))


def temporal_loss(logits, labels, presence_probs=None, presence_target=None, lambda_presence: float = 1.0):
    """Region cross-entropy plus ``lambda_presence`` times the class-mean presence BCE."""
    loss = F.cross_entropy(logits, labels)
    if presence_probs is not None and lambda_presence > 0:
        loss = loss + lambda_presence * F.binary_cross_entropy(presence_probs, presence_target)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"temporal loss is {float(loss.detach())}")
    return loss


# training data ------------------------------------------------------------------


@dataclass
class RegionSamples:
    """Regions of many keyframes, ready for the temporal head.

    ``windows[k]`` holds the W descriptors of keyframe k; region r belongs
    to keyframe ``window_of[r]``.
    """

    keyframes: list  # frame ids
    windows: np.ndarray  # (K, W, d_f)
    presence: np.ndarray  # (K, C) bits
    seg: np.ndarray  # (R, d_s)
    window_of: np.ndarray  # (R,)
    labels: np.ndarray  # (R,) class ids, 0 = no-object

    @property
    def n_regions(self) -> int:
        return len(self.labels)


def build_windows(descriptors: np.ndarray, cfg: TemporalConfig) -> np.ndarray:
    """(T, d_f) -> (T, W, d_f): one window per keyframe."""
    T = len(descriptors)
    idx = np.array([window_indices(t, cfg.window, cfg.stride, T) for t in range(T)])
    return descriptors[idx]


def train_temporal(samples: RegionSamples, cfg: TemporalConfig, epochs: int = 40, lr: float = 2e-3, batch_frames: int = 64, weight_decay: float = 1e-4, dtype=torch.float32):
    """Fit a head on frozen baseline regions; returns ``(head, per-epoch loss)``."""
    torch.use_deterministic_algorithms(True)
    head = TemporalHead(cfg).to(dtype)
    head.train()
    optim = torch.optim.AdamW(head.parameters(), lr=lr, weight_decay=weight_decay)
    windows = torch.as_tensor(samples.windows, dtype=dtype)
    presence = torch.as_tensor(samples.presence, dtype=dtype)
    seg = torch.as_tensor(samples.seg, dtype=dtype)
    labels = torch.as_tensor(samples.labels, dtype=torch.long)
    win_of = np.asarray(samples.window_of)
    by_frame = [np.flatnonzero(win_of == k) for k in range(len(samples.keyframes))]
    keys = np.array([k for k in range(len(by_frame)) if len(by_frame[k])])
    rng = np.random.default_rng(cfg.seed)
    steps = epochs * math.ceil(len(keys) / batch_frames)
    sched = torch.optim.lr_scheduler.LambdaLR(optim, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, steps) / steps)))
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(keys)
        losses = []
        for s in range(0, len(order), batch_frames):
            ks = order[s : s + batch_frames]
            regions = np.concatenate([by_frame[k] for k in ks])
            local = np.concatenate([np.full(len(by_frame[k]), i) for i, k in enumerate(ks)])
            logits, probs = head(windows[ks], seg[regions], torch.as_tensor(local))
            loss = temporal_loss(logits, labels[regions], probs, presence[ks], cfg.effective_lambda)
            optim.zero_grad()
            loss.backward()
            optim.step()
            sched.step()
            losses.append(float(loss.detach()))
        curve.append(float(np.mean(losses)))
    log.debug("temporal head final loss %.4f", curve[-1])
    head.eval()
    return head, curve


@torch.no_grad()
def region_probs(head: TemporalHead, samples: RegionSamples) -> np.ndarray:
    """Softmax over C + 1 classes for every region."""
    dtype = next(head.parameters()).dtype
    pooled = head.encode(torch.as_tensor(samples.windows, dtype=dtype))
    logits = head.classify(pooled, torch.as_tensor(samples.seg, dtype=dtype), torch.as_tensor(samples.window_of, dtype=torch.long))
    return torch.softmax(logits, -1).double().numpy()


def relabel_classes(temporal_probs: np.ndarray, baseline_probs: np.ndarray, blend: float = 1.0) -> np.ndarray:
    """Real-class argmax of ``blend * temporal + (1 - blend) * baseline`` per region."""
    mix = blend * temporal_probs + (1.0 - blend) * baseline_probs
    return np.argmax(mix[:, 1:], axis=1) + 1


# feature cache -------------------------------------------------------------------

CACHE_VERSION = 1


def save_feature_cache(path, frame_ids: Sequence[str], features: np.ndarray) -> None:
    """``<path>.bin`` holds little-endian float32 rows; ``<path>.json`` maps frame id to row."""
    path = Path(path)
    feats = np.ascontiguousarray(features, dtype="<f4")
    if feats.ndim != 2 or len(feats) != len(frame_ids):
        raise ShapeMismatch(f"features {feats.shape} for {len(frame_ids)} frames")
    index = {
        "version": CACHE_VERSION,
        "dtype": "<f4",
        "dim": int(feats.shape[1]),
        "frames": {fid: i for i, fid in enumerate(frame_ids)},
    }
    path.with_suffix(".bin").write_bytes(feats.tobytes())
    path.with_suffix(".json").write_text(json.dumps(index, indent=1))


def load_feature_cache(path) -> tuple[list, np.ndarray]:
    path = Path(path)
    index = json.loads(path.with_suffix(".json").read_text())
    if index.get("version") != CACHE_VERSION:
        raise VersionMismatch(f"feature cache version {index.get('version')}, expected {CACHE_VERSION}")
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4")
    feats = flat.reshape(-1, index["dim"])
    frames = sorted(index["frames"], key=index["frames"].get)
    return frames, feats
