"""Seeded, single-threaded training loop for the toy segmenter."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .errors import DivergenceDetected
from .matching import MatchWeights
from .model import ToyMaskModel, ToyModelConfig, build_model, criterion, make_targets

log = logging.getLogger(__name__)


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 40
    batch_size: int = 8
    grad_clip: float = 1.0
    deep_supervision: bool = True
    warmup_steps: int = 50
    seed: int = 0
    weights: MatchWeights = field(default_factory=MatchWeights)

    def to_json(self) -> dict:
        return asdict(self)


def set_deterministic(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


def train_toy(
    annotations,
    images: np.ndarray,
    cfg: ToyModelConfig,
    opt: OptimConfig = OptimConfig(),
    dtype=torch.float32,
    callback: Optional[Callable[[int, float], None]] = None,
) -> tuple[ToyMaskModel, list[float]]:
    """Train on ``(annotations, images)``; returns the model and per-epoch mean loss.

    Everything random derives from ``cfg.seed`` (weights) and ``opt.seed``
    (batch order), so two runs with the same seeds give identical curves.
    """
    set_deterministic()
    model = build_model(cfg, dtype)
    model.train()
    optim = torch.optim.AdamW(model.parameters(), lr=opt.lr, weight_decay=opt.weight_decay)
    n = len(annotations)
    steps_per_epoch = math.ceil(n / opt.batch_size)
    total_steps = steps_per_epoch * opt.epochs

    def lr_at(step: int) -> float:
        if step < opt.warmup_steps:
            return (step + 1) / opt.warmup_steps
        # cosine decay to 5% of the base rate
        t = (step - opt.warmup_steps) / max(1, total_steps - opt.warmup_steps)
        return 0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * t))

    sched = torch.optim.lr_scheduler.LambdaLR(optim, lr_at)
    targets = make_targets(annotations, dtype)
    imgs = torch.as_tensor(np.asarray(images), dtype=dtype)
    rng = np.random.default_rng(opt.seed)
    curve = []
    t0 = time.time()
    for epoch in range(opt.epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, opt.batch_size):
            idx = order[s : s + opt.batch_size]
            out = model(imgs[idx])
            loss, _ = criterion(out, [targets[i] for i in idx], opt.weights, opt.deep_supervision)
            if not torch.isfinite(loss):
                raise DivergenceDetected(f"non-finite loss at epoch {epoch}")
            optim.zero_grad()
            loss.backward()
            if opt.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), opt.grad_clip)
            optim.step()
            sched.step()
            losses.append(float(loss.detach()))
        curve.append(float(np.mean(losses)))
        log.info("epoch %d loss %.4f (%.1fs)", epoch, curve[-1], time.time() - t0)
        if callback is not None:
            callback(epoch, curve[-1])
    model.eval()
    return model, curve


def predict_all(model: ToyMaskModel, annotations, images, batch_size: int = 16):
    """Proposal sets and segment embeddings for every frame."""
    dtype = next(model.parameters()).dtype
    sets, segs = [], []
    for s in range(0, len(annotations), batch_size):
        chunk = annotations[s : s + batch_size]
        ps, seg = model.predict(torch.as_tensor(np.asarray(images[s : s + batch_size]), dtype=dtype), [a.frame for a in chunk])
        sets.extend(ps)
        segs.append(seg)
    return sets, torch.cat(segs) if segs else None
