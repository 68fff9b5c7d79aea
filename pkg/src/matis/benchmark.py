"""Desk-scale experiment drivers: the region-selection ablation on noisy
proposals and the ambiguous-pair video benchmark for the temporal head."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from .inference import STRATEGIES, TABLE3_LABELS, InferenceConfig, Region, calibrate_thresholds, select
from .masks import mask_iou
from .metrics import EvalReport, evaluate
from .model import ToyModelConfig
from .synth import NoiseConfig, SynthConfig, gen_frames, gen_noisy_proposals, gen_video
from .temporal import (
    RegionSamples,
    TemporalConfig,
    ablation_variant,
    build_windows,
    region_probs,
    relabel_classes,
    train_temporal,
    video_descriptors,
)
from .train import OptimConfig, predict_all, train_toy

log = logging.getLogger(__name__)


# region-selection ablation -----------------------------------------------------


def strategy_configs(synth: SynthConfig, val_sets, val_anns) -> dict[str, InferenceConfig]:
    """One config per strategy; the per-class thresholds are tuned on validation frames."""
    flags = synth.multi_instance_flags()
    out = {}
    for s in STRATEGIES:
        cfg = InferenceConfig.for_dataset(s, flags)
        if s in ("per-class-thresh", "composed"):
            cfg = cfg.replace(class_tau=calibrate_thresholds(val_sets, val_anns, cfg))
        out[s] = cfg
    return out


def selection_ablation(
    synth: SynthConfig = SynthConfig(),
    noise: NoiseConfig = NoiseConfig(),
    n_test: int = 200,
    n_val: int = 100,
    seed: int = 0,
    strategies=STRATEGIES,
) -> list[tuple[str, EvalReport]]:
    """Every strategy on the same noisy proposals; labels follow the ablation table."""
    test_anns, _ = gen_frames(synth, n_test, start=0)
    val_anns, _ = gen_frames(synth, n_val, start=50_000)
    test_sets = [gen_noisy_proposals(a, synth, noise, seed) for a in test_anns]
    val_sets = [gen_noisy_proposals(a, synth, noise, seed) for a in val_anns]
    cfgs = strategy_configs(synth, val_sets, val_anns)
    rows = []
    for s in strategies:
        preds = {p.frame: select(p, cfgs[s]) for p in test_sets}
        rows.append((TABLE3_LABELS[s], evaluate(preds, test_anns, synth.num_classes)))
    return rows


# toy end-to-end run -----------------------------------------------------------


@dataclass
class ToyRun:
    model: object
    curve: list
    report: EvalReport
    train_seconds: float


def toy_run(
    n_train: int = 500,
    n_test: int = 100,
    model: ToyModelConfig = ToyModelConfig(n_queries=20),
    optim: OptimConfig = OptimConfig(epochs=15),
    synth: SynthConfig = SynthConfig(),
) -> ToyRun:
    """Train on ``n_train`` frames, score Composed selection on ``n_test`` unseen ones."""
    anns, imgs = gen_frames(synth, n_train, start=0)
    t0 = time.perf_counter()
    net, curve = train_toy(anns, imgs, model, optim)
    took = time.perf_counter() - t0
    test_anns, test_imgs = gen_frames(synth, n_test, start=100_000)
    sets, _ = predict_all(net, test_anns, test_imgs)
    icfg = InferenceConfig.for_dataset("composed", synth.multi_instance_flags())
    preds = {p.frame: select(p, icfg) for p in sets}
    return ToyRun(net, curve, evaluate(preds, test_anns, synth.num_classes), took)


# video benchmark ---------------------------------------------------------------


@dataclass
class VideoBenchConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(video_length=48))
    base_videos: int = 24
    base_stride: int = 2  # every other frame of the baseline's training videos
    head_videos: int = 120
    test_videos: int = 30
    calib_videos: int = 10
    model: ToyModelConfig = field(default_factory=lambda: ToyModelConfig(n_queries=20))
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(epochs=15))
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    head_epochs: int = 40
    match_iou: float = 0.5

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class VideoRegions:
    """Baseline output of one video: selected regions plus what the head needs."""

    video: str
    annotations: list
    descriptors: np.ndarray  # (T, d_f)
    regions: list  # per frame: list[Region]
    probs: list  # per frame: (n_regions, C + 1) baseline class probabilities
    seg: list  # per frame: (n_regions, d_s)


def _video_seeds(base: int, n: int, seed: int) -> range:
    start = base + 1000 * seed
    return range(start, start + n)


def collect_regions(model, video, icfg: InferenceConfig, tcfg: TemporalConfig) -> VideoRegions:
    sets, seg = predict_all(model, video.annotations, video.images)
    seg = seg.double().numpy()
    regions, probs, segs = [], [], []
    for t, ps in enumerate(sets):
        regs = select(ps, icfg)
        q = np.array([r.query for r in regs], dtype=np.int64)
        regions.append(regs)
        probs.append(ps.class_probs[q])
        segs.append(seg[t, q])
    return VideoRegions(video.video, video.annotations, video_descriptors(video.images, tcfg), regions, probs, segs)


def region_labels(regions, ann, min_iou: float) -> np.ndarray:
    """Class of the best-overlapping annotated instance, 0 when none reaches ``min_iou``."""
    out = np.zeros(len(regions), dtype=np.int64)
    for i, r in enumerate(regions):
        best, cls = 0.0, 0
        for c, m in ann.instances:
            iou = mask_iou(r.mask, m) or 0.0
            if iou > best:
                best, cls = iou, c
        out[i] = cls if best >= min_iou else 0
    return out


def to_samples(videos: list[VideoRegions], tcfg: TemporalConfig, min_iou: float = 0.5) -> RegionSamples:
    keyframes, windows, presence, seg, window_of, labels = [], [], [], [], [], []
    k = 0
    for v in videos:
        wins = build_windows(v.descriptors, tcfg)
        for t, ann in enumerate(v.annotations):
            keyframes.append(ann.frame)
            windows.append(wins[t])
            bits = np.zeros(tcfg.num_classes)
            for c in ann.classes:
                bits[c - 1] = 1.0
            presence.append(bits)
            n = len(v.regions[t])
            if n:
                seg.append(v.seg[t])
                window_of.append(np.full(n, k))
                labels.append(region_labels(v.regions[t], ann, min_iou))
            k += 1
    d_s = videos[0].seg[0].shape[1] if videos and videos[0].seg else tcfg.d_s
    return RegionSamples(
        keyframes,
        np.stack(windows).astype(np.float32),
        np.stack(presence),
        np.concatenate(seg) if seg else np.zeros((0, d_s)),
        np.concatenate(window_of) if window_of else np.zeros(0, np.int64),
        np.concatenate(labels) if labels else np.zeros(0, np.int64),
    )


@dataclass
class BaselineRun:
    cfg: VideoBenchConfig
    model: object
    icfg: InferenceConfig
    head_videos: list
    test_videos: list
    train_seconds: float

    def baseline_report(self) -> EvalReport:
        preds = {a.frame: regs for v in self.test_videos for a, regs in zip(v.annotations, v.regions)}
        anns = [a for v in self.test_videos for a in v.annotations]
        return evaluate(preds, anns, self.cfg.synth.num_classes)


def run_baseline(cfg: VideoBenchConfig) -> BaselineRun:
    """Train the frame model on its own videos and collect regions for head training and testing."""
    synth = cfg.synth
    anns, imgs = [], []
    for s in _video_seeds(0, cfg.base_videos, cfg.seed):
        v = gen_video(synth, s)
        anns += v.annotations[:: cfg.base_stride]
        imgs.append(v.images[:: cfg.base_stride])
    t0 = time.time()
    model, _ = train_toy(anns, np.concatenate(imgs), cfg.model, cfg.optim)
    took = time.time() - t0
    log.info("baseline trained on %d frames in %.1fs", len(anns), took)

    # per-class thresholds for the frame recipe, tuned on a few held-out videos
    base_icfg = InferenceConfig.for_dataset("composed", synth.multi_instance_flags())
    cal_sets, cal_anns = [], []
    for s in _video_seeds(300, cfg.calib_videos, cfg.seed):
        v = gen_video(synth, s)
        sets, _ = predict_all(model, v.annotations[::4], v.images[::4])
        cal_sets += sets
        cal_anns += v.annotations[::4]
    icfg = base_icfg.replace(class_tau=calibrate_thresholds(cal_sets, cal_anns, base_icfg))

    head = [collect_regions(model, gen_video(synth, s), icfg, cfg.temporal) for s in _video_seeds(100, cfg.head_videos, cfg.seed)]
    test = [collect_regions(model, gen_video(synth, s), icfg, cfg.temporal) for s in _video_seeds(500, cfg.test_videos, cfg.seed)]
    return BaselineRun(cfg, model, icfg, head, test, took)


def relabeled_report(run: BaselineRun, tcfg: TemporalConfig, epochs: Optional[int] = None) -> tuple[EvalReport, list]:
    """Train one head on the run's head videos, relabel the test regions, score them."""
    train = to_samples(run.head_videos, tcfg, run.cfg.match_iou)
    head, curve = train_temporal(train, tcfg, epochs=epochs or run.cfg.head_epochs)
    test = to_samples(run.test_videos, tcfg, run.cfg.match_iou)
    probs = region_probs(head, test)
    base = np.concatenate([p for v in run.test_videos for p in v.probs if len(p)]) if test.n_regions else np.zeros((0, tcfg.num_classes + 1))
    new_cls = relabel_classes(probs, base, tcfg.blend)
    preds, i = {}, 0
    for v in run.test_videos:
        for a, regs in zip(v.annotations, v.regions):
            preds[a.frame] = [Region(int(new_cls[i + j]), r.mask, r.score, r.query) for j, r in enumerate(regs)]
            i += len(regs)
    anns = [a for v in run.test_videos for a in v.annotations]
    return evaluate(preds, anns, tcfg.num_classes), curve


TABLE4_CELLS = ((False, False), (True, False), (False, True), (True, True))


def temporal_ablation(run: BaselineRun, seeds=(0, 1, 2), windows=(8,)) -> list[dict]:
    """Time MLP x presence grid (full model only for other windows) over head seeds; one record per run."""
    out = []
    for w in windows:
        for mlp, pres in TABLE4_CELLS if w == run.cfg.temporal.window else ((True, True),):
            for s in seeds:
                tcfg = ablation_variant(run.cfg.temporal, mlp, pres).replace(window=w, seed=s)
                rep, _ = relabeled_report(run, tcfg)
                out.append({"window": w, "time_mlp": mlp, "presence": pres, "seed": s, "report": rep})
                log.info("W=%d mlp=%s presence=%s seed=%d mcIoU %.4f", w, mlp, pres, s, rep.mciou)
    return out


def table4_rows(records: list[dict], window: int = 8) -> list[tuple[str, EvalReport, bool, bool]]:
    """Seed-averaged rows of the Time MLP x presence grid."""
    from .metrics import fold_summary

    rows = []
    for mlp, pres in TABLE4_CELLS:
        reps = [r["report"] for r in records if r["window"] == window and r["time_mlp"] == mlp and r["presence"] == pres]
        if reps:
            rows.append((f"mlp={'on' if mlp else 'off'} presence={'on' if pres else 'off'}", fold_summary(reps), mlp, pres))
    return rows


def set_threads() -> int:
    import os

    n = int(os.environ.get("MATIS_BENCH_THREADS", "1"))
    torch.set_num_threads(max(1, n))
    return n
