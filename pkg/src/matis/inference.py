"""Region selection: turn a frame's N proposals into a list of final regions.

Seven strategies are available under their CLI names:

=====================  ==============================================
``all``                every proposal whose argmax is a real class
``thresh05``           ``all`` filtered by ``score >= tau`` (0.5)
``top4``               the ``k`` (4) best-scoring ``all`` proposals
``nms``                greedy class-agnostic mask NMS over ``all``
``per-class-thresh``   ``score >= class_tau[argmax class]``
``top-k-per-class``    the ``class_k[c]`` best proposals of each class
``composed``           ``per-class-thresh`` then ``top-k-per-class``
=====================  ==============================================

Score is the best real-class probability. Ties are broken by the lower
query index everywhere, so selection is deterministic.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import ConfigInvalid
from .masks import mask_iou
from .structures import ProposalSet

STRATEGIES = ("all", "nms", "thresh05", "top4", "per-class-thresh", "top-k-per-class", "composed")

TABLE3_LABELS = {
    "all": "All masks",
    "nms": "NMS",
    "thresh05": "0.5 threshold",
    "top4": "Top 4 instances",
    "per-class-thresh": "Per-class thresholds",
    "top-k-per-class": "Top k per-class",
    "composed": "Top k per-class + Per-class thresholds",
}


class Region(NamedTuple):
    cls: int
    mask: np.ndarray
    score: float
    query: int = -1


@dataclass
class InferenceConfig:
    strategy: str = "composed"
    tau: float = 0.5
    k: int = 4
    iou_tau: float = 0.5
    class_tau: dict = field(default_factory=dict)  # class id -> threshold, missing -> default_class_tau
    class_k: dict = field(default_factory=dict)  # class id -> k, missing -> default_class_k
    default_class_tau: float = 0.5
    default_class_k: int = 1
    binarize_tau: float = 0.5

    def __post_init__(self):
        self.class_tau = {int(c): float(t) for c, t in self.class_tau.items()}
        self.class_k = {int(c): int(k) for c, k in self.class_k.items()}
        self.validate()

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigInvalid(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        taus = [self.tau, self.iou_tau, self.default_class_tau, self.binarize_tau, *self.class_tau.values()]
        if any(not 0.0 <= t <= 1.0 for t in taus):
            raise ConfigInvalid("thresholds must lie in [0, 1]")
        if min([self.k, self.default_class_k, *self.class_k.values()]) < 1:
            raise ConfigInvalid("every k must be >= 1")

    def tau_for(self, cls: int) -> float:
        return self.class_tau.get(cls, self.default_class_tau)

    def k_for(self, cls: int) -> int:
        return self.class_k.get(cls, self.default_class_k)

    def replace(self, **changes) -> "InferenceConfig":
        doc = asdict(self)
        doc.update(changes)
        return InferenceConfig(**doc)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["class_tau"] = {str(c): t for c, t in sorted(self.class_tau.items())}
        doc["class_k"] = {str(c): k for c, k in sorted(self.class_k.items())}
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "InferenceConfig":
        return cls(**doc)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    @classmethod
    def for_dataset(cls, strategy: str, multi_instance: dict, **kw) -> "InferenceConfig":
        """k = 2 for classes flagged multi-instance, 1 otherwise."""
        class_k = {int(c): (2 if flag else 1) for c, flag in multi_instance.items()}
        return cls(strategy=strategy, class_k=class_k, **kw)


def _candidates(proposals: ProposalSet, binarize_tau: float) -> list[Region]:
    """Real-class proposals with a non-empty binarized mask, best score first."""
    scores = proposals.scores
    classes = proposals.argmax_classes
    keep = np.flatnonzero(proposals.object_flags)
    out = []
    for q in keep:
        mask = proposals.soft_masks[q] >= binarize_tau
        if mask.any():
            out.append(Region(int(classes[q]), mask, float(scores[q]), int(q)))
    out.sort(key=lambda r: (-r.score, r.query))
    return out


def nms(regions: Sequence[Region], iou_tau: float) -> list[Region]:
    """Greedy class-agnostic suppression: keep a region iff IoU < iou_tau with every kept one."""
    ordered = sorted(regions, key=lambda r: (-r.score, r.query))
    kept: list[Region] = []
    for region in ordered:
        ok = True
        for other in kept:
            iou = mask_iou(region.mask, other.mask)
            if iou is not None and iou >= iou_tau:
                ok = False
                break
        if ok:
            kept.append(region)
    return kept


def _top_k_per_class(regions: Sequence[Region], cfg: InferenceConfig) -> list[Region]:
    taken: dict[int, int] = {}
    out = []
    for r in regions:  # already in descending score order
        if taken.get(r.cls, 0) < cfg.k_for(r.cls):
            taken[r.cls] = taken.get(r.cls, 0) + 1
            out.append(r)
    return out


def select_from(regions: Sequence[Region], cfg: InferenceConfig) -> list[Region]:
    """Apply ``cfg.strategy`` to already-binarized candidates (descending score order)."""
    s = cfg.strategy
    if s == "all":
        return list(regions)
    if s == "thresh05":
        return [r for r in regions if r.score >= cfg.tau]
    if s == "top4":
        return list(regions[: cfg.k])
    if s == "nms":
        return nms(regions, cfg.iou_tau)
    if s == "per-class-thresh":
        return [r for r in regions if r.score >= cfg.tau_for(r.cls)]
    if s == "top-k-per-class":
        return _top_k_per_class(regions, cfg)
    if s == "composed":
        survivors = [r for r in regions if r.score >= cfg.tau_for(r.cls)]
        return _top_k_per_class(survivors, cfg)
    raise ConfigInvalid(f"unknown strategy {s!r}")


def select(proposals: ProposalSet, cfg: InferenceConfig) -> list[Region]:
    return select_from(_candidates(proposals, cfg.binarize_tau), cfg)


def calibrate_thresholds(
    proposal_sets: Sequence[ProposalSet],
    annotations: Sequence,
    cfg: InferenceConfig,
    grid: Optional[Sequence[float]] = None,
    objective: str = "mciou",
) -> dict[int, float]:
    """Sweep a threshold per class on validation data.

    Each class is scored only from its own regions, so classes are tuned
    independently. ``cfg.strategy`` picks whether the sweep runs with the
    per-class top-k cap (``composed``) or without it. The objective is the
    class's IoU averaged over frames where it is annotated or predicted
    (``mciou``) or only where it is annotated (``miou``). Ties go to the
    lowest threshold.
    """
    if grid is None:
        grid = np.round(np.arange(0.0, 1.0001, 0.025), 3)
    use_k = cfg.strategy == "composed"
    cands = [_candidates(p, cfg.binarize_tau) for p in proposal_sets]
    classes = sorted({r.cls for cs in cands for r in cs} | {c for a in annotations for c in a.classes})
    out = {}
    for c in classes:
        gt_masks = []
        for ann in annotations:
            m = np.zeros(ann.dims, dtype=bool)
            for cls, inst in ann.instances:
                if cls == c:
                    m |= inst
            gt_masks.append(m)
        best_tau, best_val = float(grid[0]), -1.0
        for tau in grid:
            vals = []
            for cs, gm in zip(cands, gt_masks):
                mine = [r for r in cs if r.cls == c and r.score >= tau]
                if use_k:
                    mine = mine[: cfg.k_for(c)]
                pm = np.zeros_like(gm)
                for r in mine:
                    pm |= r.mask
                iou = mask_iou(pm, gm)
                if iou is None:
                    continue
                if objective == "miou" and not gm.any():
                    continue
                vals.append(iou)
            # nothing annotated and nothing predicted: no error to count
            val = float(np.mean(vals)) if vals else 1.0
            if val > best_val + 1e-12:
                best_tau, best_val = float(tau), val
        out[c] = best_tau
    return out
