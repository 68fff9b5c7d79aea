"""Frame- and class-averaged IoU metrics and the oracle-relabeling upper bounds.

Per frame f, let G_f be the annotated classes and P_f the predicted ones.
Class IoU compares the union of all predicted masks of a class with the
union of all annotated masks of that class.

* ``miou``  mean over frames of the mean IoU over G_f
* ``iou``   mean over frames of the mean IoU over G_f | P_f
* ``mciou`` mean over classes of the class's mean IoU over frames with c in G_f | P_f

Frames where the relevant class set is empty are skipped, and classes that
never appear are left out of the class mean.
"""
from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, FrameIdMismatch
from .inference import InferenceConfig, Region, select
from .masks import class_union, mask_iou
from .structures import FrameAnnotation, ProposalSet


@dataclass
class EvalReport:
    miou: float
    iou: float
    mciou: float
    per_class: list  # index c - 1 -> class mean IoU or None
    per_frame: list = field(default_factory=list)  # [{"frame", "miou", "iou"}]
    stddev: Optional[float] = None

    def to_json(self) -> dict:
        return {
            "miou": self.miou,
            "iou": self.iou,
            "mciou": self.mciou,
            "per_class": self.per_class,
            "per_frame": self.per_frame,
            "stddev": self.stddev,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EvalReport":
        return cls(**doc)


def _mean(xs) -> float:
    xs = list(xs)
    return math.fsum(xs) / len(xs)


def frame_class_ious(pred_regions: Sequence, gt: FrameAnnotation) -> dict[int, Optional[float]]:
    """IoU per class over annotated-or-predicted classes of one frame."""
    pred = class_union(pred_regions)
    truth = class_union(gt.instances)
    empty = np.zeros(gt.dims, dtype=bool)
    out = {}
    for c in sorted(set(pred) | set(truth)):
        p = pred.get(c, empty)
        t = truth.get(c, empty)
        if p.shape != empty.shape:
            raise DimensionMismatch(f"prediction dims {p.shape} vs frame dims {gt.dims}")
        out[c] = mask_iou(p, t)
    return out


def _as_mapping(items, what: str) -> dict:
    if isinstance(items, Mapping):
        return dict(items)
    out = {}
    for item in items:
        key = item.frame if hasattr(item, "frame") else item[0]
        out[key] = item
    if len(out) != len(items):
        raise FrameIdMismatch(f"duplicate frame ids in {what}")
    return out


def evaluate(preds: Mapping[str, Sequence], gts: Sequence[FrameAnnotation], num_classes: Optional[int] = None) -> EvalReport:
    """Score per-frame predicted regions against annotations.

    ``preds`` maps frame id to that frame's regions (tuples starting with
    ``(class_id, mask)``).
    """
    gt_map = _as_mapping(gts, "annotations")
    preds = dict(preds)
    if set(preds) != set(gt_map):
        missing = sorted(set(gt_map) - set(preds))[:5]
        extra = sorted(set(preds) - set(gt_map))[:5]
        raise FrameIdMismatch(f"frame ids differ: missing predictions {missing}, unknown frames {extra}")

    frame_miou, frame_iou, per_frame = [], [], []
    class_vals: dict[int, list] = {}
    for fid in sorted(gt_map):
        gt = gt_map[fid]
        ious = frame_class_ious(preds[fid], gt)
        gt_classes = set(gt.classes)
        both = [v for v in ious.values() if v is not None]
        gt_only = [ious[c] for c in sorted(gt_classes) if ious[c] is not None]
        entry = {"frame": fid, "miou": None, "iou": None}
        if gt_only:
            entry["miou"] = _mean(gt_only)
            frame_miou.append(entry["miou"])
        if both:
            entry["iou"] = _mean(both)
            frame_iou.append(entry["iou"])
        per_frame.append(entry)
        for c, v in ious.items():
            if v is not None:
                class_vals.setdefault(c, []).append(v)

    if num_classes is None:
        num_classes = max([*class_vals, 0])
    per_class = [(_mean(class_vals[c]) if c in class_vals else None) for c in range(1, num_classes + 1)]
    present = [v for v in per_class if v is not None]
    return EvalReport(
        miou=_mean(frame_miou) if frame_miou else 0.0,
        iou=_mean(frame_iou) if frame_iou else 0.0,
        mciou=_mean(present) if present else 0.0,
        per_class=per_class,
        per_frame=per_frame,
    )


def fold_summary(reports: Sequence[EvalReport]) -> EvalReport:
    """Average fold reports; ``stddev`` is the sample std of fold-level mIoU."""
    n_cls = max(len(r.per_class) for r in reports)
    per_class = []
    for i in range(n_cls):
        vals = [r.per_class[i] for r in reports if i < len(r.per_class) and r.per_class[i] is not None]
        per_class.append(_mean(vals) if vals else None)
    mious = [r.miou for r in reports]
    return EvalReport(
        miou=_mean(mious),
        iou=_mean(r.iou for r in reports),
        mciou=_mean(r.mciou for r in reports),
        per_class=per_class,
        per_frame=[f for r in reports for f in r.per_frame],
        stddev=statistics.stdev(mious) if len(mious) > 1 else None,
    )


def oracle_relabel(candidates: Sequence[np.ndarray], gt: FrameAnnotation, injective: bool = False) -> list[Region]:
    """Give each annotated instance its best-IoU candidate mask, labelled with the true class.

    Non-injective by default: one candidate may serve several instances.
    With ``injective=True`` the matching is a max-total-IoU assignment.
    Instances whose best candidate has zero overlap get nothing.
    """
    if not gt.instances or not len(candidates):
        return []
    iou = np.zeros((len(candidates), len(gt.instances)))
    for i, cand in enumerate(candidates):
        for j, (_, inst) in enumerate(gt.instances):
            iou[i, j] = mask_iou(cand, inst) or 0.0
    if injective:
        from .matching import hungarian

        pairs = hungarian(-iou).items()
    else:
        pairs = ((j, int(np.argmax(iou[:, j]))) for j in range(len(gt.instances)))
    out = []
    for j, i in pairs:
        if iou[i, j] > 0:
            out.append(Region(gt.instances[j][0], candidates[i], float(iou[i, j]), int(i)))
    return out


def upper_bound(
    source: str,
    proposal_sets: Sequence[ProposalSet],
    gts: Sequence[FrameAnnotation],
    cfg: Optional[InferenceConfig] = None,
    injective: bool = False,
    num_classes: Optional[int] = None,
) -> EvalReport:
    """``source="selected"``: candidates are the regions chosen by ``cfg``
    (inferred bound). ``source="all"``: all N binarized proposals (total bound)."""
    source = source.lower()
    if source not in ("selected", "all"):
        raise ValueError(f"source must be 'selected' or 'all', got {source!r}")
    if source == "selected" and cfg is None:
        raise ValueError("the selected-regions bound needs an InferenceConfig")
    binarize = cfg.binarize_tau if cfg is not None else 0.5
    gt_map = _as_mapping(gts, "annotations")
    prop_map = _as_mapping(proposal_sets, "proposals")
    if set(gt_map) != set(prop_map):
        raise FrameIdMismatch("proposal and annotation frame ids differ")
    relabeled = {}
    for fid, props in prop_map.items():
        if source == "selected":
            cands = [r.mask for r in select(props, cfg)]
        else:
            cands = [m >= binarize for m in props.soft_masks]
        relabeled[fid] = oracle_relabel(cands, gt_map[fid], injective=injective)
    return evaluate(relabeled, list(gt_map.values()), num_classes=num_classes)


def upper_bound_from_regions(regions: Mapping[str, Sequence], gts: Sequence[FrameAnnotation], injective: bool = False, num_classes: Optional[int] = None) -> EvalReport:
    """Inferred bound when only the already-selected regions are at hand."""
    gt_map = _as_mapping(gts, "annotations")
    if set(regions) != set(gt_map):
        raise FrameIdMismatch("region and annotation frame ids differ")
    relabeled = {fid: oracle_relabel([r[1] for r in regs], gt_map[fid], injective) for fid, regs in regions.items()}
    return evaluate(relabeled, list(gt_map.values()), num_classes=num_classes)


def format_table(rows: Sequence[tuple[str, EvalReport]], class_names: Optional[Sequence[str]] = None, label: str = "Method") -> str:
    """Aligned text table: overall metrics, then one column per class, in percent."""
    n_cls = max(len(r.per_class) for _, r in rows) if rows else 0
    names = list(class_names or [])[:n_cls] + [f"c{i + 1}" for i in range(len(class_names or []), n_cls)]
    header = [label, "mIoU", "IoU", "mcIoU", *names]
    body = []
    for name, rep in rows:
        cells = [name, f"{100 * rep.miou:.2f}", f"{100 * rep.iou:.2f}", f"{100 * rep.mciou:.2f}"]
        for i in range(n_cls):
            v = rep.per_class[i] if i < len(rep.per_class) else None
            cells.append("-" if v is None else f"{100 * v:.2f}")
        body.append(cells)
    widths = [max(len(str(row[i])) for row in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(row, widths))) for row in [header, *body]]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"
