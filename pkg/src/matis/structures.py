"""Core records passed between pipeline stages.

Class ids run ``1..C``. Column ``0`` of every class-probability vector is
the no-object class, so ``class_probs[:, c]`` is the probability of class
``c`` without any index shifting.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch

NO_OBJECT = 0


@dataclass(frozen=True)
class RegionProposal:
    query: int
    class_probs: np.ndarray
    soft_mask: np.ndarray

    @property
    def score(self) -> float:
        return float(self.class_probs[1:].max())

    @property
    def argmax_class(self) -> int:
        """Real class realizing ``score`` (ties go to the lowest id)."""
        return int(np.argmax(self.class_probs[1:])) + 1

    @property
    def predicts_object(self) -> bool:
        # argmax over all C + 1 columns; ties resolve to the no-object column
        return bool(self.class_probs[1:].max() > self.class_probs[NO_OBJECT])


@dataclass
class ProposalSet:
    """The fixed-size set of N (class probabilities, soft mask) pairs for one frame."""

    frame: str
    class_probs: np.ndarray  # (N, C + 1)
    soft_masks: np.ndarray  # (N, H, W), values in [0, 1]

    def __post_init__(self):
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        self.soft_masks = np.asarray(self.soft_masks, dtype=np.float64)
        if self.class_probs.ndim != 2 or self.soft_masks.ndim != 3:
            raise DimensionMismatch("class_probs must be (N, C+1) and soft_masks (N, H, W)")
        if self.class_probs.shape[0] != self.soft_masks.shape[0]:
            raise DimensionMismatch(
                f"{self.class_probs.shape[0]} probability rows vs {self.soft_masks.shape[0]} masks"
            )

    @property
    def n(self) -> int:
        return self.class_probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_probs.shape[1] - 1

    @property
    def dims(self) -> tuple[int, int]:
        return self.soft_masks.shape[1], self.soft_masks.shape[2]

    @property
    def scores(self) -> np.ndarray:
        return self.class_probs[:, 1:].max(axis=1)

    @property
    def argmax_classes(self) -> np.ndarray:
        return self.class_probs[:, 1:].argmax(axis=1) + 1

    @property
    def object_flags(self) -> np.ndarray:
        return self.class_probs[:, 1:].max(axis=1) > self.class_probs[:, NO_OBJECT]

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> RegionProposal:
        return RegionProposal(i, self.class_probs[i], self.soft_masks[i])

    def permuted(self, order: Sequence[int]) -> "ProposalSet":
        order = np.asarray(order)
        return ProposalSet(self.frame, self.class_probs[order], self.soft_masks[order])


@dataclass
class FrameAnnotation:
    frame: str
    instances: list = field(default_factory=list)  # [(class_id, bool mask (H, W))]
    dims: tuple = None

    def __post_init__(self):
        self.instances = [(int(c), np.asarray(m, dtype=bool)) for c, m in self.instances]
        if self.dims is None:
            if not self.instances:
                raise DimensionMismatch("an annotation without instances needs explicit dims")
            self.dims = self.instances[0][1].shape
        self.dims = tuple(int(d) for d in self.dims)
        for _, m in self.instances:
            if m.shape != self.dims:
                raise DimensionMismatch(f"instance mask {m.shape} vs frame dims {self.dims}")

    @property
    def classes(self) -> list[int]:
        return [c for c, _ in self.instances]

    @property
    def masks(self) -> list[np.ndarray]:
        return [m for _, m in self.instances]
