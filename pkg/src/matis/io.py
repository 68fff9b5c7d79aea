"""On-disk formats: dataset container, region and annotation JSONL,
proposal archives and run manifests.

Dataset container (a directory):

* ``meta.json``      config, class table, multi-instance flags, image index
* ``frames.jsonl``   one annotation per line: ``{"frame", "height", "width", "regions": [{"class", "rle"}]}``
* ``images.bin``     raw little-endian float32 images, (n, 3, H, W) in ``meta.json`` order

Region files use the same line layout with ``score`` and ``query`` added
to each region.
"""
from __future__ import annotations

import json
import os
import shutil
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import ARTIFACT_VERSION
from .errors import MissingInput, VersionMismatch
from .inference import Region
from .masks import RleMask, rle_decode, rle_encode
from .structures import FrameAnnotation, ProposalSet

DATASET_FORMAT = "matis-dataset"


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingInput(f"{path} does not exist")
    return path


def _check_version(doc: dict, what: str) -> None:
    if doc.get("version") != ARTIFACT_VERSION:
        raise VersionMismatch(f"{what} has version {doc.get('version')}, expected {ARTIFACT_VERSION}")


# annotations and regions -------------------------------------------------------


def annotation_line(ann: FrameAnnotation) -> dict:
    h, w = ann.dims
    return {
        "frame": ann.frame,
        "height": h,
        "width": w,
        "regions": [{"class": c, "rle": rle_encode(m).to_json()} for c, m in ann.instances],
    }


def region_line(frame: str, dims, regions: Iterable) -> dict:
    h, w = dims
    out = []
    for r in regions:
        out.append({"class": int(r.cls), "score": float(r.score), "query": int(r.query), "rle": rle_encode(r.mask).to_json()})
    return {"frame": frame, "height": h, "width": w, "regions": out}


def write_jsonl(path, docs: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for doc in docs:
            fh.write(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(_require(Path(path))) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_annotations(path, anns: Iterable[FrameAnnotation]) -> None:
    write_jsonl(path, (annotation_line(a) for a in anns))


def parse_annotation(doc: dict) -> FrameAnnotation:
    dims = (int(doc["height"]), int(doc["width"]))
    inst = [(int(r["class"]), rle_decode(RleMask.from_json(r["rle"]))) for r in doc["regions"]]
    return FrameAnnotation(doc["frame"], inst, dims=dims)


def read_annotations(path) -> list[FrameAnnotation]:
    return [parse_annotation(d) for d in read_jsonl(path)]


def write_regions(path, preds: dict, dims: dict) -> None:
    """``preds``: frame id -> list of :class:`Region`; ``dims``: frame id -> (H, W)."""
    write_jsonl(path, (region_line(f, dims[f], preds[f]) for f in sorted(preds)))


def read_regions(path) -> dict[str, list[Region]]:
    out = {}
    for doc in read_jsonl(path):
        out[doc["frame"]] = [
            Region(int(r["class"]), rle_decode(RleMask.from_json(r["rle"])), float(r.get("score", 1.0)), int(r.get("query", -1)))
            for r in doc["regions"]
        ]
    return out


# dataset container ----------------------------------------------------------------


@dataclass
class Dataset:
    meta: dict
    annotations: list
    images: np.ndarray  # (n, 3, H, W) float32

    @property
    def num_classes(self) -> int:
        return len(self.meta["classes"])


def write_dataset(out_dir, anns, images: np.ndarray, config: dict, classes: list, multi_instance: dict, extra: Optional[dict] = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    imgs = np.ascontiguousarray(images, dtype="<f4")
    meta = {
        "format": DATASET_FORMAT,
        "version": ARTIFACT_VERSION,
        "config": config,
        "classes": classes,
        "multi_instance": {str(c): bool(f) for c, f in sorted(multi_instance.items())},
        "images": {"file": "images.bin", "dtype": "<f4", "shape": list(imgs.shape), "frames": [a.frame for a in anns]},
    }
    if extra:
        meta.update(extra)
    write_annotations(out / "frames.jsonl", anns)
    (out / "images.bin").write_bytes(imgs.tobytes())
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def read_dataset(path) -> Dataset:
    root = _require(Path(path))
    meta = json.loads(_require(root / "meta.json").read_text())
    if meta.get("format") != DATASET_FORMAT:
        raise VersionMismatch(f"{root} is not a dataset container")
    _check_version(meta, "dataset")
    anns = read_annotations(root / "frames.jsonl")
    info = meta["images"]
    raw = np.frombuffer(_require(root / info["file"]).read_bytes(), dtype=info["dtype"])
    images = raw.reshape(info["shape"]).astype(np.float32)
    if [a.frame for a in anns] != info["frames"]:
        from .errors import FrameIdMismatch

        raise FrameIdMismatch("frames.jsonl order differs from the image index")
    return Dataset(meta, anns, images)


# proposals ------------------------------------------------------------------------


def write_proposals(path, sets: list[ProposalSet], seg: Optional[np.ndarray] = None) -> None:
    """Compressed ``.npz``: frame ids, class probabilities, soft masks, optional segment embeddings."""
    arrays = {
        "version": np.array(ARTIFACT_VERSION),
        "frames": np.array([p.frame for p in sets]),
        "class_probs": np.stack([p.class_probs for p in sets]).astype("<f8"),
        "soft_masks": np.stack([p.soft_masks for p in sets]).astype("<f4"),
    }
    if seg is not None:
        arrays["seg"] = np.asarray(seg, dtype="<f8")
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **arrays)


def read_proposals(path) -> tuple[list[ProposalSet], Optional[np.ndarray]]:
    with np.load(_require(Path(path))) as z:
        if int(z["version"]) != ARTIFACT_VERSION:
            raise VersionMismatch(f"proposal file version {int(z['version'])}, expected {ARTIFACT_VERSION}")
        frames = [str(f) for f in z["frames"]]
        probs = z["class_probs"]
        masks = z["soft_masks"].astype(np.float64)
        seg = z["seg"] if "seg" in z.files else None
    return [ProposalSet(f, probs[i], masks[i]) for i, f in enumerate(frames)], seg


# manifests ------------------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: list
    outputs: list
    seed: int
    artifact_version: int = ARTIFACT_VERSION
    duration_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "RunManifest":
        return cls(**doc)

    def same_run(self, other: "RunManifest") -> bool:
        """Equal up to wall-clock time."""
        a, b = self.to_json(), other.to_json()
        a.pop("duration_s")
        b.pop("duration_s")
        return a == b

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls.from_json(json.loads(_require(Path(path)).read_text()))


@contextmanager
def atomic_output(path):
    """Yield a temporary sibling path; move it into place only if the block succeeds.

    Works for files and directories. On failure the partial output is deleted
    and any previous output at ``path`` is left untouched.
    """
    path = Path(path)
    tmp = path.with_name(f".{path.name}.partial-{os.getpid()}")
    if tmp.is_dir():
        shutil.rmtree(tmp)
    elif tmp.exists():
        tmp.unlink()
    try:
        yield tmp
    except BaseException:
        if tmp.is_dir():
            shutil.rmtree(tmp, ignore_errors=True)
        elif tmp.exists():
            tmp.unlink()
        raise
    if path.is_dir():
        shutil.rmtree(path)
    elif path.exists():
        path.unlink()
    os.replace(tmp, path)


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0
