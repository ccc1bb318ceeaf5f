"""Dataset manifests and image I/O.

A corpus on disk is a directory holding 8-bit grayscale PNGs, a mask PNG per
image, a ``labels.yaml`` vocabulary sidecar, and a JSONL manifest whose
entries carry paths relative to the manifest's directory, so a corpus can be
relocated wholesale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, EmptySplit
from .remap import LabelSpace, load_label_space, save_label_space

MANIFEST_FORMAT = "dataset-manifest/1"
SPLITS = ("train", "val", "test")
VIEWS = ("two_chamber", "four_chamber")
PHASES = ("ED", "ES")


@dataclass(frozen=True)
class ImageRecord:
    image: str  # path relative to the manifest directory
    mask: str
    view: str
    phase: str
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        if self.view not in VIEWS:
            raise DataError(f"unknown view {self.view!r}")
        if self.phase not in PHASES:
            raise DataError(f"unknown phase {self.phase!r}")

    def to_dict(self) -> dict:
        return {
            "image": self.image,
            "mask": self.mask,
            "view": self.view,
            "phase": self.phase,
            "split": self.split,
        }


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ImageRecord]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def split(self, name: str) -> list[ImageRecord]:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        return [e for e in self.entries if e.split == name]

    def require_split(self, name: str) -> list[ImageRecord]:
        entries = self.split(name)
        if not entries:
            raise EmptySplit(f"split {name!r} is empty")
        return entries

    @property
    def label_space(self) -> LabelSpace:
        return load_label_space(self.root / self.meta.get("labels", "labels.yaml"))

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        header = {"format": MANIFEST_FORMAT, **self.meta}
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps(e.to_dict(), sort_keys=True) for e in self.entries]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path: Path | str) -> "DatasetManifest":
        path = Path(path)
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        if not lines:
            raise DataError(f"empty manifest {path}")
        header = json.loads(lines[0])
        if header.pop("format", None) != MANIFEST_FORMAT:
            raise DataError(f"{path} is not a {MANIFEST_FORMAT} file")
        entries = [ImageRecord(**json.loads(ln)) for ln in lines[1:]]
        return cls(root=path.parent, entries=entries, meta=header)


# --- image files ----------------------------------------------------------------


def save_image(path: Path | str, image: np.ndarray) -> None:
    """Store a [0, 1] float image as 8-bit grayscale PNG."""
    arr = np.asarray(image, dtype=np.float64)
    quantized = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantized, mode="L").save(path)


def load_image(path: Path | str) -> np.ndarray:
    """Read an 8-bit grayscale PNG back to [0, 1] float64."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def to_model_range(image: np.ndarray) -> np.ndarray:
    """[0, 1] -> [-1, 1]."""
    return np.asarray(image, dtype=np.float64) * 2.0 - 1.0


def from_model_range(image: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 1], clipped."""
    return np.clip((np.asarray(image, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def load_pair(manifest: DatasetManifest, record: ImageRecord, space: LabelSpace | None = None):
    """(image in [0,1], SemanticMask) for one manifest entry."""
    from .remap import SemanticMask, load_mask

    space = space or manifest.label_space
    image = load_image(manifest.root / record.image)
    mask = load_mask(manifest.root / record.mask, space)
    if image.shape != mask.labels.shape:
        raise DataError(f"{record.image}: image {image.shape} vs mask {mask.labels.shape}")
    return image, mask


def write_corpus(
    out_dir: Path | str,
    items: list[tuple[np.ndarray, np.ndarray, ImageRecord]],
    space: LabelSpace,
    meta: dict,
) -> DatasetManifest:
    """Persist rendered (image, integer mask, record) triples plus sidecars."""
    from .remap import SemanticMask, save_mask

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for image, mask, record in items:
        save_image(out_dir / record.image, image)
        mask_path = out_dir / record.mask
        mask_path.parent.mkdir(parents=True, exist_ok=True)
        save_mask(SemanticMask(labels=np.asarray(mask), space=space), mask_path)
    save_label_space(space, out_dir / "labels.yaml")
    manifest = DatasetManifest(
        root=out_dir, entries=[r for _, _, r in items], meta={**meta, "labels": "labels.yaml"}
    )
    manifest.save(out_dir / "manifest.jsonl")
    return manifest
