"""Multiclass segmentation harness for measuring synthetic-data value.

A small convolutional encoder-decoder is trained on a manifest's train
split (real or real+synthetic) and scored on real held-out splits with
the pooled Dice family. Comparing the same harness trained with and
without synthetic augmentation turns image quality into a task metric.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import DatasetManifest, load_pair, to_model_range
from .errors import (
    ConfigError,
    PlanMismatch,
    ShapeMismatch,
    SyntheticInEvaluation,
)
from .metrics import ConfusionTotals, dice_report, global_dice
from .pipelines import SYNTH_META_KEY
from .remap import LabelSpace
from .reporting import RunLog

SEG_FORMAT = "seg-checkpoint/1"


@dataclass(frozen=True)
class SegConfig:
    """Harness hyperparameters; ``classes`` fixes the output vocabulary."""

    classes: LabelSpace
    resolution: int = 64
    base_channels: int = 16
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")

    def to_dict(self) -> dict:
        return {
            "classes": self.classes.to_dict(),
            "resolution": self.resolution,
            "base_channels": self.base_channels,
            "epochs": self.epochs,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SegConfig":
        d = dict(d)
        return cls(classes=LabelSpace.from_dict(d.pop("classes")), **d)


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.GroupNorm(min(8, cout), cout),
        nn.SiLU(),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.GroupNorm(min(8, cout), cout),
        nn.SiLU(),
    )


class SegNet(nn.Module):
    """Three-level encoder-decoder with skip connections.

    Input is one grayscale channel; output has one logit per class plus a
    leading background logit, so channel i+1 scores the i-th class of the
    vocabulary and argmax indices translate directly back to class ids.
    """

    def __init__(self, config: SegConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        n_out = len(config.classes.classes) + 1
        self.enc1 = _block(1, c)
        self.enc2 = _block(c, 2 * c)
        self.enc3 = _block(2 * c, 4 * c)
        self.pool = nn.MaxPool2d(2)
        self.mid = _block(4 * c, 4 * c)
        self.up3 = nn.ConvTranspose2d(4 * c, 4 * c, 2, stride=2)
        self.dec3 = _block(8 * c, 2 * c)
        self.up2 = nn.ConvTranspose2d(2 * c, 2 * c, 2, stride=2)
        self.dec2 = _block(4 * c, c)
        self.up1 = nn.ConvTranspose2d(c, c, 2, stride=2)
        self.dec1 = _block(2 * c, c)
        self.head = nn.Conv2d(c, n_out, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeMismatch(f"expected (B, 1, H, W), got {tuple(x.shape)}")
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        e3 = self.enc3(self.pool(e2))
        m = self.mid(self.pool(e3))
        d3 = self.dec3(torch.cat([self.up3(m), e3], dim=1))
        d2 = self.dec2(torch.cat([self.up2(d3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return self.head(d1)


def _id_to_index(space: LabelSpace) -> dict[int, int]:
    """Class id -> logit channel; background 0 -> 0."""
    table = {0: 0}
    for i, (cid, _) in enumerate(space.classes):
        table[cid] = i + 1
    return table


def _index_to_id(space: LabelSpace) -> np.ndarray:
    return np.array([0] + [cid for cid, _ in space.classes], dtype=np.int64)


def soft_dice_loss(logits: torch.Tensor, target_idx: torch.Tensor) -> torch.Tensor:
    """1 - mean soft Dice over foreground channels present in the batch."""
    probs = torch.softmax(logits, dim=1)
    n_classes = logits.shape[1]
    onehot = F.one_hot(target_idx, n_classes).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    present = onehot.sum(dims)[1:] > 0
    if not bool(present.any()):
        return logits.sum() * 0.0
    dice = (2.0 * inter[1:] + 1e-6) / (denom[1:] + 1e-6)
    return 1.0 - dice[present].mean()


def _load_split(manifest: DatasetManifest, split: str, config: SegConfig):
    """(images (B,1,H,W) in [-1,1], class-index targets (B,H,W) long)."""
    space = manifest.label_space
    if space != config.classes:
        raise PlanMismatch(
            f"manifest vocabulary {space.name!r} differs from the harness's "
            f"{config.classes.name!r}"
        )
    table = _id_to_index(space)
    images, targets = [], []
    for record in manifest.require_split(split):
        image, mask = load_pair(manifest, record, space)
        if image.shape != (config.resolution, config.resolution):
            raise ShapeMismatch(
                f"{record.image} is {image.shape}, harness expects "
                f"({config.resolution}, {config.resolution})"
            )
        idx = np.zeros_like(mask.labels, dtype=np.int64)
        for cid, ch in table.items():
            idx[mask.labels == cid] = ch
        images.append(to_model_range(image))
        targets.append(idx)
    x = torch.tensor(np.stack(images), dtype=torch.float32).unsqueeze(1)
    y = torch.tensor(np.stack(targets), dtype=torch.long)
    return x, y


def synthetic_entries(manifest: DatasetManifest, split: str) -> list:
    """Entries of a split that came from a generator rather than a scanner."""
    records = manifest.split(split)
    if manifest.meta.get(SYNTH_META_KEY):
        return list(records)
    synth_root = manifest.meta.get("synthetic_root")
    if synth_root is None:
        return []
    base = (manifest.root / synth_root).resolve()
    out = []
    for record in records:
        image = (manifest.root / record.image).resolve()
        if base == image or base in image.parents:
            out.append(record)
    return out


def train_segmenter(
    config: SegConfig,
    manifest: DatasetManifest,
    out_dir: Path | str,
) -> Path:
    """Train on the train split, keep the checkpoint best on validation.

    Loss is cross-entropy plus soft Dice. After every epoch the model is
    scored on the val split with pooled Global Dice; the state with the
    highest score (earliest epoch on ties) is saved. Fully deterministic
    for a fixed config.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    net = SegNet(config)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr)
    x_train, y_train = _load_split(manifest, "train", config)
    x_val, y_val = _load_split(manifest, "val", config)
    g = torch.Generator().manual_seed(config.seed)

    config_hash = hashlib.sha256(
        json.dumps(config.to_dict(), sort_keys=True).encode()
    ).hexdigest()
    log = RunLog(out_dir / "seg_log.jsonl", phase="seg", config_hash=config_hash)

    best_state = None
    best_score = -1.0
    best_epoch = -1
    for epoch in range(config.epochs):
        net.train()
        order = torch.randperm(len(x_train), generator=g)
        losses = []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            logits = net(x_train[idx])
            loss = F.cross_entropy(logits, y_train[idx]) + soft_dice_loss(
                logits, y_train[idx]
            )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.item()))
        val_score = _score(net, x_val, y_val, config)
        log.append(
            step=epoch,
            loss=float(np.mean(losses)),
            lr=config.lr,
            val_global_dice=val_score,
        )
        if val_score > best_score:
            best_score = val_score
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}

    path = out_dir / "segmenter.pt"
    torch.save(
        {
            "format": SEG_FORMAT,
            "config": config.to_dict(),
            "model_state": best_state,
            "best_epoch": best_epoch,
            "best_val_global_dice": best_score,
        },
        path,
    )
    return path


def load_segmenter(path: Path | str) -> tuple[SegNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != SEG_FORMAT:
        raise ConfigError(f"unrecognized segmenter format {payload.get('format')!r}")
    config = SegConfig.from_dict(payload["config"])
    net = SegNet(config)
    net.load_state_dict(payload["model_state"])
    net.eval()
    return net, payload


def predict(net: SegNet, images: torch.Tensor, batch_size: int = 16) -> np.ndarray:
    """Class-id maps (B, H, W) for a batch of [-1, 1] images."""
    lookup = _index_to_id(net.config.classes)
    net.eval()
    outs = []
    with torch.no_grad():
        for lo in range(0, len(images), batch_size):
            logits = net(images[lo : lo + batch_size])
            outs.append(logits.argmax(dim=1).numpy())
    return lookup[np.concatenate(outs, axis=0)]


def _score(net: SegNet, x: torch.Tensor, y: torch.Tensor, config: SegConfig) -> float:
    """Pooled Global Dice of predictions against class-index targets."""
    pred = predict(net, x)
    gt = _index_to_id(config.classes)[y.numpy()]
    totals = ConfusionTotals(config.classes)
    for p, g_ in zip(pred, gt):
        totals.update(p, g_)
    return global_dice(totals)


def evaluate_segmenter(
    checkpoint: Path | str,
    manifest: DatasetManifest,
    split: str = "test",
    baseline: dict | None = None,
    baseline_name: str = "baseline",
) -> dict:
    """Pooled Dice report of a trained harness on one real split.

    Raises SyntheticInEvaluation if any entry of the split is synthetic:
    generated images must never grade themselves. When ``baseline`` is a
    previous report, the result carries this-minus-baseline deltas under
    ``delta`` and names the comparison under ``baseline``.
    """
    leaked = synthetic_entries(manifest, split)
    if leaked:
        raise SyntheticInEvaluation(
            f"{len(leaked)} synthetic entries in split {split!r}; "
            "evaluation requires real data only"
        )
    net, _ = load_segmenter(checkpoint)
    config = net.config
    x, y = _load_split(manifest, split, config)
    pred = predict(net, x)
    gt = _index_to_id(config.classes)[y.numpy()]
    totals = ConfusionTotals(config.classes)
    for p, g_ in zip(pred, gt):
        totals.update(p, g_)
    report = dice_report(totals)
    report["split"] = split
    report["n_images"] = len(x)
    if baseline is not None:
        report["baseline"] = baseline_name
        report["delta"] = delta_report(baseline, report)
    return report


def delta_report(baseline: dict, augmented: dict) -> dict:
    """Augmented-minus-baseline differences for every Dice figure."""

    def diff(a, b):
        return None if a is None or b is None else a - b

    return {
        "global": diff(augmented["global"], baseline["global"]),
        "class_weighted": diff(augmented["class_weighted"], baseline["class_weighted"]),
        "per_class": {
            name: diff(augmented["per_class"].get(name), baseline["per_class"].get(name))
            for name in baseline["per_class"]
        },
    }
