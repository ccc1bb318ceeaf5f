"""Label-vocabulary remapping for mask-conditioned generation.

A pretrained model expects conditioning masks drawn from its own class
vocabulary. When a new dataset uses a different vocabulary, its label maps
are translated with three operations: *identity* keeps classes whose name
exists in both vocabularies, *reduce* merges several classes into one
existing class, and *repurpose* assigns (merged) classes to a target class
the new dataset does not use. The conditioning architecture stays unchanged.

All operations are pure functions over immutable inputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .errors import (
    InvalidIdentity,
    PlanError,
    SpaceMismatch,
    TargetCollision,
    UncoveredSourceClass,
)

OP_IDENTITY = "identity"
OP_REDUCE = "reduce"
OP_REPURPOSE = "repurpose"

LABELSPACE_FORMAT = "labelspace/1"
PLAN_FORMAT = "remap-plan/1"


@dataclass(frozen=True)
class LabelSpace:
    """An ordered class vocabulary. Order defines the one-hot channel index."""

    name: str
    classes: tuple[tuple[int, str], ...]
    background_id: int = 0

    def __post_init__(self):
        ids = [cid for cid, _ in self.classes]
        if len(set(ids)) != len(ids):
            raise PlanError(f"duplicate class ids in label space {self.name!r}")
        if self.background_id in ids:
            raise PlanError(f"background id {self.background_id} collides with a class id")

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(cid for cid, _ in self.classes)

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(name for _, name in self.classes)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def id_of(self, name: str) -> int:
        for cid, cname in self.classes:
            if cname == name:
                return cid
        raise KeyError(f"no class named {name!r} in label space {self.name!r}")

    def name_of(self, cid: int) -> str:
        for c, cname in self.classes:
            if c == cid:
                return cname
        raise KeyError(f"no class id {cid} in label space {self.name!r}")

    def channel_of(self, cid: int) -> int:
        """One-hot channel index of a class id."""
        return self.class_ids.index(cid)

    def to_dict(self) -> dict:
        return {
            "format": LABELSPACE_FORMAT,
            "name": self.name,
            "background_id": self.background_id,
            "classes": [[cid, cname] for cid, cname in self.classes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSpace":
        return cls(
            name=d["name"],
            classes=tuple((int(cid), str(cname)) for cid, cname in d["classes"]),
            background_id=int(d.get("background_id", 0)),
        )


@dataclass(frozen=True)
class RemapEntry:
    source_ids: frozenset[int]
    target_id: int
    op: str


@dataclass(frozen=True)
class RemapPlan:
    """A total, disjoint mapping from one vocabulary into another.

    Every source class id appears in exactly one entry and no two entries
    share a target channel. Merges are lossy by construction, so plans have
    no inverse.
    """

    source: LabelSpace
    target: LabelSpace
    entries: tuple[RemapEntry, ...]

    def __post_init__(self):
        validate_plan(self)

    def entry_for(self, source_id: int) -> RemapEntry:
        for e in self.entries:
            if source_id in e.source_ids:
                return e
        raise UncoveredSourceClass(f"source id {source_id} has no plan entry")

    @property
    def is_identity(self) -> bool:
        return all(
            e.op == OP_IDENTITY and e.source_ids == frozenset({e.target_id})
            for e in self.entries
        )

    def lookup_table(self, max_id: int | None = None) -> np.ndarray:
        """Dense id -> id table; background maps to the target background."""
        ids = [self.source.background_id, *self.source.class_ids]
        hi = max(ids) if max_id is None else max(max_id, max(ids))
        table = np.full(hi + 1, self.target.background_id, dtype=np.int64)
        for e in self.entries:
            for sid in e.source_ids:
                table[sid] = e.target_id
        return table

    def to_dict(self) -> dict:
        body = {
            "format": PLAN_FORMAT,
            "source": self.source.to_dict(),
            "target": self.target.to_dict(),
            "entries": [
                {
                    "source_ids": sorted(e.source_ids),
                    "target_id": e.target_id,
                    "op": e.op,
                }
                for e in self.entries
            ],
        }
        body["checksum"] = _plan_checksum(body)
        return body

    @classmethod
    def from_dict(cls, d: dict) -> "RemapPlan":
        body = {k: v for k, v in d.items() if k != "checksum"}
        if "checksum" in d and d["checksum"] != _plan_checksum(body):
            raise PlanError("plan checksum does not match its contents")
        return cls(
            source=LabelSpace.from_dict(d["source"]),
            target=LabelSpace.from_dict(d["target"]),
            entries=tuple(
                RemapEntry(
                    source_ids=frozenset(int(i) for i in e["source_ids"]),
                    target_id=int(e["target_id"]),
                    op=str(e["op"]),
                )
                for e in d["entries"]
            ),
        )


def _plan_checksum(body: dict) -> str:
    canon = yaml.safe_dump(body, sort_keys=True).encode()
    return hashlib.sha256(canon).hexdigest()


@dataclass(frozen=True)
class SemanticMask:
    """An integer label map tied to its vocabulary."""

    labels: np.ndarray
    space: LabelSpace

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2:
            raise SpaceMismatch(f"label map must be 2-D, got shape {arr.shape}")
        allowed = set(self.space.class_ids) | {self.space.background_id}
        present = set(np.unique(arr).tolist())
        if not present <= allowed:
            raise SpaceMismatch(
                f"mask contains ids {sorted(present - allowed)} outside space {self.space.name!r}"
            )
        object.__setattr__(self, "labels", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class OneHotMask:
    """N x H x W binary channel encoding of a label map.

    Background pixels have all-zero columns; the channel count equals the
    number of foreground classes in the space.
    """

    channels: np.ndarray
    space: LabelSpace

    def __post_init__(self):
        arr = np.asarray(self.channels)
        if arr.ndim != 3 or arr.shape[0] != self.space.num_classes:
            raise SpaceMismatch(
                f"one-hot volume has shape {arr.shape}, expected "
                f"({self.space.num_classes}, H, W) for space {self.space.name!r}"
            )
        if arr.sum(axis=0).max(initial=0) > 1:
            raise SpaceMismatch("one-hot columns must sum to at most 1")
        object.__setattr__(self, "channels", arr)


def validate_plan(plan: RemapPlan) -> None:
    """Check totality, disjointness, channel uniqueness, and per-op rules."""
    src, tgt = plan.source, plan.target
    src_ids = set(src.class_ids)
    tgt_ids = set(tgt.class_ids)
    seen: set[int] = set()
    targets: set[int] = set()
    common_names = set(src.class_names) & set(tgt.class_names)

    for e in plan.entries:
        if not e.source_ids:
            raise PlanError("entry with empty source id set")
        if not e.source_ids <= src_ids:
            raise PlanError(f"entry references ids {sorted(e.source_ids - src_ids)} not in source")
        if e.source_ids & seen:
            raise PlanError(f"ids {sorted(e.source_ids & seen)} appear in more than one entry")
        seen |= e.source_ids
        if e.target_id not in tgt_ids:
            raise PlanError(f"target id {e.target_id} not in target space")
        if e.target_id in targets:
            raise TargetCollision(f"two entries map to target id {e.target_id}")
        targets.add(e.target_id)

        tgt_name = tgt.name_of(e.target_id)
        if e.op == OP_IDENTITY:
            if len(e.source_ids) != 1:
                raise InvalidIdentity("identity entries carry exactly one source id")
            (sid,) = e.source_ids
            if src.name_of(sid) != tgt_name:
                raise InvalidIdentity(
                    f"identity entry pairs {src.name_of(sid)!r} with {tgt_name!r}"
                )
        elif e.op == OP_REDUCE:
            if len(e.source_ids) < 2:
                raise PlanError("reduce entries merge at least two source classes")
            if tgt_name not in common_names:
                raise PlanError(
                    f"reduce entry lands on {tgt_name!r}, which both vocabularies must share"
                )
        elif e.op == OP_REPURPOSE:
            if tgt_name in set(src.class_names):
                raise PlanError(
                    f"repurpose entry must land on a class absent from the source, got {tgt_name!r}"
                )
        else:
            raise PlanError(f"unknown op {e.op!r}")

    missing = src_ids - seen
    if missing:
        names = [src.name_of(i) for i in sorted(missing)]
        raise UncoveredSourceClass(f"source classes {names} have no plan entry")


def build_plan(
    source: LabelSpace,
    target: LabelSpace,
    reduce_groups: list[set[int]] | None = None,
    repurpose_assignments: list[tuple[set[int], int]] | None = None,
) -> RemapPlan:
    """Assemble a plan from explicit merge/reassignment choices.

    Classes whose name exists in both vocabularies and that are not claimed
    by a reduce group or a repurpose assignment become identity entries
    automatically. A reduce group must contain exactly one class whose name
    the target also knows; the whole group merges into it. A repurpose
    assignment sends a (merged) group of source classes to an explicit
    target id; a group of two or more expresses reduce-then-repurpose as a
    single entry.
    """
    reduce_groups = reduce_groups or []
    repurpose_assignments = repurpose_assignments or []
    src_ids = set(source.class_ids)

    for group in reduce_groups:
        if not set(group) <= src_ids:
            raise PlanError(f"reduce group {sorted(group)} references ids not in source")
    for group, tid in repurpose_assignments:
        if not set(group) <= src_ids:
            raise PlanError(f"repurpose group {sorted(group)} references ids not in source")
        if tid not in set(target.class_ids):
            raise PlanError(f"repurpose target id {tid} not in target space")

    entries: list[RemapEntry] = []
    claimed: set[int] = set()

    for group, tid in repurpose_assignments:
        entries.append(RemapEntry(frozenset(group), tid, OP_REPURPOSE))
        claimed |= set(group)

    target_names = set(target.class_names)
    for group in reduce_groups:
        if set(group) & claimed:
            continue  # group already consumed by a repurpose assignment
        anchors = [sid for sid in group if source.name_of(sid) in target_names]
        if len(anchors) != 1:
            raise PlanError(
                f"reduce group {sorted(group)} needs exactly one class named in the target, "
                f"found {len(anchors)}"
            )
        entries.append(
            RemapEntry(frozenset(group), target.id_of(source.name_of(anchors[0])), OP_REDUCE)
        )
        claimed |= set(group)

    for sid, sname in source.classes:
        if sid in claimed:
            continue
        if sname in target_names:
            entries.append(RemapEntry(frozenset({sid}), target.id_of(sname), OP_IDENTITY))
            claimed.add(sid)

    return RemapPlan(source=source, target=target, entries=tuple(entries))


def apply_plan(mask: SemanticMask, plan: RemapPlan) -> SemanticMask:
    """Replace every pixel's id with its entry's target id; background stays."""
    if mask.space != plan.source:
        raise SpaceMismatch(
            f"mask space {mask.space.name!r} does not match plan source {plan.source.name!r}"
        )
    table = plan.lookup_table(max_id=int(mask.labels.max(initial=0)))
    return SemanticMask(labels=table[mask.labels].astype(mask.labels.dtype), space=plan.target)


def one_hot(mask: SemanticMask) -> OneHotMask:
    """Channel k is 1 exactly where the pixel equals the k-th class id."""
    channels = np.stack(
        [(mask.labels == cid) for cid in mask.space.class_ids]
    ).astype(np.uint8)
    return OneHotMask(channels=channels, space=mask.space)


def class_pixel_counts(mask: SemanticMask) -> dict[int, int]:
    """Pixel count per present foreground class."""
    ids, counts = np.unique(mask.labels, return_counts=True)
    return {
        int(i): int(c)
        for i, c in zip(ids, counts)
        if int(i) != mask.space.background_id
    }


# --- file formats -----------------------------------------------------------
#
# Plans and label spaces are human-reviewed, so both travel as YAML; the plan
# document carries a checksum over its canonical serialization. Label maps
# are single-channel 8-bit PNGs with the vocabulary in a sidecar file.


def save_plan(plan: RemapPlan, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(plan.to_dict(), sort_keys=False))


def load_plan(path: str | Path) -> RemapPlan:
    return RemapPlan.from_dict(yaml.safe_load(Path(path).read_text()))


def save_label_space(space: LabelSpace, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(space.to_dict(), sort_keys=False))


def load_label_space(path: str | Path) -> LabelSpace:
    return LabelSpace.from_dict(yaml.safe_load(Path(path).read_text()))


def save_mask(mask: SemanticMask, path: str | Path) -> None:
    if mask.labels.max(initial=0) > 255 or mask.labels.min(initial=0) < 0:
        raise SpaceMismatch("mask ids must fit 8-bit PNG")
    Image.fromarray(mask.labels.astype(np.uint8), mode="L").save(path)


def load_mask(path: str | Path, space: LabelSpace) -> SemanticMask:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.int64)
    return SemanticMask(labels=arr, space=space)


def remap_directory(
    plan: RemapPlan, in_dir: str | Path, out_dir: str | Path
) -> list[Path]:
    """Remap every mask PNG in a directory; writes the target vocabulary sidecar."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for src_path in sorted(in_dir.glob("*.png")):
        mask = load_mask(src_path, plan.source)
        out_path = out_dir / src_path.name
        save_mask(apply_plan(mask, plan), out_path)
        written.append(out_path)
    save_label_space(plan.target, out_dir / "labels.yaml")
    return written
