"""Deterministic ultrasound-like phantom corpus in two modalities.

Each phantom is a fan-shaped sector with elliptical chambers: dark lumens,
bright borders, multiplicative speckle, zero signal outside the sector. The
source modality labels {LA, LV, LV_epi} (an epicardial ring around LV); the
target modality labels {LA, LV, RV, RA} and differs in sector angle, base
brightness, speckle grain, and contrast curve, so there is a real,
measurable gap for adaptation to close.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import DatasetManifest, ImageRecord, write_corpus
from .errors import GeometryError, InvalidConfig
from .remap import LabelSpace, SemanticMask

SOURCE_SPACE = LabelSpace(
    name="tte_phantom", classes=((1, "LA"), (2, "LV"), (3, "LV_epi")), background_id=0
)
TARGET_SPACE = LabelSpace(
    name="tee_phantom", classes=((1, "LA"), (2, "LV"), (3, "RV"), (4, "RA")), background_id=0
)

MODALITIES = ("source", "target")
_VENTRICLES = ("LV", "RV")


@dataclass(frozen=True)
class Chamber:
    """One elliptical chamber, in resolution-relative units."""

    name: str
    cx: float
    cy: float
    ax: float
    ay: float
    tilt: float = 0.0
    lumen: float = 0.10

    def metric(self, x: np.ndarray, y: np.ndarray, scale: float = 1.0) -> np.ndarray:
        """Quadratic form; <= 1 inside the (optionally scaled) ellipse."""
        dx = x - self.cx
        dy = y - self.cy
        c, s = math.cos(self.tilt), math.sin(self.tilt)
        u = (dx * c + dy * s) / (self.ax * scale)
        v = (-dx * s + dy * c) / (self.ay * scale)
        return u * u + v * v

    def boundary_points(self, n: int = 256, scale: float = 1.0):
        t = np.linspace(0.0, 2 * math.pi, n, endpoint=False)
        c, s = math.cos(self.tilt), math.sin(self.tilt)
        bx = self.ax * scale * np.cos(t)
        by = self.ay * scale * np.sin(t)
        return self.cx + bx * c - by * s, self.cy + bx * s + by * c

    def area_px(self, resolution: int, scale: float = 1.0) -> float:
        return math.pi * (self.ax * scale) * (self.ay * scale) * resolution**2

    def perimeter_px(self, resolution: int, scale: float = 1.0) -> float:
        # Ramanujan's approximation
        a, b = self.ax * scale * resolution, self.ay * scale * resolution
        return math.pi * (3 * (a + b) - math.sqrt((3 * a + b) * (a + 3 * b)))


@dataclass(frozen=True)
class PhantomSpec:
    resolution: int
    modality: str
    view: str
    chambers: tuple[Chamber, ...]
    seed: int
    epi_scale: float = 0.0  # outer/inner axis ratio of the LV ring; 0 = no ring
    sector_half_angle: float = math.radians(38.0)
    sector_radius: float = 0.88
    apex: tuple[float, float] = (0.5, 0.06)
    base_intensity: float = 0.55
    border_gain: float = 0.35
    speckle_shape: float = 24.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise InvalidConfig(f"modality must be one of {MODALITIES}")
        if self.resolution < 16:
            raise InvalidConfig("resolution too small to render chambers")

    @property
    def space(self) -> LabelSpace:
        return SOURCE_SPACE if self.modality == "source" else TARGET_SPACE


# --- geometry profiles -----------------------------------------------------------

_LAYOUTS = {
    "two_chamber": (
        Chamber("LV", 0.455, 0.435, 0.100, 0.145, tilt=0.22, lumen=0.10),
        Chamber("LA", 0.575, 0.755, 0.088, 0.085, lumen=0.14),
    ),
    "four_chamber": (
        Chamber("LV", 0.385, 0.435, 0.088, 0.135, tilt=0.12, lumen=0.10),
        Chamber("LA", 0.420, 0.715, 0.076, 0.084, lumen=0.14),
        Chamber("RV", 0.620, 0.420, 0.082, 0.120, tilt=-0.10, lumen=0.08),
        Chamber("RA", 0.635, 0.695, 0.074, 0.078, lumen=0.12),
    ),
}

_MODALITY_STYLE = {
    "source": dict(
        sector_half_angle=math.radians(38.0),
        base_intensity=0.55,
        border_gain=0.35,
        speckle_shape=24.0,
        gamma=1.0,
    ),
    "target": dict(
        sector_half_angle=math.radians(52.0),
        base_intensity=0.26,
        border_gain=0.24,
        speckle_shape=5.0,
        gamma=1.8,
    ),
}

_EPI_SCALE = 1.26  # source-only epicardial ring around LV


def base_spec(modality: str, view: str, resolution: int, seed: int) -> PhantomSpec:
    if view not in _LAYOUTS:
        raise InvalidConfig(f"unknown view {view!r}")
    return PhantomSpec(
        resolution=resolution,
        modality=modality,
        view=view,
        chambers=_LAYOUTS[view],
        seed=seed,
        epi_scale=_EPI_SCALE if modality == "source" else 0.0,
        **_MODALITY_STYLE[modality],
    )


def randomize_spec(spec: PhantomSpec, rng: np.random.Generator, phase: str) -> PhantomSpec:
    """Jitter chamber geometry; systole shrinks the ventricles."""
    chambers = []
    for ch in spec.chambers:
        squeeze = 0.90 if (phase == "ES" and ch.name in _VENTRICLES) else 1.0
        chambers.append(
            replace(
                ch,
                cx=ch.cx + rng.uniform(-0.015, 0.015),
                cy=ch.cy + rng.uniform(-0.015, 0.015),
                ax=ch.ax * squeeze * rng.uniform(0.94, 1.06),
                ay=ch.ay * squeeze * rng.uniform(0.94, 1.06),
                tilt=ch.tilt + rng.uniform(-0.08, 0.08),
                lumen=min(0.2, max(0.04, ch.lumen + rng.uniform(-0.02, 0.02))),
            )
        )
    return replace(spec, chambers=tuple(chambers))


# --- validation --------------------------------------------------------------------


def _inside_sector(spec: PhantomSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    ax_, ay_ = spec.apex
    dx = x - ax_
    dy = y - ay_
    r = np.hypot(dx, dy)
    angle = np.abs(np.arctan2(dx, dy))  # measured from straight down
    return (r <= spec.sector_radius) & (dy > 0) & (angle <= spec.sector_half_angle)


def validate_spec(spec: PhantomSpec) -> None:
    """Chambers (including the epicardial ring) must fit inside the sector."""
    outlines = []
    for ch in spec.chambers:
        scale = spec.epi_scale if (ch.name == "LV" and spec.epi_scale) else 1.0
        outlines.append((ch, scale))
    for ch, scale in outlines:
        bx, by = ch.boundary_points(scale=scale)
        if not _inside_sector(spec, bx, by).all():
            raise GeometryError(f"chamber {ch.name} (scale {scale}) leaves the sector")
    # pairwise disjointness: no chamber's boundary may enter another chamber
    for ch, scale in outlines:
        bx, by = ch.boundary_points(scale=scale)
        for other, other_scale in outlines:
            if other is ch:
                continue
            if (other.metric(bx, by, scale=other_scale) < 1.0).any():
                raise GeometryError(f"chambers {ch.name} and {other.name} overlap")


# --- rendering ---------------------------------------------------------------------


def make_phantom(spec: PhantomSpec) -> tuple[np.ndarray, SemanticMask]:
    """Render one (image in [0,1], SemanticMask) pair, deterministic per seed."""
    validate_spec(spec)
    res = spec.resolution
    rng = np.random.default_rng(spec.seed)
    coords = (np.arange(res) + 0.5) / res
    x, y = np.meshgrid(coords, coords, indexing="xy")
    sector = _inside_sector(spec, x, y)

    ax_, ay_ = spec.apex
    r_norm = np.hypot(x - ax_, y - ay_) / spec.sector_radius
    phi = np.arctan2(x - ax_, y - ay_)
    image = spec.base_intensity * (1.05 - 0.30 * r_norm) + 0.03 * np.cos(6.0 * phi)

    labels = np.zeros((res, res), dtype=np.int64)
    space = spec.space
    for ch in spec.chambers:
        inner = ch.metric(x, y) <= 1.0
        if ch.name == "LV" and spec.epi_scale:
            ring = (ch.metric(x, y, scale=spec.epi_scale) <= 1.0) & ~inner
            image[ring] = np.minimum(1.0, image[ring] * 1.35)
            labels[ring] = space.id_of("LV_epi")
        else:
            border = (ch.metric(x, y, scale=1.22) <= 1.0) & ~inner
            image[border] = np.minimum(1.0, image[border] + spec.border_gain)
        image[inner] = ch.lumen
        if ch.name in {n for _, n in space.classes}:
            labels[inner] = space.id_of(ch.name)

    speckle = rng.gamma(shape=spec.speckle_shape, scale=1.0 / spec.speckle_shape, size=image.shape)
    image = np.clip(image * speckle, 0.0, 1.0) ** spec.gamma
    image[~sector] = 0.0
    labels[~sector] = space.background_id
    return image, SemanticMask(labels=labels, space=space)


# --- corpus ------------------------------------------------------------------------


def _largest_remainder(n: int, fracs: tuple[float, float, float]) -> list[int]:
    raw = [f * n for f in fracs]
    counts = [int(math.floor(v)) for v in raw]
    remainders = sorted(range(3), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in range(n - sum(counts)):
        counts[remainders[i % 3]] += 1
    return counts


def make_corpus(
    n: int,
    modality: str,
    split_fracs: tuple[float, float, float] = (0.7, 0.15, 0.15),
    seed: int = 0,
    out_dir: Path | str = "corpus",
    resolution: int = 64,
) -> DatasetManifest:
    """Render n phantoms, stratify splits by view, write manifest + sidecars.

    Views alternate with the item index and splits are dealt in index
    order, so each split's view counts differ by at most one. Per-item
    geometry seeds derive from the corpus seed alone.
    """
    if abs(sum(split_fracs) - 1.0) > 1e-9:
        raise InvalidConfig("split fractions must sum to 1")
    if n < 1:
        raise InvalidConfig("need at least one item")
    counts = _largest_remainder(n, tuple(split_fracs))
    slots = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]

    space = SOURCE_SPACE if modality == "source" else TARGET_SPACE
    items = []
    for i in range(n):
        view = "two_chamber" if i % 2 == 0 else "four_chamber"
        item_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        phase = "ED" if item_rng.random() < 0.5 else "ES"
        spec = None
        for _attempt in range(50):
            render_seed = int(item_rng.integers(2**31))
            candidate = randomize_spec(
                base_spec(modality, view, resolution, seed=render_seed), item_rng, phase
            )
            try:
                validate_spec(candidate)
            except GeometryError:
                continue
            spec = candidate
            break
        if spec is None:
            raise GeometryError(f"could not place chambers for item {i}")
        image, mask = make_phantom(spec)
        record = ImageRecord(
            image=f"images/item_{i:05d}.png",
            mask=f"masks/item_{i:05d}.png",
            view=view,
            phase=phase,
            split=slots[i],
        )
        items.append((image, mask.labels, record))

    meta = {
        "modality": modality,
        "seed": seed,
        "resolution": resolution,
        "n": n,
        "split_fracs": list(split_fracs),
        "label_space": space.name,
    }
    return write_corpus(out_dir, items, space, meta)
