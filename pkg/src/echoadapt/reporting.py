"""Run logging and static report rendering.

Run logs are append-only JSONL: a header line carrying the run identity and
config hash, then one record per training step. Figures (sample grids, loss
curves) are static files rendered with PIL and matplotlib's Agg backend.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, EmptyInput, ShapeMismatch

RUNLOG_FORMAT = "runlog/1"

# fixed palette for mask overlays: background transparent, then one color per class id
_PALETTE = [
    (230, 80, 80),
    (80, 170, 240),
    (90, 200, 120),
    (240, 200, 70),
    (200, 110, 220),
    (250, 140, 60),
]


class RunLog:
    """Append-only scalar series for one training phase."""

    def __init__(self, path: Path | str, phase: str, config_hash: str, timestamps: bool = True):
        self.path = Path(path)
        self.phase = phase
        self.config_hash = config_hash
        self.timestamps = timestamps
        if self.path.exists():
            header, _ = load_run_log(self.path)
            if header["config_hash"] != config_hash:
                raise ConfigError(
                    f"existing log {self.path} belongs to a different config"
                )
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            header = {
                "format": RUNLOG_FORMAT,
                "phase": phase,
                "run_id": f"{phase}-{config_hash[:12]}",
                "config_hash": config_hash,
            }
            self.path.write_text(json.dumps(header, sort_keys=True) + "\n")

    def append(self, **fields) -> None:
        record = dict(fields)
        if self.timestamps:
            record["time"] = time.time()
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def record_artifact(self, kind: str, path: str) -> None:
        self.append(artifact=kind, path=str(path))


def load_run_log(path: Path | str) -> tuple[dict, list[dict]]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ConfigError(f"empty run log {path}")
    header = json.loads(lines[0])
    if header.get("format") != RUNLOG_FORMAT:
        raise ConfigError(f"{path} is not a {RUNLOG_FORMAT} file")
    return header, [json.loads(ln) for ln in lines[1:]]


def verify_log_config(path: Path | str, config_hash: str) -> bool:
    header, _ = load_run_log(path)
    return header["config_hash"] == config_hash


def loss_series(path: Path | str) -> tuple[np.ndarray, np.ndarray]:
    """(steps, losses) from a run log, skipping artifact records."""
    _, entries = load_run_log(path)
    rows = [(e["step"], e["loss"]) for e in entries if "loss" in e]
    if not rows:
        raise EmptyInput(f"no loss records in {path}")
    steps, losses = zip(*rows)
    return np.asarray(steps), np.asarray(losses, dtype=np.float64)


def smoothed(values: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average; early entries average what exists so far."""
    values = np.asarray(values, dtype=np.float64)
    if window < 1:
        raise ConfigError("window must be >= 1")
    cumsum = np.cumsum(values)
    out = np.empty_like(values)
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        total = cumsum[i] - (cumsum[lo - 1] if lo else 0.0)
        out[i] = total / (i - lo + 1)
    return out


# --- figures ------------------------------------------------------------------------


def _to_tile(image: np.ndarray, mask: np.ndarray | None, opacity: float) -> np.ndarray:
    """Grayscale [0,1] image (+ optional label overlay) -> (H, W, 3) uint8."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeMismatch(f"tiles must be 2-d, got {image.shape}")
    rgb = np.repeat(np.clip(image, 0, 1)[..., None] * 255.0, 3, axis=2)
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != image.shape:
            raise ShapeMismatch("mask does not match its image")
        for idx, cid in enumerate(np.unique(mask)):
            if cid == 0:
                continue
            color = np.array(_PALETTE[idx % len(_PALETTE)], dtype=np.float64)
            sel = mask == cid
            rgb[sel] = (1 - opacity) * rgb[sel] + opacity * color
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def render_sample_grid(
    images,
    masks=None,
    out_path: Path | str = "grid.png",
    opacity: float = 0.35,
    padding: int = 4,
) -> Path:
    """Composite rows-of-tiles figure: rows = sources, columns = cases.

    ``images`` is a list of rows (or one flat row) of [0,1] grayscale
    arrays; ``masks`` mirrors that structure for overlays, or is None.
    Output dimensions follow plain tile arithmetic:
    width = cols*tile_w + (cols+1)*padding, and likewise for height.
    """
    if not images:
        raise EmptyInput("no images to render")
    rows = images if isinstance(images[0], (list, tuple)) else [images]
    if masks is None:
        mask_rows = [[None] * len(r) for r in rows]
    else:
        mask_rows = masks if isinstance(masks[0], (list, tuple)) else [masks]
    if [len(r) for r in rows] != [len(m) for m in mask_rows]:
        raise ShapeMismatch("mask grid shape differs from image grid shape")

    tiles = [
        [_to_tile(img, msk, opacity) for img, msk in zip(r, mr)]
        for r, mr in zip(rows, mask_rows)
    ]
    th, tw = tiles[0][0].shape[:2]
    if any(t.shape[:2] != (th, tw) for row in tiles for t in row):
        raise ShapeMismatch("all tiles must share one size")
    n_rows = len(tiles)
    n_cols = max(len(r) for r in tiles)
    height = n_rows * th + (n_rows + 1) * padding
    width = n_cols * tw + (n_cols + 1) * padding
    canvas = np.zeros((height, width, 3), dtype=np.uint8)
    for i, row in enumerate(tiles):
        for j, tile in enumerate(row):
            y = padding + i * (th + padding)
            x = padding + j * (tw + padding)
            canvas[y : y + th, x : x + tw] = tile
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas, mode="RGB").save(out_path)
    return out_path


def render_loss_curve(log_path: Path | str, out_path: Path | str, window: int = 50) -> Path:
    """Loss-vs-step figure with a smoothed trace."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps, losses = loss_series(log_path)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, alpha=0.3, label="loss")
    ax.plot(steps, smoothed(losses, window), label=f"smoothed ({window})")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


# --- metric tables ------------------------------------------------------------------


def format_comparison(baseline: dict, augmented: dict, class_order: list[str]) -> str:
    """Text table of augmented-vs-baseline Dice with augmented-minus-baseline deltas."""

    def fmt(v):
        return "  n/a" if v is None else f"{v:0.3f}"

    def delta(a, b):
        if a is None or b is None:
            return "   --"
        return f"{a - b:+0.3f}"

    lines = [
        f"{'metric':<18}{'baseline':>10}{'augmented':>11}{'delta':>8}",
        "-" * 47,
    ]
    for key, label in (("global", "Global Dice"), ("class_weighted", "CW Dice")):
        lines.append(
            f"{label:<18}{fmt(baseline[key]):>10}{fmt(augmented[key]):>11}"
            f"{delta(augmented[key], baseline[key]):>8}"
        )
    for name in class_order:
        b = baseline["per_class"].get(name)
        a = augmented["per_class"].get(name)
        lines.append(f"{'Dice ' + name:<18}{fmt(b):>10}{fmt(a):>11}{delta(a, b):>8}")
    return "\n".join(lines)


def write_metrics_report(path: Path | str, report: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path
