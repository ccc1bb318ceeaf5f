"""Training, adaptation, generation, and augmentation orchestration.

Three training entry points share one loop: ``pretrain`` (all weights,
source modality), ``train_scratch`` (all weights, target modality), and
``adapt`` (adapter parameters only, conditioning masks remapped into the
base model's vocabulary). ``generate_dataset`` turns masks into synthetic
images and pairs each output with its original, pre-remap mask so every
dataset class survives into downstream evaluation.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from .data import (
    DatasetManifest,
    ImageRecord,
    from_model_range,
    load_pair,
    save_image,
    to_model_range,
    write_corpus,
)
from .edm import EDMParams, coeff_tensors, denoise, edm_loss, sample_training_sigma
from .errors import (
    ConfigError,
    InsufficientSynthetic,
    InvalidConfig,
    PlanMismatch,
    ShapeMismatch,
)
from .lora import AdapterTargeting, adapter_parameters, attach, save_adapters
from .remap import (
    LabelSpace,
    RemapPlan,
    SemanticMask,
    apply_plan,
    one_hot,
    save_mask,
)
from .reporting import RunLog
from .sampler import SamplerConfig, sigma_steps, heun_step
from .unet import ConditionalUNet, EMAState, UNetConfig, load_checkpoint, save_checkpoint

RUNCONFIG_FORMAT = "runconfig/1"
SYNTH_META_KEY = "synthetic"
LR_SCHEDULES = ("cosine", "constant")


@dataclass(frozen=True)
class RunConfig:
    """Everything one training phase needs, serializable to YAML."""

    unet: UNetConfig = field(default_factory=UNetConfig)
    edm: EDMParams = field(default_factory=EDMParams)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    steps: int = 2000
    lr_init: float = 1e-3
    lr_schedule: str = "cosine"
    batch_size: int = 4
    ema_decay: float = 0.98
    use_ema_for_sampling: bool = True
    targeting: AdapterTargeting | None = None
    seed: int = 0
    profile: str = "desk"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr_init > 0:
            raise ConfigError("lr_init must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "format": RUNCONFIG_FORMAT,
            "profile": self.profile,
            "seed": self.seed,
            "steps": self.steps,
            "lr_init": self.lr_init,
            "lr_schedule": self.lr_schedule,
            "batch_size": self.batch_size,
            "ema_decay": self.ema_decay,
            "use_ema_for_sampling": self.use_ema_for_sampling,
            "unet": self.unet.to_dict(),
            "edm": asdict(self.edm),
            "sampler": asdict(self.sampler),
            "targeting": self.targeting.to_dict() if self.targeting else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if d.pop("format", RUNCONFIG_FORMAT) != RUNCONFIG_FORMAT:
            raise ConfigError("not a runconfig document")
        targeting = d.pop("targeting", None)
        return cls(
            unet=UNetConfig.from_dict(d.pop("unet")),
            edm=EDMParams(**d.pop("edm")),
            sampler=SamplerConfig(**d.pop("sampler")),
            targeting=AdapterTargeting.from_dict(targeting) if targeting else None,
            **d,
        )

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()


def save_run_config(config: RunConfig, path: Path | str) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))


def load_run_config(path: Path | str) -> RunConfig:
    return RunConfig.from_dict(yaml.safe_load(Path(path).read_text()))


def desk_profile(phase: str = "pretrain", seed: int = 0) -> RunConfig:
    """Minutes-scale profile: 64x64, small widths, canonical skip form.

    The inverted skip coefficient grows with sigma, which makes the final
    solver step at tiny sigma return a near-zero denoised estimate; the
    desk profile therefore selects the canonical form so end-to-end runs
    produce usable images. The full-scale profile keeps the inverted form.
    """
    unet = UNetConfig(
        resolution=64,
        base_channels=16,
        channel_multipliers=(1, 2, 4),
        cond_channels=3,
        attention_heads=2,
        noise_embed_dim=64,
        blocks_per_level=1,
        ff_mult=2,
        cond_token_grid=8,
    )
    steps = {"pretrain": 2000, "scratch": 2000, "adapt": 500}.get(phase)
    if steps is None:
        raise ConfigError(f"unknown phase {phase!r}")
    targeting = None
    if phase == "adapt":
        targeting = AdapterTargeting(groups=frozenset({"cross_attention", "linear"}))
    return RunConfig(
        unet=unet,
        edm=EDMParams(cskip_form="canonical"),
        sampler=SamplerConfig(num_steps=32, seed=seed),
        steps=steps,
        lr_init=1e-3,
        lr_schedule="cosine",
        batch_size=4,
        ema_decay=0.98,
        targeting=targeting,
        seed=seed,
        profile="desk",
    )


def full_profile(phase: str = "pretrain", seed: int = 0) -> RunConfig:
    """Full-scale profile: 224x224, inside the 21.79M-parameter window."""
    unet = UNetConfig(
        resolution=224,
        base_channels=64,
        channel_multipliers=(1, 2, 4),
        cond_channels=3,
        attention_heads=4,
        noise_embed_dim=256,
        blocks_per_level=3,
        ff_mult=4,
        cond_token_grid=16,
    )
    steps = {"pretrain": 100_000, "scratch": 100_000, "adapt": 100_000}.get(phase)
    if steps is None:
        raise ConfigError(f"unknown phase {phase!r}")
    targeting = None
    if phase == "adapt":
        targeting = AdapterTargeting(groups=frozenset({"cross_attention", "linear"}))
    return RunConfig(
        unet=unet,
        edm=EDMParams(cskip_form="inverted"),
        sampler=SamplerConfig(num_steps=32, seed=seed),
        steps=steps,
        lr_init=1e-3,
        lr_schedule="cosine",
        batch_size=4,
        ema_decay=0.999,
        targeting=targeting,
        seed=seed,
        profile="full",
    )


def lr_at(step: int, config: RunConfig) -> float:
    """Learning rate applied at a given 0-indexed step."""
    if config.lr_schedule == "constant":
        return config.lr_init
    return config.lr_init * 0.5 * (1.0 + math.cos(math.pi * step / config.steps))


# --- batch assembly ---------------------------------------------------------------


class _TrainingSet:
    """Eagerly loaded (image, conditioning) tensors for one manifest split.

    Eager loading keeps batch order trivially deterministic; desk-scale
    corpora are a few megabytes. Conditioning is the one-hot mask in the
    MODEL's vocabulary; ``plan`` remaps dataset masks into it first.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        model_space: LabelSpace,
        plan: RemapPlan | None = None,
        split: str = "train",
    ):
        entries = manifest.require_split(split)
        data_space = manifest.label_space
        if plan is not None:
            if plan.source != data_space:
                raise PlanMismatch("plan source vocabulary does not match the dataset")
            if plan.target != model_space:
                raise PlanMismatch("plan target vocabulary does not match the model")
        elif data_space != model_space:
            raise PlanMismatch(
                f"dataset vocabulary {data_space.name!r} differs from the model's "
                f"{model_space.name!r} and no remap plan was given"
            )
        images, conds = [], []
        for record in entries:
            image, mask = load_pair(manifest, record, data_space)
            if plan is not None:
                mask = apply_plan(mask, plan)
            images.append(to_model_range(image))
            conds.append(one_hot(mask).channels)
        self.images = torch.tensor(np.stack(images), dtype=torch.float32).unsqueeze(1)
        self.cond = torch.tensor(np.stack(conds), dtype=torch.float32)
        self.entries = entries

    def __len__(self) -> int:
        return len(self.entries)

    def batches(self, batch_size: int, steps: int, g: torch.Generator):
        """Yield (images, cond) minibatches; order is seed-deterministic."""
        order = torch.randperm(len(self), generator=g)
        cursor = 0
        for _ in range(steps):
            if cursor + batch_size > len(order):
                order = torch.randperm(len(self), generator=g)
                cursor = 0
            idx = order[cursor : cursor + batch_size]
            cursor += batch_size
            yield self.images[idx], self.cond[idx]


def _checkpoint_cadence(steps: int) -> int:
    return max(1, round(steps * 0.05))


def _train_loop(
    net: ConditionalUNet,
    config: RunConfig,
    dataset: _TrainingSet,
    out_dir: Path,
    phase: str,
    trainable,
    ema: EMAState | None,
    start_step: int = 0,
    optimizer_state: dict | None = None,
    extra: dict | None = None,
) -> Path:
    """The shared optimization loop; returns the final checkpoint path."""
    out_dir.mkdir(parents=True, exist_ok=True)
    g = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.Adam(trainable, lr=config.lr_init)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    log = RunLog(out_dir / f"{phase}_log.jsonl", phase=phase, config_hash=config.config_hash())
    cadence = _checkpoint_cadence(config.steps)

    net.train()
    batches = dataset.batches(config.batch_size, config.steps - start_step, g)
    for step, (x0, cond) in enumerate(batches, start=start_step):
        lr = lr_at(step, config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        sigma = sample_training_sigma(g, config.edm, n=x0.shape[0]).to(torch.float32)
        noise = torch.randn(x0.shape, generator=g, dtype=torch.float32)
        x_tilde = x0 + sigma.view(-1, 1, 1, 1) * noise
        c_in, c_skip, c_noise, c_out = coeff_tensors(sigma, config.edm)
        expand = (-1, 1, 1, 1)
        raw = net(c_in.view(expand) * x_tilde, c_noise, cond)
        target = (x0 - c_skip.view(expand) * x_tilde) / c_out.view(expand)
        loss = edm_loss(raw, target)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if ema is not None:
            ema.update(net)
        log.append(step=step, loss=float(loss.item()), lr=lr)
        done = step + 1
        if done % cadence == 0 or done == config.steps:
            if ema is not None:
                save_checkpoint(
                    out_dir / f"step_{done:06d}.pt",
                    net,
                    ema,
                    step=done,
                    optimizer_state=optimizer.state_dict(),
                    extra=extra,
                )
    final = out_dir / "checkpoint.pt"
    if ema is not None:
        save_checkpoint(
            final,
            net,
            ema,
            step=config.steps,
            optimizer_state=optimizer.state_dict(),
            extra=extra,
        )
    return final


def _full_training(
    config: RunConfig,
    manifest: DatasetManifest,
    out_dir: Path | str,
    phase: str,
    resume_from: Path | str | None = None,
) -> Path:
    if config.targeting is not None:
        raise ConfigError(f"{phase} trains all weights; clear the targeting")
    space = manifest.label_space
    if len(space.classes) != config.unet.cond_channels:
        raise ConfigError(
            f"model expects {config.unet.cond_channels} conditioning channels, "
            f"dataset vocabulary has {len(space.classes)} classes"
        )
    start_step = 0
    optimizer_state = None
    if resume_from is not None:
        net, ema, start_step, payload = load_checkpoint(resume_from)
        if net.config != config.unet:
            raise ConfigError("checkpoint architecture differs from the run config")
        optimizer_state = payload.get("optimizer_state")
    else:
        torch.manual_seed(config.seed)
        net = ConditionalUNet(config.unet)
        ema = EMAState(net, decay=config.ema_decay)
    dataset = _TrainingSet(manifest, space)
    return _train_loop(
        net,
        config,
        dataset,
        Path(out_dir),
        phase,
        trainable=list(net.parameters()),
        ema=ema,
        start_step=start_step,
        optimizer_state=optimizer_state,
        extra={
            "label_space": space.to_dict(),
            "phase": phase,
            "edm": asdict(config.edm),
        },
    )


def pretrain(
    config: RunConfig,
    manifest: DatasetManifest,
    out_dir: Path | str,
    resume_from: Path | str | None = None,
) -> Path:
    """Train every weight on the source-modality corpus; EMA maintained."""
    return _full_training(config, manifest, out_dir, "pretrain", resume_from)


def train_scratch(
    config: RunConfig,
    manifest: DatasetManifest,
    out_dir: Path | str,
    resume_from: Path | str | None = None,
) -> Path:
    """The all-weights baseline: the pretraining loop on the target corpus."""
    return _full_training(config, manifest, out_dir, "scratch", resume_from)


def adapt(
    config: RunConfig,
    base_checkpoint: Path | str,
    manifest: DatasetManifest,
    plan: RemapPlan,
    out_dir: Path | str,
) -> Path:
    """Attach adapters to the frozen base and train them on remapped pairs.

    Every conditioning mask passes through the remap plan before one-hot
    encoding, so the new vocabulary is expressed in the base model's
    channels. Only adapter factors receive gradients; the base checkpoint's
    bytes are never rewritten. Returns the adapter file path.
    """
    if config.targeting is None:
        raise ConfigError("adapt requires a targeting in the run config")
    net, ema, _, payload = load_checkpoint(base_checkpoint)
    if net.config != config.unet:
        raise ConfigError("checkpoint architecture differs from the run config")
    if config.use_ema_for_sampling:
        ema.copy_to(net)  # adapt on the same weights generation will use
    stored_space = payload.get("extra", {}).get("label_space")
    if stored_space is not None and LabelSpace.from_dict(stored_space) != plan.target:
        raise PlanMismatch("plan target vocabulary does not match the base checkpoint")
    torch.manual_seed(config.seed)
    attach(net, config.targeting, torch.Generator().manual_seed(config.seed))
    dataset = _TrainingSet(manifest, plan.target, plan=plan)
    out_dir = Path(out_dir)
    _train_loop(
        net,
        config,
        dataset,
        out_dir,
        "adapt",
        trainable=list(adapter_parameters(net)),
        ema=None,  # the artifact is the adapter file, saved live below
        extra=None,
    )
    adapter_path = out_dir / "adapters.pt"
    save_adapters(adapter_path, net)
    return adapter_path


# --- generation -------------------------------------------------------------------

GENERATION_BATCH = 16


def generate_dataset(
    checkpoint: Path | str,
    masks: list[SemanticMask],
    sampler: SamplerConfig,
    out_dir: Path | str,
    plan: RemapPlan | None = None,
    adapter: Path | str | None = None,
    records: list[ImageRecord] | None = None,
    edm: EDMParams | None = None,
    use_ema: bool = True,
) -> DatasetManifest:
    """One synthetic image per mask, paired with the ORIGINAL mask on disk.

    Conditioning may pass through a remap plan (required when the mask
    vocabulary differs from the model's), but the manifest keeps each
    pre-remap mask so downstream segmentation sees every dataset class.
    Per-item noise is seeded by (sampler.seed, index): deterministic and
    independent of batching.
    """
    from .lora import load_adapters

    net, ema, _, payload = load_checkpoint(checkpoint)
    if use_ema:
        ema.copy_to(net)
    if adapter is not None:
        load_adapters(adapter, net)
    net.eval()
    if edm is not None:
        params = edm
    else:
        stored = payload.get("extra", {}).get("edm")
        params = EDMParams(**stored) if stored else EDMParams()

    model_space_dict = payload.get("extra", {}).get("label_space")
    model_space = LabelSpace.from_dict(model_space_dict) if model_space_dict else None
    if not masks:
        raise PlanMismatch("no masks to condition on")
    mask_space = masks[0].space
    if any(m.space != mask_space for m in masks):
        raise PlanMismatch("masks use mixed vocabularies")
    if plan is not None:
        if plan.source != mask_space:
            raise PlanMismatch("plan source vocabulary does not match the masks")
        if model_space is not None and plan.target != model_space:
            raise PlanMismatch("plan target vocabulary does not match the model")
        cond_space = plan.target
    else:
        if model_space is not None and mask_space != model_space:
            raise PlanMismatch(
                "mask vocabulary differs from the model's; a remap plan is required"
            )
        cond_space = mask_space
    if len(cond_space.classes) != net.config.cond_channels:
        raise ShapeMismatch("conditioning channel count does not match the model")

    conds = []
    for mask in masks:
        mapped = apply_plan(mask, plan) if plan is not None else mask
        conds.append(one_hot(mapped).channels)
    cond_tensor = torch.tensor(np.stack(conds), dtype=torch.float32)

    def denoiser(x, sigma, cond):
        return denoise(net, x, sigma, cond, params)

    res = net.config.resolution
    images = []
    grid = sigma_steps(sampler)
    with torch.no_grad():
        for lo in range(0, len(masks), GENERATION_BATCH):
            hi = min(lo + GENERATION_BATCH, len(masks))
            init = torch.empty(hi - lo, 1, res, res)
            for i in range(lo, hi):
                g = torch.Generator().manual_seed(int(sampler.seed) * 1_000_003 + i)
                init[i - lo] = sampler.sigma_max * torch.randn(1, res, res, generator=g)
            x = init
            for cur, nxt in zip(grid, grid[1:]):
                x = heun_step(x, cur, nxt, lambda t, s: denoiser(t, s, cond_tensor[lo:hi]))
            images.append(x)
    stacked = torch.cat(images, dim=0).squeeze(1).numpy()

    items = []
    for i, mask in enumerate(masks):
        meta = records[i] if records else None
        record = ImageRecord(
            image=f"images/synth_{i:05d}.png",
            mask=f"masks/synth_{i:05d}.png",
            view=meta.view if meta else "two_chamber",
            phase=meta.phase if meta else "ED",
            split="train",
        )
        items.append((from_model_range(stacked[i]), mask.labels, record))
    return write_corpus(
        out_dir,
        items,
        mask_space,
        meta={
            SYNTH_META_KEY: True,
            "sampler_seed": sampler.seed,
            "num_steps": sampler.num_steps,
            "n": len(masks),
        },
    )


def generate_from_manifest(
    checkpoint: Path | str,
    manifest: DatasetManifest,
    sampler: SamplerConfig,
    out_dir: Path | str,
    split: str = "train",
    plan: RemapPlan | None = None,
    adapter: Path | str | None = None,
    edm: EDMParams | None = None,
) -> DatasetManifest:
    """Condition on every mask of one split of an existing corpus."""
    space = manifest.label_space
    records = manifest.require_split(split)
    masks = [load_pair(manifest, r, space)[1] for r in records]
    return generate_dataset(
        checkpoint,
        masks,
        sampler,
        out_dir,
        plan=plan,
        adapter=adapter,
        records=records,
        edm=edm,
    )


# --- augmentation mixing ------------------------------------------------------------


def augment_mix(
    real: DatasetManifest,
    synth: DatasetManifest,
    ratio: float,
    out_dir: Path | str,
) -> DatasetManifest:
    """Real training data plus round(ratio * |train|) synthetic entries.

    Validation and test splits pass through untouched — synthetic images
    never reach held-out splits. Entry paths are rewritten relative to the
    output manifest so both corpora stay where they are.
    """
    if not ratio > 0:
        raise ConfigError("ratio must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    real_space = real.label_space
    if real_space != synth.label_space:
        raise PlanMismatch("real and synthetic corpora use different vocabularies")

    n_extra = round(ratio * len(real.require_split("train")))
    synth_train = synth.split("train")
    if len(synth_train) < n_extra:
        raise InsufficientSynthetic(
            f"need {n_extra} synthetic entries, corpus has {len(synth_train)}"
        )

    def rebased(manifest: DatasetManifest, record: ImageRecord) -> ImageRecord:
        return ImageRecord(
            image=os.path.relpath(manifest.root / record.image, out_dir),
            mask=os.path.relpath(manifest.root / record.mask, out_dir),
            view=record.view,
            phase=record.phase,
            split=record.split,
        )

    entries = [rebased(real, e) for e in real.entries]
    entries += [rebased(synth, e) for e in synth_train[:n_extra]]

    from .remap import save_label_space

    save_label_space(real_space, out_dir / "labels.yaml")
    mixed = DatasetManifest(
        root=out_dir,
        entries=entries,
        meta={
            "labels": "labels.yaml",
            "mix_ratio": ratio,
            "real_root": os.path.relpath(real.root, out_dir),
            "synthetic_root": os.path.relpath(synth.root, out_dir),
        },
    )
    mixed.save(out_dir / "manifest.jsonl")
    return mixed
