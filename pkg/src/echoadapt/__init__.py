"""echoadapt: mask-conditioned diffusion synthesis with low-rank cross-modality adaptation.

Trains an elucidated-diffusion backbone on a data-rich ultrasound modality,
adapts it to a data-scarce one with targeted low-rank adapters plus label
remapping, and measures the value of the synthetic images through a
multiclass-segmentation harness.
"""

__version__ = "0.1.0"

from .remap import LabelSpace, RemapPlan, SemanticMask, OneHotMask, build_plan, apply_plan, one_hot
from .edm import EDMParams, PreconditionCoeffs, precondition_coeffs, forward_perturb, edm_loss
from .sampler import SamplerConfig, sigma_steps, heun_step, sample
from .unet import UNetConfig, LayerGroupTag, ConditionalUNet, EMAState
from .lora import AdapterTargeting, LoraAdapter, attach, trainable_param_count
from .metrics import global_dice, class_weighted_dice, per_class_dice, ssim, frechet_distance
from .data import DatasetManifest, ImageRecord, write_corpus
from .phantom import SOURCE_SPACE, TARGET_SPACE, PhantomSpec, make_phantom, make_corpus
from .pipelines import (
    RunConfig,
    desk_profile,
    full_profile,
    pretrain,
    train_scratch,
    adapt,
    generate_dataset,
    generate_from_manifest,
    augment_mix,
)
from .seg import SegConfig, train_segmenter, evaluate_segmenter, delta_report
from .reporting import RunLog, render_sample_grid, render_loss_curve

__all__ = [
    "LabelSpace", "RemapPlan", "SemanticMask", "OneHotMask",
    "build_plan", "apply_plan", "one_hot",
    "EDMParams", "PreconditionCoeffs", "precondition_coeffs", "forward_perturb", "edm_loss",
    "SamplerConfig", "sigma_steps", "heun_step", "sample",
    "UNetConfig", "LayerGroupTag", "ConditionalUNet", "EMAState",
    "AdapterTargeting", "LoraAdapter", "attach", "trainable_param_count",
    "global_dice", "class_weighted_dice", "per_class_dice", "ssim", "frechet_distance",
    "DatasetManifest", "ImageRecord", "write_corpus",
    "SOURCE_SPACE", "TARGET_SPACE", "PhantomSpec", "make_phantom", "make_corpus",
    "RunConfig", "desk_profile", "full_profile",
    "pretrain", "train_scratch", "adapt",
    "generate_dataset", "generate_from_manifest", "augment_mix",
    "SegConfig", "train_segmenter", "evaluate_segmenter", "delta_report",
    "RunLog", "render_sample_grid", "render_loss_curve",
]
