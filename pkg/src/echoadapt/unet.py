"""Conditional UNet denoiser backbone with layer-group tagging and EMA.

Depth-3 encoder/decoder ladder whose widths follow base_channels times the
multiplier list. Semantic-mask conditioning enters through cross-attention
at the early (high-resolution) levels; self-attention sits at the deepest
level and the bottleneck where the receptive field is largest. Every
trainable parameter carries exactly one layer-group tag so adapters can
target groups selectively.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, asdict

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import InvalidConfig, ShapeMismatch

CHECKPOINT_FORMAT = "edm-checkpoint/1"


class LayerGroupTag(enum.Enum):
    CROSS_ATTENTION = "cross_attention"
    SELF_ATTENTION = "self_attention"
    CONVOLUTION = "convolution"
    LINEAR = "linear"
    OTHER = "other"


@dataclass(frozen=True)
class UNetConfig:
    resolution: int = 64
    in_channels: int = 1
    base_channels: int = 16
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    depth: int = 3
    cond_channels: int = 3
    cross_attention_levels: frozenset[int] = frozenset({1, 2})
    self_attention_sites: tuple[str, ...] = ("level3", "bottleneck")
    attention_heads: int = 2
    noise_embed_dim: int = 64
    blocks_per_level: int = 1
    ff_mult: int = 2
    cond_token_grid: int = 8

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        object.__setattr__(self, "cross_attention_levels", frozenset(self.cross_attention_levels))
        object.__setattr__(self, "self_attention_sites", tuple(self.self_attention_sites))
        if len(self.channel_multipliers) != self.depth:
            raise InvalidConfig("need one channel multiplier per level")
        if self.resolution % (2**self.depth) != 0:
            raise InvalidConfig(f"resolution must be divisible by {2 ** self.depth}")
        if not self.cross_attention_levels <= set(range(1, self.depth + 1)):
            raise InvalidConfig("cross_attention_levels outside 1..depth")
        for site in self.self_attention_sites:
            if site != "bottleneck" and self._parse_level(site) is None:
                raise InvalidConfig(f"unknown self-attention site {site!r}")
        if self.noise_embed_dim % 2 != 0:
            raise InvalidConfig("noise_embed_dim must be even")
        for w in self.widths:
            if w % self.attention_heads != 0:
                raise InvalidConfig("attention_heads must divide every level width")

    @staticmethod
    def _parse_level(site: str) -> int | None:
        if site.startswith("level") and site[5:].isdigit():
            return int(site[5:])
        return None

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    @property
    def self_attention_levels(self) -> frozenset[int]:
        return frozenset(
            lvl for s in self.self_attention_sites if (lvl := self._parse_level(s)) is not None
        )

    @property
    def bottleneck_self_attention(self) -> bool:
        return "bottleneck" in self.self_attention_sites

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["cross_attention_levels"] = sorted(self.cross_attention_levels)
        d["self_attention_sites"] = list(self.self_attention_sites)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def _tag(module: nn.Module, tag: LayerGroupTag) -> nn.Module:
    """Stamp a leaf module (and its params) with its layer group."""
    module._layer_group = tag
    return module


def sinusoidal_embedding(x: Tensor, dim: int) -> Tensor:
    """Fourier features of a scalar signal, shape (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        torch.linspace(0.0, math.log(1000.0), half, dtype=x.dtype, device=x.device)
    )
    ang = x[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


def mask_to_tokens(cond: Tensor, level_resolution: int) -> Tensor:
    """Average-pool a one-hot volume to a token grid.

    (B, N, H, W) -> (B, T, N) with T = level_resolution^2; each token's
    channel values equal the fraction of covered pixels per class.
    """
    pooled = F.adaptive_avg_pool2d(cond, level_resolution)
    return pooled.flatten(2).transpose(1, 2)


class ResBlock(nn.Module):
    """Two 3x3 convolutions with a noise-embedding shift between them."""

    def __init__(self, c_in: int, c_out: int, emb_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = _tag(nn.GroupNorm(min(groups, c_in), c_in), LayerGroupTag.OTHER)
        self.conv1 = _tag(nn.Conv2d(c_in, c_out, 3, padding=1), LayerGroupTag.CONVOLUTION)
        self.emb_proj = _tag(nn.Linear(emb_dim, c_out), LayerGroupTag.LINEAR)
        self.norm2 = _tag(nn.GroupNorm(min(groups, c_out), c_out), LayerGroupTag.OTHER)
        self.conv2 = _tag(nn.Conv2d(c_out, c_out, 3, padding=1), LayerGroupTag.CONVOLUTION)
        if c_in != c_out:
            self.skip = _tag(nn.Conv2d(c_in, c_out, 1), LayerGroupTag.CONVOLUTION)
        else:
            self.skip = nn.Identity()

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class _Attention(nn.Module):
    """Multi-head attention over flattened spatial tokens plus a feed-forward."""

    def __init__(self, width: int, kv_dim: int, heads: int, ff_mult: int, tag: LayerGroupTag):
        super().__init__()
        self.heads = heads
        self.norm = _tag(nn.LayerNorm(width), LayerGroupTag.OTHER)
        self.q = _tag(nn.Linear(width, width, bias=False), tag)
        self.k = _tag(nn.Linear(kv_dim, width, bias=False), tag)
        self.v = _tag(nn.Linear(kv_dim, width, bias=False), tag)
        self.out = _tag(nn.Linear(width, width), tag)
        self.ff_norm = _tag(nn.LayerNorm(width), LayerGroupTag.OTHER)
        self.ff1 = _tag(nn.Linear(width, ff_mult * width), LayerGroupTag.LINEAR)
        self.ff2 = _tag(nn.Linear(ff_mult * width, width), LayerGroupTag.LINEAR)

    def _attend(self, x_tokens: Tensor, kv_tokens: Tensor) -> Tensor:
        b, t, w = x_tokens.shape
        h = self.heads
        q = self.q(self.norm(x_tokens)).view(b, t, h, w // h).transpose(1, 2)
        k = self.k(kv_tokens).view(b, -1, h, w // h).transpose(1, 2)
        v = self.v(kv_tokens).view(b, -1, h, w // h).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(w // h), dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b, t, w)
        return self.out(mixed)

    def _feed_forward(self, x_tokens: Tensor) -> Tensor:
        return self.ff2(F.silu(self.ff1(self.ff_norm(x_tokens))))


class SelfAttentionBlock(_Attention):
    def __init__(self, width: int, heads: int, ff_mult: int):
        super().__init__(width, width, heads, ff_mult, LayerGroupTag.SELF_ATTENTION)

    def forward(self, x: Tensor) -> Tensor:
        b, c, hh, ww = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        tokens = tokens + self._attend(tokens, self.norm(tokens))
        tokens = tokens + self._feed_forward(tokens)
        return tokens.transpose(1, 2).view(b, c, hh, ww)


class CrossAttentionBlock(_Attention):
    """Image tokens attend to pooled mask tokens."""

    def __init__(self, width: int, cond_channels: int, heads: int, ff_mult: int, token_grid: int):
        super().__init__(width, cond_channels, heads, ff_mult, LayerGroupTag.CROSS_ATTENTION)
        self.token_grid = token_grid

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        b, c, hh, ww = x.shape
        grid = min(self.token_grid, hh)
        kv = mask_to_tokens(cond, grid)
        tokens = x.flatten(2).transpose(1, 2)
        tokens = tokens + self._attend(tokens, kv)
        tokens = tokens + self._feed_forward(tokens)
        return tokens.transpose(1, 2).view(b, c, hh, ww)


class _Level(nn.Module):
    """Residual blocks of one resolution level with optional attention."""

    def __init__(
        self,
        config: UNetConfig,
        c_in: int,
        c_out: int,
        emb_dim: int,
        level: int,
    ):
        super().__init__()
        self.res_blocks = nn.ModuleList()
        self.attn_blocks = nn.ModuleList()
        cross = level in config.cross_attention_levels
        self_ = level in config.self_attention_levels
        for b in range(config.blocks_per_level):
            self.res_blocks.append(
                ResBlock(c_in if b == 0 else c_out, c_out, emb_dim)
            )
            if cross:
                self.attn_blocks.append(
                    CrossAttentionBlock(
                        c_out,
                        config.cond_channels,
                        config.attention_heads,
                        config.ff_mult,
                        config.cond_token_grid,
                    )
                )
            elif self_:
                self.attn_blocks.append(
                    SelfAttentionBlock(c_out, config.attention_heads, config.ff_mult)
                )
            else:
                self.attn_blocks.append(nn.Identity())

    def forward(self, x: Tensor, emb: Tensor, cond: Tensor) -> Tensor:
        for res, attn in zip(self.res_blocks, self.attn_blocks):
            x = res(x, emb)
            if isinstance(attn, CrossAttentionBlock):
                x = attn(x, cond)
            elif isinstance(attn, SelfAttentionBlock):
                x = attn(x)
        return x


class ConditionalUNet(nn.Module):
    """The raw network F: predicts the preconditioned regression target."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        widths = config.widths
        emb = config.noise_embed_dim

        self.emb_linear1 = _tag(nn.Linear(emb, emb), LayerGroupTag.LINEAR)
        self.emb_linear2 = _tag(nn.Linear(emb, emb), LayerGroupTag.LINEAR)

        self.in_conv = _tag(
            nn.Conv2d(config.in_channels, widths[0], 3, padding=1), LayerGroupTag.CONVOLUTION
        )

        self.enc_levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        c_prev = widths[0]
        for lvl, w in enumerate(widths, start=1):
            self.enc_levels.append(_Level(config, c_prev, w, emb, lvl))
            self.downs.append(
                _tag(nn.Conv2d(w, w, 3, stride=2, padding=1), LayerGroupTag.CONVOLUTION)
            )
            c_prev = w

        w_bot = widths[-1]
        self.mid_block1 = ResBlock(w_bot, w_bot, emb)
        if config.bottleneck_self_attention:
            self.mid_attn = SelfAttentionBlock(w_bot, config.attention_heads, config.ff_mult)
        else:
            self.mid_attn = nn.Identity()
        self.mid_block2 = ResBlock(w_bot, w_bot, emb)

        self.ups = nn.ModuleList()
        self.dec_levels = nn.ModuleList()
        c_below = w_bot
        for lvl in range(config.depth, 0, -1):
            w = widths[lvl - 1]
            self.ups.append(
                _tag(nn.Conv2d(c_below, w, 3, padding=1), LayerGroupTag.CONVOLUTION)
            )
            self.dec_levels.append(_Level(config, 2 * w, w, emb, lvl))
            c_below = w

        self.out_norm = _tag(nn.GroupNorm(min(8, widths[0]), widths[0]), LayerGroupTag.OTHER)
        self.out_conv = _tag(
            nn.Conv2d(widths[0], config.in_channels, 3, padding=1), LayerGroupTag.CONVOLUTION
        )

    def forward(self, x_in: Tensor, c_noise: Tensor, cond: Tensor) -> Tensor:
        """x_in is the pre-scaled noisy image; cond the one-hot mask volume."""
        if x_in.ndim != 4 or x_in.shape[1] != self.config.in_channels:
            raise ShapeMismatch(f"expected (B, {self.config.in_channels}, H, W), got {tuple(x_in.shape)}")
        if cond.shape[1] != self.config.cond_channels:
            raise ShapeMismatch(
                f"conditioning has {cond.shape[1]} channels, config says {self.config.cond_channels}"
            )
        c_noise = torch.as_tensor(c_noise, dtype=x_in.dtype, device=x_in.device)
        if c_noise.ndim == 0:
            c_noise = c_noise.repeat(x_in.shape[0])
        emb = sinusoidal_embedding(c_noise, self.config.noise_embed_dim)
        emb = self.emb_linear2(F.silu(self.emb_linear1(emb)))

        x = self.in_conv(x_in)
        skips = []
        for level, down in zip(self.enc_levels, self.downs):
            x = level(x, emb, cond)
            skips.append(x)
            x = down(x)

        x = self.mid_block1(x, emb)
        if isinstance(self.mid_attn, SelfAttentionBlock):
            x = self.mid_attn(x)
        x = self.mid_block2(x, emb)

        for up, level in zip(self.ups, self.dec_levels):
            x = up(F.interpolate(x, scale_factor=2, mode="nearest"))
            x = level(torch.cat([x, skips.pop()], dim=1), emb, cond)

        return self.out_conv(F.silu(self.out_norm(x)))


def build(config: UNetConfig) -> ConditionalUNet:
    return ConditionalUNet(config)


# --- layer-group bookkeeping -------------------------------------------------


def module_tags(net: nn.Module) -> dict[str, LayerGroupTag]:
    """Tag per leaf module holding parameters. Raises if any is untagged."""
    tags: dict[str, LayerGroupTag] = {}
    for name, module in net.named_modules():
        if next(module.parameters(recurse=False), None) is None:
            continue
        tag = getattr(module, "_layer_group", None)
        if tag is None:
            raise InvalidConfig(f"module {name!r} holds parameters but carries no group tag")
        tags[name] = tag
    return tags


def param_tags(net: nn.Module) -> dict[str, LayerGroupTag]:
    """Tag per parameter name; the tags partition the whole parameter set."""
    by_module = module_tags(net)
    out: dict[str, LayerGroupTag] = {}
    for mod_name, tag in by_module.items():
        module = net.get_submodule(mod_name) if mod_name else net
        for pname, _ in module.named_parameters(recurse=False):
            out[f"{mod_name}.{pname}" if mod_name else pname] = tag
    return out


def param_count(net: nn.Module, group_filter: set[LayerGroupTag] | None = None) -> int:
    """Number of parameters whose tag is in the filter (all when None)."""
    tags = param_tags(net)
    params = dict(net.named_parameters())
    total = 0
    for name, tag in tags.items():
        if group_filter is None or tag in group_filter:
            total += params[name].numel()
    return total


def group_param_counts(net: nn.Module) -> dict[LayerGroupTag, int]:
    tags = param_tags(net)
    params = dict(net.named_parameters())
    counts = {tag: 0 for tag in LayerGroupTag}
    for name, tag in tags.items():
        counts[tag] += params[name].numel()
    return counts


# --- exponential moving average ----------------------------------------------


class EMAState:
    """Shadow copy of the parameters, updated as decay*shadow + (1-decay)*live."""

    def __init__(self, net: nn.Module, decay: float = 0.999):
        if not 0.0 <= decay <= 1.0:
            raise InvalidConfig("EMA decay must lie in [0, 1]")
        self.decay = decay
        self.updates = 0
        self.shadow = {name: p.detach().clone() for name, p in net.named_parameters()}

    def update(self, net: nn.Module) -> "EMAState":
        with torch.no_grad():
            for name, p in net.named_parameters():
                shadow = self.shadow[name]
                if shadow.shape != p.shape:
                    raise ShapeMismatch(f"EMA shadow for {name!r} has shape {tuple(shadow.shape)}")
                shadow.mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)
        self.updates += 1
        return self

    def copy_to(self, net: nn.Module) -> None:
        with torch.no_grad():
            for name, p in net.named_parameters():
                p.copy_(self.shadow[name])

    def state_dict(self) -> dict:
        return {"decay": self.decay, "updates": self.updates, "shadow": self.shadow}

    @classmethod
    def from_state_dict(cls, net: nn.Module, state: dict) -> "EMAState":
        ema = cls(net, decay=state["decay"])
        ema.updates = state["updates"]
        ema.shadow = {k: v.clone() for k, v in state["shadow"].items()}
        return ema


def ema_update(ema: EMAState, net: nn.Module) -> EMAState:
    return ema.update(net)


# --- checkpoint archive --------------------------------------------------------


def save_checkpoint(
    path,
    net: ConditionalUNet,
    ema: EMAState,
    step: int,
    optimizer_state: dict | None = None,
    extra: dict | None = None,
) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": net.config.to_dict(),
        "step": step,
        "model_state": net.state_dict(),
        "ema_state": ema.state_dict(),
        "tags": {name: tag.value for name, tag in param_tags(net).items()},
        "optimizer_state": optimizer_state,
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[ConditionalUNet, EMAState, int, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise InvalidConfig(f"unrecognized checkpoint format {payload.get('format')!r}")
    net = ConditionalUNet(UNetConfig.from_dict(payload["config"]))
    net.load_state_dict(payload["model_state"])
    ema = EMAState.from_state_dict(net, payload["ema_state"])
    return net, ema, payload["step"], payload
