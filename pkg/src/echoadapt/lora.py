"""Low-rank adapters over tagged linear and convolution layers.

An adapter adds a residual path (alpha/r) * B @ A next to a frozen weight
matrix. A is Gaussian-initialized, B starts at zero, so a freshly attached
adapter leaves the network function unchanged. Convolution kernels are
treated as (out_channels) x (in_channels * kh * kw) matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import AlreadyAdapted, DoubleMerge, InvalidConfig, InvalidTargeting
from .unet import LayerGroupTag, module_tags

ADAPTER_FORMAT = "lora-adapters/1"

_ADAPTABLE_GROUPS = frozenset(
    {
        LayerGroupTag.CROSS_ATTENTION,
        LayerGroupTag.SELF_ATTENTION,
        LayerGroupTag.CONVOLUTION,
        LayerGroupTag.LINEAR,
    }
)


@dataclass(frozen=True)
class AdapterTargeting:
    """Which layer groups receive adapters, and at what rank/scale."""

    groups: frozenset[LayerGroupTag]
    rank: int = 16
    alpha: float = 16.0

    def __post_init__(self):
        groups = frozenset(
            LayerGroupTag(g) if not isinstance(g, LayerGroupTag) else g for g in self.groups
        )
        object.__setattr__(self, "groups", groups)
        if LayerGroupTag.CROSS_ATTENTION not in groups:
            raise InvalidTargeting("cross-attention must be included in every targeting")
        if not groups <= _ADAPTABLE_GROUPS:
            bad = groups - _ADAPTABLE_GROUPS
            raise InvalidTargeting(f"groups {sorted(g.value for g in bad)} cannot be adapted")
        if self.rank < 1:
            raise InvalidTargeting("rank must be a positive integer")
        if not self.alpha > 0:
            raise InvalidTargeting("alpha must be positive")

    def to_dict(self) -> dict:
        return {
            "groups": sorted(g.value for g in self.groups),
            "rank": self.rank,
            "alpha": self.alpha,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterTargeting":
        return cls(
            groups=frozenset(LayerGroupTag(g) for g in d["groups"]),
            rank=d["rank"],
            alpha=d["alpha"],
        )


def _weight_dims(module: nn.Module) -> tuple[int, int]:
    """(d, k) of the layer's weight viewed as a matrix."""
    if isinstance(module, nn.Linear):
        return module.out_features, module.in_features
    if isinstance(module, nn.Conv2d):
        kh, kw = module.kernel_size
        return module.out_channels, module.in_channels * kh * kw
    raise InvalidTargeting(f"cannot adapt module of type {type(module).__name__}")


class LoraAdapter(nn.Module):
    """Wraps one Linear/Conv2d; adds the scaled low-rank residual path."""

    def __init__(
        self,
        base: nn.Module,
        rank: int,
        alpha: float,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        d, k = _weight_dims(base)
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.merged = False
        self.group = getattr(base, "_layer_group", None)
        a = torch.empty(rank, k, dtype=base.weight.dtype)
        a.normal_(mean=0.0, std=rank**-0.5, generator=generator)
        self.A = nn.Parameter(a)
        self.B = nn.Parameter(torch.zeros(d, rank, dtype=base.weight.dtype))
        # adapter params belong to the same layer group as the host weight
        self._layer_group = self.group

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta_weight(self) -> Tensor:
        return (self.scale * (self.B @ self.A)).view_as(self.base.weight)

    def forward(self, x: Tensor) -> Tensor:
        y = self.base(x)
        if self.merged:
            return y
        if isinstance(self.base, nn.Linear):
            return y + self.scale * F.linear(F.linear(x, self.A), self.B)
        return y + F.conv2d(
            x,
            self.delta_weight(),
            bias=None,
            stride=self.base.stride,
            padding=self.base.padding,
            dilation=self.base.dilation,
            groups=self.base.groups,
        )

    def merge(self) -> None:
        if self.merged:
            raise DoubleMerge("adapter is already merged into the base weight")
        with torch.no_grad():
            self.base.weight += self.delta_weight()
        self.merged = True

    def unmerge(self) -> None:
        if not self.merged:
            raise DoubleMerge("adapter is not merged")
        with torch.no_grad():
            self.base.weight -= self.delta_weight()
        self.merged = False


def _parent_and_leaf(net: nn.Module, path: str) -> tuple[nn.Module, str]:
    parts = path.split(".")
    parent = net
    for part in parts[:-1]:
        parent = getattr(parent, part)
    return parent, parts[-1]


def attach(
    net: nn.Module,
    targeting: AdapterTargeting,
    generator: torch.Generator | None = None,
) -> list[str]:
    """Wrap every targeted weight layer; freeze everything else.

    Returns the module paths that received adapters, in traversal order.
    Mutates the network in place.
    """
    if getattr(net, "_adapter_targeting", None) is not None:
        raise AlreadyAdapted("network already carries adapters")
    tags = module_tags(net)
    targets = [
        path
        for path, tag in tags.items()
        if tag in targeting.groups
        and isinstance(net.get_submodule(path), (nn.Linear, nn.Conv2d))
    ]
    if not targets:
        raise InvalidTargeting("targeting matches no adaptable layers")
    for p in net.parameters():
        p.requires_grad_(False)
    for path in targets:
        parent, leaf = _parent_and_leaf(net, path)
        adapter = LoraAdapter(getattr(parent, leaf), targeting.rank, targeting.alpha, generator)
        setattr(parent, leaf, adapter)
    net._adapter_targeting = targeting
    return targets


def iter_adapters(net: nn.Module):
    for name, module in net.named_modules():
        if isinstance(module, LoraAdapter):
            yield name, module


def adapter_parameters(net: nn.Module):
    """The trainable parameters after attachment (the A/B factors)."""
    for _, adapter in iter_adapters(net):
        yield adapter.A
        yield adapter.B


def trainable_param_count(net: nn.Module) -> int:
    """Sum of r*(d+k) over attached adapters."""
    return sum(a.A.numel() + a.B.numel() for _, a in iter_adapters(net))


def trainable_counts_by_group(net: nn.Module) -> dict[LayerGroupTag, int]:
    counts: dict[LayerGroupTag, int] = {}
    for _, adapter in iter_adapters(net):
        counts[adapter.group] = counts.get(adapter.group, 0) + adapter.A.numel() + adapter.B.numel()
    return counts


def merge_all(net: nn.Module) -> None:
    for _, adapter in iter_adapters(net):
        adapter.merge()


def unmerge_all(net: nn.Module) -> None:
    for _, adapter in iter_adapters(net):
        adapter.unmerge()


def save_adapters(path, net: nn.Module) -> None:
    targeting = getattr(net, "_adapter_targeting", None)
    if targeting is None:
        raise InvalidTargeting("network has no adapters to save")
    layers = [
        {
            "path": name,
            "rank": adapter.rank,
            "alpha": adapter.alpha,
            "A": adapter.A.detach().clone(),
            "B": adapter.B.detach().clone(),
        }
        for name, adapter in iter_adapters(net)
    ]
    torch.save(
        {"format": ADAPTER_FORMAT, "targeting": targeting.to_dict(), "layers": layers}, path
    )


def load_adapters(path, net: nn.Module) -> AdapterTargeting:
    """Attach adapters to a bare network and load the stored factors."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != ADAPTER_FORMAT:
        raise InvalidConfig(f"unrecognized adapter file format {payload.get('format')!r}")
    targeting = AdapterTargeting.from_dict(payload["targeting"])
    attach(net, targeting)
    adapters = dict(iter_adapters(net))
    stored = {entry["path"]: entry for entry in payload["layers"]}
    if set(adapters) != set(stored):
        raise InvalidConfig("adapter file does not match the network's adaptable layers")
    with torch.no_grad():
        for name, adapter in adapters.items():
            entry = stored[name]
            if adapter.A.shape != entry["A"].shape or adapter.B.shape != entry["B"].shape:
                raise InvalidConfig(f"adapter shapes for {name!r} do not match the network")
            adapter.A.copy_(entry["A"])
            adapter.B.copy_(entry["B"])
    return targeting
