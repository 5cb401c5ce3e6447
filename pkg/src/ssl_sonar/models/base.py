from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Any

import torch
from torch import nn

ROTNET_FAMILIES = ("resnet20", "mobilenet", "densenet121", "squeezenet", "minixception")
FAMILIES = ROTNET_FAMILIES + ("dae", "jigsaw", "jigsaw_extractor")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    """Declarative description of a network; enough to rebuild it exactly.

    ``input_shape`` is (H, W, channels) of one network input; for the jigsaw
    family it is the shape of one tile. ``options`` holds family-specific
    extras (noise sigma, tile count, dropout rates).
    """

    family: str
    num_outputs: int
    input_shape: tuple[int, int, int]
    layer_names: tuple[str, ...]
    width_w: int | None = None
    code_size_c: int | None = None
    options: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown family {self.family!r}")
        if (self.width_w is not None) != (self.family in ROTNET_FAMILIES):
            raise ModelError("width_w is required for, and only for, the RotNet backbones")
        if (self.code_size_c is not None) != (self.family == "dae"):
            raise ModelError("code_size_c is required for, and only for, the dae family")
        if len(set(self.layer_names)) != len(self.layer_names):
            raise ModelError("layer names must be unique")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["layer_names"] = list(self.layer_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        d["layer_names"] = tuple(d["layer_names"])
        return cls(**d)

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


class LayeredNet(nn.Module):
    """Module whose addressable layers live in one ordered ``ModuleDict``.

    Every named layer is a distinct module invoked exactly once per forward
    pass, so a forward hook on it sees that layer's activation.
    """

    def __init__(self):
        super().__init__()
        self.layers = nn.ModuleDict()

    def add(self, name: str, module: nn.Module) -> nn.Module:
        if name in self.layers:
            raise ModelError(f"duplicate layer name {name!r}")
        self.layers[name] = module
        return module

    def layer_names(self) -> list[str]:
        return list(self.layers.keys())

    def named_layer(self, name: str) -> nn.Module:
        return self.layers[name]


class Add(nn.Module):
    def forward(self, a, b):
        return a + b


class Concat(nn.Module):
    def forward(self, *xs):
        return torch.cat(xs, dim=1)


class GaussianNoise(nn.Module):
    """Additive zero-mean Gaussian noise, active only in training mode."""

    def __init__(self, sigma: float):
        super().__init__()
        if sigma < 0:
            raise ModelError(f"noise sigma must be non-negative, got {sigma}")
        self.sigma = float(sigma)

    def forward(self, x):
        if self.training and self.sigma > 0:
            return x + self.sigma * torch.randn_like(x)
        return x

    def extra_repr(self) -> str:
        return f"sigma={self.sigma}"


class SeparableConv2d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3):
        super().__init__()
        self.depthwise = nn.Conv2d(in_ch, in_ch, kernel_size, padding=kernel_size // 2, groups=in_ch, bias=False)
        self.pointwise = nn.Conv2d(in_ch, out_ch, 1, bias=False)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class _Stop(Exception):
    def __init__(self, value):
        self.value = value


def run_to_layer(module: nn.Module, layer: nn.Module, *inputs) -> torch.Tensor:
    """Run ``module`` forward and return ``layer``'s output, skipping the rest."""

    def hook(_m, _inp, out):
        raise _Stop(out)

    handle = layer.register_forward_hook(hook)
    try:
        module(*inputs)
    except _Stop as stop:
        return stop.value
    finally:
        handle.remove()
    raise ModelError("layer was not reached during the forward pass")


@dataclass
class ModelHandle:
    """A built network together with its spec and free-form run metadata."""

    spec: ArchitectureSpec
    module: nn.Module
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    @property
    def layer_names(self) -> list[str]:
        return list(self.spec.layer_names)

    def layer(self, name: str) -> nn.Module:
        for mod in _layered_parts(self.module):
            if name in mod.layers:
                return mod.layers[name]
        raise ModelError(f"unknown layer {name!r}; valid layers: {', '.join(self.layer_names)}")

    def __call__(self, x):
        return self.module(x)

    @torch.no_grad()
    def predict_proba(self, x: torch.Tensor) -> torch.Tensor:
        was_training = self.module.training
        self.module.eval()
        try:
            return torch.softmax(self.module(x), dim=-1)
        finally:
            self.module.train(was_training)


def _layered_parts(module: nn.Module):
    return [m for m in module.modules() if isinstance(m, LayeredNet)]


def all_layer_names(module: nn.Module) -> tuple[str, ...]:
    names: list[str] = []
    for part in _layered_parts(module):
        names.extend(part.layer_names())
    return tuple(names)


@torch.no_grad()
def flat_dim(net: nn.Module, layer: nn.Module, input_chw: tuple[int, int, int]) -> int:
    """Size of ``layer``'s per-sample output for a single zero input."""
    was_training = net.training
    net.eval()
    try:
        out = run_to_layer(net, layer, torch.zeros(1, *input_chw))
    finally:
        net.train(was_training)
    return int(out[0].numel())
