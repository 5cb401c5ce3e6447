"""Model zoo: builders returning :class:`ModelHandle` objects with stable layer names."""

from __future__ import annotations

import contextlib
import copy

import torch

from .autoencoder import CODE_SIZES, DenoisingAutoencoder
from .backbones import BACKBONES, DEFAULT_WIDTHS
from .base import (FAMILIES, ROTNET_FAMILIES, ArchitectureSpec, ModelError, ModelHandle,
                   all_layer_names, run_to_layer)
from .jigsaw import JigsawNet, TileExtractor

INPUT_SHAPE = (96, 96, 1)
TILE_SHAPE = (32, 32, 1)

# hidden layers probed for transfer, per family
DEFAULT_PROBE_LAYERS = {
    "resnet20": ("flatten", "activation_18", "activation_17"),
    "mobilenet": ("pw_relu_11", "flatten", "pw_relu_12"),
    "densenet121": ("dense4_layer15_relu0", "dense4_layer16_relu0", "avg_pool"),
    "squeezenet": ("batch_norm_8", "batch_norm_9", "global_average_pooling"),
    "minixception": ("add_3", "add_2", "conv2d_6"),
    "dae": ("encoder_code",),
    "jigsaw": ("dropout_0", "dropout_1", "dropout_2"),
    "jigsaw_extractor": ("dropout_0", "dropout_1", "dropout_2"),
}

__all__ = [
    "ArchitectureSpec", "ModelHandle", "ModelError", "FAMILIES", "ROTNET_FAMILIES", "DEFAULT_WIDTHS",
    "CODE_SIZES", "DEFAULT_PROBE_LAYERS", "build_backbone", "build_dae", "build_jigsaw",
    "rebind_extractor_input", "list_layers", "build_from_spec", "run_to_layer",
]


@contextlib.contextmanager
def _seeded(seed: int | None):
    if seed is None:
        yield
        return
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def build_backbone(family: str, w: int, num_outputs: int, seed: int | None = 0,
                   input_shape=INPUT_SHAPE) -> ModelHandle:
    """Build one of the five RotNet backbones at width ``w``."""
    if family not in BACKBONES:
        raise ModelError(f"unknown backbone {family!r}; choose from {', '.join(BACKBONES)}")
    if not isinstance(w, int) or w <= 0:
        raise ModelError(f"width w must be a positive integer, got {w!r}")
    if family == "minixception" and w % 2:
        raise ModelError(f"minixception needs an even w (stem width w/2), got {w}")
    if num_outputs < 1:
        raise ModelError("num_outputs must be >= 1")
    with _seeded(seed):
        net = BACKBONES[family](w, num_outputs, tuple(input_shape))
    spec = ArchitectureSpec(family, num_outputs, tuple(input_shape), all_layer_names(net), width_w=w)
    return ModelHandle(spec, net, {"init_seed": seed})


def build_dae(c: int, sigma: float = 0.0, seed: int | None = 0, input_shape=INPUT_SHAPE) -> ModelHandle:
    """Convolutional autoencoder with a length-``c`` code; ``sigma`` > 0 makes it denoising."""
    if not isinstance(c, int) or c <= 0:
        raise ModelError(f"code size must be a positive integer, got {c!r}")
    with _seeded(seed):
        net = DenoisingAutoencoder(c, tuple(input_shape), sigma)
    spec = ArchitectureSpec("dae", input_shape[0] * input_shape[1] * input_shape[2], tuple(input_shape),
                            all_layer_names(net), code_size_c=c, options={"noise_sigma": float(sigma)})
    return ModelHandle(spec, net, {"init_seed": seed})


def build_jigsaw(P: int, seed: int | None = 0, num_tiles: int = 9, tile_shape=TILE_SHAPE,
                 extractor_dropout: float = 0.25, head_dropout: float = 0.5) -> ModelHandle:
    """Jigsaw network classifying ``P`` permutations of ``num_tiles`` tiles.

    With ``num_tiles=1`` and a 96x96 tile it doubles as the supervised
    control classifier built from the same extractor.
    """
    if not isinstance(P, int) or P < 2:
        raise ModelError(f"jigsaw needs at least 2 output classes, got {P!r}")
    with _seeded(seed):
        net = JigsawNet(P, num_tiles, tuple(tile_shape), extractor_dropout, head_dropout)
    spec = ArchitectureSpec("jigsaw", P, tuple(tile_shape), all_layer_names(net),
                            options={"num_tiles": num_tiles, "extractor_dropout": extractor_dropout,
                                     "head_dropout": head_dropout})
    return ModelHandle(spec, net, {"init_seed": seed})


def rebind_extractor_input(model: ModelHandle, new_shape=INPUT_SHAPE) -> ModelHandle:
    """Standalone copy of a jigsaw tile extractor accepting ``new_shape`` inputs.

    Convolution and batch-norm tensors are copied verbatim; only the size of
    the flattened output changes.
    """
    if model.spec.family == "jigsaw":
        src = model.module.extractor
    elif model.spec.family == "jigsaw_extractor":
        src = model.module
    else:
        raise ModelError(f"cannot rebind a {model.spec.family} model; expected a jigsaw network")
    if new_shape[2] != model.spec.input_shape[2]:
        raise ModelError("rebinding cannot change the channel count")
    dropout = model.spec.options.get("extractor_dropout", 0.25)
    net = TileExtractor(tuple(new_shape), dropout)
    net.load_state_dict(copy.deepcopy(src.state_dict()))
    net.train(src.training)
    spec = ArchitectureSpec("jigsaw_extractor", net.out_dim, tuple(new_shape), all_layer_names(net),
                            options={"extractor_dropout": dropout})
    meta = dict(model.meta)
    meta["rebound_from"] = model.spec.spec_hash()
    return ModelHandle(spec, net, meta)


def list_layers(model: ModelHandle) -> list[str]:
    return model.layer_names


def build_from_spec(spec: ArchitectureSpec) -> ModelHandle:
    """Rebuild an (untrained) network from its spec; used when loading checkpoints."""
    fam = spec.family
    if fam in ROTNET_FAMILIES:
        handle = build_backbone(fam, spec.width_w, spec.num_outputs, None, spec.input_shape)
    elif fam == "dae":
        handle = build_dae(spec.code_size_c, spec.options.get("noise_sigma", 0.0), None, spec.input_shape)
    elif fam == "jigsaw":
        handle = build_jigsaw(spec.num_outputs, None, spec.options.get("num_tiles", 9), spec.input_shape,
                              spec.options.get("extractor_dropout", 0.25), spec.options.get("head_dropout", 0.5))
    else:
        net = TileExtractor(spec.input_shape, spec.options.get("extractor_dropout", 0.25))
        handle = ModelHandle(ArchitectureSpec("jigsaw_extractor", net.out_dim, spec.input_shape,
                                              all_layer_names(net), options=dict(spec.options)), net)
    if handle.spec.spec_hash() != spec.spec_hash():
        raise ModelError("rebuilt network does not match the stored architecture spec")
    return handle
