from __future__ import annotations

import torch
from torch import nn

from .base import LayeredNet, ModelError

EXTRACTOR_FILTERS = (32, 16, 8)
POOL_LADDER = 2 ** len(EXTRACTOR_FILTERS)


class TileExtractor(LayeredNet):
    """Per-tile CNN: (conv3x3+relu, batchnorm, maxpool2, dropout) x3 -> flatten.

    Fully convolutional up to the flatten, so the same weights accept any
    input whose sides are multiples of 8.
    """

    def __init__(self, input_shape=(32, 32, 1), dropout: float = 0.25):
        super().__init__()
        h, w, ch = input_shape
        if h % POOL_LADDER or w % POOL_LADDER or h <= 0 or w <= 0:
            raise ModelError(f"extractor input {h}x{w} incompatible with {len(EXTRACTOR_FILTERS)} 2x poolings")
        in_ch = ch
        for i, f in enumerate(EXTRACTOR_FILTERS):
            self.add(f"conv_{i}", nn.Conv2d(in_ch, f, 3, padding=1))
            self.add(f"relu_{i}", nn.ReLU())
            self.add(f"bn_{i}", nn.BatchNorm2d(f))
            self.add(f"pool_{i}", nn.MaxPool2d(2))
            self.add(f"dropout_{i}", nn.Dropout(dropout))
            in_ch = f
        self.add("flatten", nn.Flatten())
        self.out_dim = in_ch * (h // POOL_LADDER) * (w // POOL_LADDER)

    def forward(self, x):
        L = self.layers
        for i in range(len(EXTRACTOR_FILTERS)):
            x = L[f"relu_{i}"](L[f"conv_{i}"](x))
            x = L[f"dropout_{i}"](L[f"pool_{i}"](L[f"bn_{i}"](x)))
        return L["flatten"](x)


class DecisionHead(LayeredNet):
    def __init__(self, in_dim: int, num_outputs: int, hidden=(128, 64), dropout: float = 0.5):
        super().__init__()
        self.hidden = tuple(hidden)
        for i, units in enumerate(self.hidden):
            self.add(f"head_dense_{i}", nn.Linear(in_dim, units))
            self.add(f"head_relu_{i}", nn.ReLU())
            self.add(f"head_bn_{i}", nn.BatchNorm1d(units))
            in_dim = units
        self.add("head_dropout", nn.Dropout(dropout))
        self.add("logits", nn.Linear(in_dim, num_outputs))

    def forward(self, x):
        L = self.layers
        for i in range(len(self.hidden)):
            x = L[f"head_bn_{i}"](L[f"head_relu_{i}"](L[f"head_dense_{i}"](x)))
        return L["logits"](L["head_dropout"](x))


class JigsawNet(nn.Module):
    """Shared tile extractor applied to every tile, features concatenated in
    tile order, then a fully connected decision head.

    Input: ``(B, num_tiles, C, h, w)``.
    """

    def __init__(self, num_outputs: int, num_tiles: int = 9, tile_shape=(32, 32, 1),
                 extractor_dropout: float = 0.25, head_dropout: float = 0.5):
        super().__init__()
        self.num_tiles = num_tiles
        self.extractor = TileExtractor(tile_shape, extractor_dropout)
        self.head = DecisionHead(num_tiles * self.extractor.out_dim, num_outputs, dropout=head_dropout)

    def tile_features(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-concatenation features, ``(B, num_tiles, feat)``."""
        if x.dim() != 5 or x.shape[1] != self.num_tiles:
            raise ModelError(f"expected (B, {self.num_tiles}, C, h, w) tiles, got {tuple(x.shape)}")
        b = x.shape[0]
        feats = self.extractor(x.reshape(b * self.num_tiles, *x.shape[2:]))
        return feats.reshape(b, self.num_tiles, -1)

    def forward(self, x):
        return self.head(self.tile_features(x).flatten(1))
