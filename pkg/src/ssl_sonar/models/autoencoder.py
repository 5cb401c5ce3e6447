from __future__ import annotations

from torch import nn

from .base import GaussianNoise, LayeredNet, ModelError

ENCODER_FILTERS = (32, 16, 8)
DECODER_FILTERS = (32, 16, 8)
CODE_SIZES = (4, 8, 16, 32, 64, 128)


class Encoder(LayeredNet):
    """Noise -> three (conv3x3, relu, maxpool2) stages -> flatten -> dense(c)."""

    def __init__(self, code_size: int, input_shape=(96, 96, 1), sigma: float = 0.0):
        super().__init__()
        h, w, ch = input_shape
        self.add("gaussian_noise", GaussianNoise(sigma))
        in_ch = ch
        for i, f in enumerate(ENCODER_FILTERS):
            self.add(f"enc_conv_{i}", nn.Conv2d(in_ch, f, 3, padding=1))
            self.add(f"enc_relu_{i}", nn.ReLU())
            self.add(f"enc_pool_{i}", nn.MaxPool2d(2))
            in_ch = f
        scale = 2 ** len(ENCODER_FILTERS)
        self.spatial = (in_ch, h // scale, w // scale)
        self.add("enc_flatten", nn.Flatten())
        self.add("encoder_code", nn.Linear(in_ch * (h // scale) * (w // scale), code_size))

    def forward(self, x):
        L = self.layers
        x = L["gaussian_noise"](x)
        for i in range(len(ENCODER_FILTERS)):
            x = L[f"enc_pool_{i}"](L[f"enc_relu_{i}"](L[f"enc_conv_{i}"](x)))
        return L["encoder_code"](L["enc_flatten"](x))


class Decoder(LayeredNet):
    """dense(n_h * n_w * 8) -> reshape -> (conv3x3, relu, upsample2) x3 -> conv3x3(1)."""

    def __init__(self, code_size: int, spatial: tuple[int, int, int], out_channels: int = 1):
        super().__init__()
        ch, h, w = spatial
        self.add("dec_dense", nn.Linear(code_size, ch * h * w))
        self.add("dec_dense_relu", nn.ReLU())
        self.add("dec_reshape", nn.Unflatten(1, spatial))
        in_ch = ch
        for i, f in enumerate(DECODER_FILTERS):
            self.add(f"dec_conv_{i}", nn.Conv2d(in_ch, f, 3, padding=1))
            self.add(f"dec_relu_{i}", nn.ReLU())
            self.add(f"dec_up_{i}", nn.Upsample(scale_factor=2, mode="nearest"))
            in_ch = f
        self.add("reconstruction", nn.Conv2d(in_ch, out_channels, 3, padding=1))

    def forward(self, z):
        L = self.layers
        x = L["dec_reshape"](L["dec_dense_relu"](L["dec_dense"](z)))
        for i in range(len(DECODER_FILTERS)):
            x = L[f"dec_up_{i}"](L[f"dec_relu_{i}"](L[f"dec_conv_{i}"](x)))
        return L["reconstruction"](x)


class DenoisingAutoencoder(nn.Module):
    def __init__(self, code_size: int, input_shape=(96, 96, 1), sigma: float = 0.0):
        super().__init__()
        if code_size <= 0:
            raise ModelError(f"code size must be positive, got {code_size}")
        h, w, ch = input_shape
        if h % 8 or w % 8:
            raise ModelError(f"autoencoder input {h}x{w} must be divisible by 8")
        self.encoder = Encoder(code_size, input_shape, sigma)
        self.decoder = Decoder(code_size, self.encoder.spatial, ch)

    @property
    def sigma(self) -> float:
        return self.encoder.layers["gaussian_noise"].sigma

    def forward(self, x):
        return self.decoder(self.encoder(x))
