"""Width-parameterized RotNet backbones for single-channel 96x96 inputs.

Each class only wires layers; names follow ``<kind>_<index>`` counters so the
layers probed for transfer (e.g. ``activation_17`` of ResNet20) are stable.
All networks end in a ``logits`` layer; softmax is applied by the caller.
"""

from __future__ import annotations

from torch import nn

from .base import Add, Concat, LayeredNet, SeparableConv2d, flat_dim


class _Counter:
    def __init__(self):
        self.counts: dict[str, int] = {}

    def __call__(self, kind: str) -> str:
        i = self.counts.get(kind, 0)
        self.counts[kind] = i + 1
        return f"{kind}_{i}"


class ResNet20(LayeredNet):
    """ResNet v1 with three stacks of three basic blocks; filters w, 2w, 4w."""

    depth = 20

    def __init__(self, w: int, num_outputs: int, input_shape=(96, 96, 1)):
        super().__init__()
        h, wd, ch = input_shape
        name = _Counter()
        self.stem = (name("conv"), name("bn"), name("activation"))
        self.add(self.stem[0], nn.Conv2d(ch, w, 3, padding=1, bias=False))
        self.add(self.stem[1], nn.BatchNorm2d(w))
        self.add(self.stem[2], nn.ReLU())

        n_blocks = (self.depth - 2) // 6
        self.blocks = []
        in_ch = w
        for stack in range(3):
            filters = w * 2 ** stack
            for b in range(n_blocks):
                stride = 2 if stack > 0 and b == 0 else 1
                blk = {"conv1": name("conv"), "bn1": name("bn"), "act1": name("activation"),
                       "conv2": name("conv"), "bn2": name("bn"), "shortcut": None}
                self.add(blk["conv1"], nn.Conv2d(in_ch, filters, 3, stride=stride, padding=1, bias=False))
                self.add(blk["bn1"], nn.BatchNorm2d(filters))
                self.add(blk["act1"], nn.ReLU())
                self.add(blk["conv2"], nn.Conv2d(filters, filters, 3, padding=1, bias=False))
                self.add(blk["bn2"], nn.BatchNorm2d(filters))
                if stride != 1 or in_ch != filters:
                    blk["shortcut"] = name("conv")
                    self.add(blk["shortcut"], nn.Conv2d(in_ch, filters, 1, stride=stride))
                blk["add"] = name("add")
                blk["act2"] = name("activation")
                self.add(blk["add"], Add())
                self.add(blk["act2"], nn.ReLU())
                self.blocks.append(blk)
                in_ch = filters
        self.add("avg_pool", nn.AvgPool2d(8))
        self.add("flatten", nn.Flatten())
        self.add("logits", nn.Linear(flat_dim(self, self.layers["flatten"], (ch, h, wd)), num_outputs))

    def forward(self, x):
        L = self.layers
        conv, bn, act = self.stem
        x = L[act](L[bn](L[conv](x)))
        for blk in self.blocks:
            y = L[blk["act1"]](L[blk["bn1"]](L[blk["conv1"]](x)))
            y = L[blk["bn2"]](L[blk["conv2"]](y))
            sc = L[blk["shortcut"]](x) if blk["shortcut"] else x
            x = L[blk["act2"]](L[blk["add"]](y, sc))
        x = L["flatten"](L["avg_pool"](x))
        return L["logits"](x)


class MobileNet(LayeredNet):
    """MobileNet v1 topology: a strided stem and 13 depthwise-separable blocks.

    Pointwise widths start at 4w and double twice (blocks 4 and 12), with
    downsampling at blocks 2, 4, 6 and 12.
    """

    widths = (4, 4, 4, 8, 8, 8, 8, 8, 8, 8, 8, 16, 16)
    strides = (1, 2, 1, 2, 1, 2, 1, 1, 1, 1, 1, 2, 1)

    def __init__(self, w: int, num_outputs: int, input_shape=(96, 96, 1)):
        super().__init__()
        h, wd, ch = input_shape
        self.add("conv_stem", nn.Conv2d(ch, w, 3, stride=2, padding=1, bias=False))
        self.add("bn_stem", nn.BatchNorm2d(w))
        self.add("relu_stem", nn.ReLU())
        in_ch = w
        for i, (mult, stride) in enumerate(zip(self.widths, self.strides), 1):
            out_ch = mult * w
            self.add(f"dw_{i}", nn.Conv2d(in_ch, in_ch, 3, stride=stride, padding=1, groups=in_ch, bias=False))
            self.add(f"dw_bn_{i}", nn.BatchNorm2d(in_ch))
            self.add(f"dw_relu_{i}", nn.ReLU())
            self.add(f"pw_{i}", nn.Conv2d(in_ch, out_ch, 1, bias=False))
            self.add(f"pw_bn_{i}", nn.BatchNorm2d(out_ch))
            self.add(f"pw_relu_{i}", nn.ReLU())
            in_ch = out_ch
        self.add("global_pool", nn.AdaptiveAvgPool2d(1))
        self.add("flatten", nn.Flatten())
        self.add("logits", nn.Linear(in_ch, num_outputs))

    def forward(self, x):
        L = self.layers
        x = L["relu_stem"](L["bn_stem"](L["conv_stem"](x)))
        for i in range(1, len(self.widths) + 1):
            x = L[f"dw_relu_{i}"](L[f"dw_bn_{i}"](L[f"dw_{i}"](x)))
            x = L[f"pw_relu_{i}"](L[f"pw_bn_{i}"](L[f"pw_{i}"](x)))
        return L["logits"](L["flatten"](L["global_pool"](x)))


class DenseNet121(LayeredNet):
    """DenseNet-BC with blocks (6, 12, 24, 16), growth rate w, compression 0.5."""

    block_sizes = (6, 12, 24, 16)

    def __init__(self, w: int, num_outputs: int, input_shape=(96, 96, 1)):
        super().__init__()
        h, wd, ch = input_shape
        in_ch = 2 * w
        self.add("conv_stem", nn.Conv2d(ch, in_ch, 7, stride=2, padding=3, bias=False))
        self.add("bn_stem", nn.BatchNorm2d(in_ch))
        self.add("relu_stem", nn.ReLU())
        self.add("pool_stem", nn.MaxPool2d(3, stride=2, padding=1))
        for b, size in enumerate(self.block_sizes, 1):
            for l in range(1, size + 1):
                p = f"dense{b}_layer{l}"
                self.add(f"{p}_bn0", nn.BatchNorm2d(in_ch))
                self.add(f"{p}_relu0", nn.ReLU())
                self.add(f"{p}_conv1", nn.Conv2d(in_ch, 4 * w, 1, bias=False))
                self.add(f"{p}_bn1", nn.BatchNorm2d(4 * w))
                self.add(f"{p}_relu1", nn.ReLU())
                self.add(f"{p}_conv2", nn.Conv2d(4 * w, w, 3, padding=1, bias=False))
                self.add(f"{p}_concat", Concat())
                in_ch += w
            if b < len(self.block_sizes):
                out_ch = in_ch // 2
                self.add(f"trans{b}_bn", nn.BatchNorm2d(in_ch))
                self.add(f"trans{b}_relu", nn.ReLU())
                self.add(f"trans{b}_conv", nn.Conv2d(in_ch, out_ch, 1, bias=False))
                self.add(f"trans{b}_pool", nn.AvgPool2d(2))
                in_ch = out_ch
        self.add("bn_final", nn.BatchNorm2d(in_ch))
        self.add("relu_final", nn.ReLU())
        self.add("avg_pool", nn.AdaptiveAvgPool2d(1))
        self.add("flatten", nn.Flatten())
        self.add("logits", nn.Linear(in_ch, num_outputs))

    def forward(self, x):
        L = self.layers
        x = L["pool_stem"](L["relu_stem"](L["bn_stem"](L["conv_stem"](x))))
        for b, size in enumerate(self.block_sizes, 1):
            for l in range(1, size + 1):
                p = f"dense{b}_layer{l}"
                y = L[f"{p}_relu0"](L[f"{p}_bn0"](x))
                y = L[f"{p}_relu1"](L[f"{p}_bn1"](L[f"{p}_conv1"](y)))
                x = L[f"{p}_concat"](x, L[f"{p}_conv2"](y))
            if b < len(self.block_sizes):
                x = L[f"trans{b}_pool"](L[f"trans{b}_conv"](L[f"trans{b}_relu"](L[f"trans{b}_bn"](x))))
        x = L["relu_final"](L["bn_final"](x))
        return L["logits"](L["flatten"](L["avg_pool"](x)))


class SqueezeNet(LayeredNet):
    """Eight fire modules in stacks of (3, 3, 2); squeeze w / expand 2w,
    doubling per stack. Every fire module is followed by batch norm; the
    classifier is a 1x1 conv + batch norm + global average pooling."""

    stacks = (3, 3, 2)

    def __init__(self, w: int, num_outputs: int, input_shape=(96, 96, 1), dropout: float = 0.5):
        super().__init__()
        h, wd, ch = input_shape
        in_ch = 2 * w
        self.add("conv_stem", nn.Conv2d(ch, in_ch, 3, stride=2, padding=1))
        self.add("batch_norm_0", nn.BatchNorm2d(in_ch))
        self.add("relu_stem", nn.ReLU())
        self.add("pool_0", nn.MaxPool2d(3, stride=2, padding=1))
        self.plan = []
        fire = 0
        for s, n in enumerate(self.stacks):
            squeeze, expand = w * 2 ** s, 2 * w * 2 ** s
            for _ in range(n):
                fire += 1
                p = f"fire{fire}"
                self.add(f"{p}_squeeze", nn.Conv2d(in_ch, squeeze, 1))
                self.add(f"{p}_squeeze_relu", nn.ReLU())
                self.add(f"{p}_expand1x1", nn.Conv2d(squeeze, expand, 1))
                self.add(f"{p}_expand1x1_relu", nn.ReLU())
                self.add(f"{p}_expand3x3", nn.Conv2d(squeeze, expand, 3, padding=1))
                self.add(f"{p}_expand3x3_relu", nn.ReLU())
                self.add(f"{p}_concat", Concat())
                self.add(f"batch_norm_{fire}", nn.BatchNorm2d(2 * expand))
                self.plan.append(("fire", fire))
                in_ch = 2 * expand
            if s < len(self.stacks) - 1:
                self.add(f"pool_{s + 1}", nn.MaxPool2d(3, stride=2, padding=1))
                self.plan.append(("pool", s + 1))
        self.add("dropout_0", nn.Dropout(dropout))
        self.add("conv_final", nn.Conv2d(in_ch, num_outputs, 1))
        self.add(f"batch_norm_{fire + 1}", nn.BatchNorm2d(num_outputs))
        self.add("relu_final", nn.ReLU())
        self.add("global_average_pooling", nn.AdaptiveAvgPool2d(1))
        self.add("logits", nn.Flatten())
        self.n_fire = fire

    def forward(self, x):
        L = self.layers
        x = L["pool_0"](L["relu_stem"](L["batch_norm_0"](L["conv_stem"](x))))
        for kind, i in self.plan:
            if kind == "pool":
                x = L[f"pool_{i}"](x)
                continue
            p = f"fire{i}"
            s = L[f"{p}_squeeze_relu"](L[f"{p}_squeeze"](x))
            e1 = L[f"{p}_expand1x1_relu"](L[f"{p}_expand1x1"](s))
            e3 = L[f"{p}_expand3x3_relu"](L[f"{p}_expand3x3"](s))
            x = L[f"batch_norm_{i}"](L[f"{p}_concat"](e1, e3))
        x = L["conv_final"](L["dropout_0"](x))
        x = L["relu_final"](L[f"batch_norm_{self.n_fire + 1}"](x))
        return L["logits"](L["global_average_pooling"](x))


class MiniXception(LayeredNet):
    """Two-conv stem [w/2, w] and four residual separable-conv modules
    [w, 2w, 4w, 8w]; a 3x3 conv to ``num_outputs`` maps then global pooling."""

    def __init__(self, w: int, num_outputs: int, input_shape=(96, 96, 1)):
        super().__init__()
        h, wd, ch = input_shape
        self.stem_widths = (w // 2, w)
        self.block_widths = (w, 2 * w, 4 * w, 8 * w)
        name = _Counter()
        self.stem = []
        in_ch = ch
        for width in self.stem_widths:
            names = (name("conv2d"), name("bn"), name("activation"))
            self.add(names[0], nn.Conv2d(in_ch, width, 3, padding=1, bias=False))
            self.add(names[1], nn.BatchNorm2d(width))
            self.add(names[2], nn.ReLU())
            self.stem.append(names)
            in_ch = width
        self.modules_plan = []
        for width in self.block_widths:
            m = {"res_conv": name("conv2d"), "res_bn": name("bn"),
                 "sep1": name("separable_conv2d"), "bn1": name("bn"), "act": name("activation"),
                 "sep2": name("separable_conv2d"), "bn2": name("bn"),
                 "pool": name("max_pool"), "add": name("add")}
            self.add(m["res_conv"], nn.Conv2d(in_ch, width, 1, stride=2, bias=False))
            self.add(m["res_bn"], nn.BatchNorm2d(width))
            self.add(m["sep1"], SeparableConv2d(in_ch, width))
            self.add(m["bn1"], nn.BatchNorm2d(width))
            self.add(m["act"], nn.ReLU())
            self.add(m["sep2"], SeparableConv2d(width, width))
            self.add(m["bn2"], nn.BatchNorm2d(width))
            self.add(m["pool"], nn.MaxPool2d(3, stride=2, padding=1))
            self.add(m["add"], Add())
            self.modules_plan.append(m)
            in_ch = width
        self.final = name("conv2d")
        self.add(self.final, nn.Conv2d(in_ch, num_outputs, 3, padding=1))
        self.add("global_average_pooling", nn.AdaptiveAvgPool2d(1))
        self.add("logits", nn.Flatten())

    def forward(self, x):
        L = self.layers
        for conv, bn, act in self.stem:
            x = L[act](L[bn](L[conv](x)))
        for m in self.modules_plan:
            res = L[m["res_bn"]](L[m["res_conv"]](x))
            y = L[m["act"]](L[m["bn1"]](L[m["sep1"]](x)))
            y = L[m["pool"]](L[m["bn2"]](L[m["sep2"]](y)))
            x = L[m["add"]](y, res)
        x = L[self.final](x)
        return L["logits"](L["global_average_pooling"](x))


BACKBONES = {
    "resnet20": ResNet20,
    "mobilenet": MobileNet,
    "densenet121": DenseNet121,
    "squeezenet": SqueezeNet,
    "minixception": MiniXception,
}

# widths selected per family for sonar images
DEFAULT_WIDTHS = {"resnet20": 32, "mobilenet": 32, "densenet121": 16, "squeezenet": 32, "minixception": 16}
