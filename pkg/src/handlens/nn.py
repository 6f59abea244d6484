"""Convolutional layers and the model builders, with exact parameter accounting.

Conventions (these fix the published parameter totals, so they are load
bearing): convolutions carry no bias because a batch normalization with
affine scale/shift always follows them; the classifier head's linear
layers do carry biases; batch-norm running statistics are buffers, not
trainable parameters, and are excluded from ``count_parameters``.

Two interchangeable heads are provided. ``stock_linear`` is a global
average pool into one linear layer. ``concat_pool`` (the default)
concatenates global average and max pooling, then runs a two-layer
perceptron with batch norm and dropout between.
"""

from __future__ import annotations

import math
import re
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    ShapeError,
    Tensor,
    concat,
    make_op,
    matmul,
    no_grad,
    reduce_mean,
    relu,
)

__all__ = [
    "Module",
    "ModuleList",
    "Conv2d",
    "BatchNorm",
    "Linear",
    "DenseBlock",
    "Transition",
    "Classifier",
    "conv2d",
    "max_pool2d",
    "avg_pool2d",
    "global_avg_pool",
    "global_max_pool",
    "batch_norm",
    "dropout",
    "build_densenet",
    "build_densenet121",
    "build_resnet",
    "build_model",
    "count_parameters",
    "parameter_breakdown",
    "freeze_backbone",
]


# ----------------------------------------------------------------------
# functional ops
# ----------------------------------------------------------------------


def _conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N,C,H,W) input with (F,C,kh,kw) filters.

    Forward and backward both go through an im2col buffer so the heavy
    lifting is two matrix products.
    """
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels, filters expect {cw}")
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} (stride {stride}, padding {padding}) "
            f"exceeds input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        if bias.shape != (f,):
            raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({f},)")
        out += bias.data.reshape(1, f, 1, 1)

    def rule(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        dw = (g2.T @ cols).reshape(f, c, kh, kw)
        dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding:padding + h, padding:padding + w]
        if bias is not None:
            return np.ascontiguousarray(dx), dw, g.sum(axis=(0, 2, 3))
        return np.ascontiguousarray(dx), dw

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, rule, "conv2d")


def max_pool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Windowed max; gradient routes to the argmax (first index on ties)."""
    if padding >= kernel:
        raise ShapeError("max_pool2d: padding must be smaller than the kernel")
    n, c, h, w = x.shape
    ho = _conv_out_size(h, kernel, stride, padding)
    wo = _conv_out_size(w, kernel, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_pool2d: kernel {kernel} exceeds input {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    amax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, amax[..., None], axis=-1)[..., 0]

    def rule(g):
        dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
        ni, ci, hi, wi = np.ogrid[:n, :c, :ho, :wo]
        rows = hi * stride + amax // kernel
        cols_ = wi * stride + amax % kernel
        np.add.at(dxp, (ni, ci, rows, cols_), g)
        dx = dxp[:, :, padding:padding + h, padding:padding + w]
        return (np.ascontiguousarray(dx),)

    return make_op(np.ascontiguousarray(out), (x,), rule, "max_pool2d")


def avg_pool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Windowed mean (no padding; the architectures here never need it)."""
    n, c, h, w = x.shape
    ho = _conv_out_size(h, kernel, stride, 0)
    wo = _conv_out_size(w, kernel, stride, 0)
    if ho < 1 or wo < 1:
        raise ShapeError(f"avg_pool2d: kernel {kernel} exceeds input {h}x{w}")
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    out = win.mean(axis=(4, 5))
    scale = 1.0 / (kernel * kernel)

    def rule(g):
        dx = np.zeros((n, c, h, w))
        gs = g * scale
        for i in range(kernel):
            for j in range(kernel):
                dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gs
        return (dx,)

    return make_op(np.ascontiguousarray(out), (x,), rule, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial mean."""
    return reduce_mean(x, axes=(2, 3))


def global_max_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial max, gradient to the first argmax."""
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    amax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, amax[..., None], axis=-1)[..., 0]

    def rule(g):
        dflat = np.zeros((n, c, h * w))
        np.put_along_axis(dflat, amax[..., None], g[..., None], axis=-1)
        return (dflat.reshape(n, c, h, w),)

    return make_op(np.ascontiguousarray(out), (x,), rule, "global_max_pool")


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               train: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (N,C) or (N,C,H,W) input.

    Train mode normalizes by the batch's population statistics and folds
    them into the running buffers in place (one call per step); eval mode
    normalizes by the running buffers.
    """
    channels = x.shape[1]
    if scale.shape != (channels,) or shift.shape != (channels,):
        raise ShapeError(
            f"batch_norm: scale/shift must have shape ({channels},), "
            f"got {scale.shape}/{shift.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, channels) if x.ndim == 2 else (1, channels, 1, 1)
    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = scale.data.reshape(bshape) * xhat + shift.data.reshape(bshape)
    count = x.size // channels

    def rule(g):
        dscale = (g * xhat).sum(axis=axes)
        dshift = g.sum(axis=axes)
        dxhat = g * scale.data.reshape(bshape)
        if train:
            # standard fused expression for d loss / d x through batch stats
            dx = (inv_std.reshape(bshape) / count) * (
                count * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dscale, dshift

    return make_op(out, (x, scale, shift), rule, "batch_norm")


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when eval or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    out = x.data * mask

    def rule(g):
        return (g * mask,)

    return make_op(out, (x,), rule, "dropout")


# ----------------------------------------------------------------------
# module system
# ----------------------------------------------------------------------


class Module:
    """Tree of parameters, buffers and child modules with hierarchical names."""

    def __init__(self):
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, Tensor):
            value.requires_grad = True
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, array: np.ndarray) -> None:
        # buffers are mutated in place (running stats), never reassigned
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._modules.items():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._modules.items():
            yield from child.named_buffers(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_store(self) -> dict[str, Tensor]:
        """Name -> parameter map; names are checked unique."""
        store: dict[str, Tensor] = {}
        for name, p in self.named_parameters():
            if name in store:
                raise ValueError(f"duplicate parameter name {name!r}")
            store[name] = p
        return store

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x: Tensor, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        raise NotImplementedError

    def __call__(self, x, train=False, rng=None):
        return self.forward(x, train=train, rng=rng)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._list: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._modules[str(len(self._list))] = module
        self._list.append(module)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, index: int) -> Module:
        return self._list[index]


class Conv2d(Module):
    """Convolution with fan-in-scaled normal initialization."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0, bias: bool = False,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        std = math.sqrt(2.0 / fan_in)
        self.weight = Tensor(
            rng.normal(0.0, std, (out_channels, in_channels, kernel, kernel)))
        if bias:
            self.bias = Tensor(np.zeros(out_channels))
        else:
            object.__setattr__(self, "bias", None)

    def forward(self, x, train=False, rng=None):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.scale = Tensor(np.ones(channels))
        self.shift = Tensor(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x, train=False, rng=None):
        return batch_norm(x, self.scale, self.shift, self.running_mean,
                          self.running_var, train, self.momentum, self.eps)


class Linear(Module):
    """Fully connected layer, weights and bias uniform in +-1/sqrt(fan_in)."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Tensor(rng.uniform(-bound, bound, (in_features, out_features)))
        self.bias = Tensor(rng.uniform(-bound, bound, (out_features,)))

    def forward(self, x, train=False, rng=None):
        return matmul(x, self.weight) + self.bias


# ----------------------------------------------------------------------
# DenseNet pieces
# ----------------------------------------------------------------------


class DenseLayer(Module):
    """BN-ReLU-1x1 conv (bottleneck) then BN-ReLU-3x3 conv, output concatenated onto the input."""

    def __init__(self, in_channels: int, growth: int, rng):
        super().__init__()
        bottleneck = 4 * growth
        self.norm1 = BatchNorm(in_channels)
        self.conv1 = Conv2d(in_channels, bottleneck, kernel=1, rng=rng)
        self.norm2 = BatchNorm(bottleneck)
        self.conv2 = Conv2d(bottleneck, growth, kernel=3, padding=1, rng=rng)

    def forward(self, x, train=False, rng=None):
        y = self.conv1(relu(self.norm1(x, train=train)), train=train)
        y = self.conv2(relu(self.norm2(y, train=train)), train=train)
        return concat([x, y], axis=1)


class DenseBlock(Module):
    """num_layers dense layers; output channels = in + num_layers * growth."""

    def __init__(self, in_channels: int, num_layers: int, growth: int, rng):
        super().__init__()
        if in_channels < 1 or growth < 1 or num_layers < 0:
            raise ValueError("dense block needs positive channels/growth and "
                             "a non-negative layer count")
        self.out_channels = in_channels + num_layers * growth
        self.layers = ModuleList(
            DenseLayer(in_channels + i * growth, growth, rng)
            for i in range(num_layers))

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer(x, train=train, rng=rng)
        return x


class Transition(Module):
    """BN-ReLU-1x1 conv down to floor(compression * in), then 2x2 stride-2 mean pool."""

    def __init__(self, in_channels: int, compression: float, rng):
        super().__init__()
        if not 0.0 < compression <= 1.0:
            raise ValueError(f"compression must be in (0, 1], got {compression}")
        self.out_channels = int(math.floor(compression * in_channels))
        self.norm = BatchNorm(in_channels)
        self.conv = Conv2d(in_channels, self.out_channels, kernel=1, rng=rng)

    def forward(self, x, train=False, rng=None):
        x = self.conv(relu(self.norm(x, train=train)), train=train)
        return avg_pool2d(x, kernel=2, stride=2)


class DenseNetBody(Module):
    def __init__(self, blocks, growth, stem_channels, compression, rng):
        super().__init__()
        self.stem_conv = Conv2d(3, stem_channels, kernel=7, stride=2, padding=3, rng=rng)
        self.stem_norm = BatchNorm(stem_channels)
        self.blocks = ModuleList()
        self.transitions = ModuleList()
        channels = stem_channels
        for i, num_layers in enumerate(blocks):
            block = DenseBlock(channels, num_layers, growth, rng)
            self.blocks.append(block)
            channels = block.out_channels
            if i < len(blocks) - 1:
                trans = Transition(channels, compression, rng)
                self.transitions.append(trans)
                channels = trans.out_channels
        self.final_norm = BatchNorm(channels)
        self.out_channels = channels

    def forward(self, x, train=False, rng=None):
        x = relu(self.stem_norm(self.stem_conv(x), train=train))
        x = max_pool2d(x, kernel=3, stride=2, padding=1)
        for i, block in enumerate(self.blocks):
            x = block(x, train=train, rng=rng)
            if i < len(self.transitions):
                x = self.transitions[i](x, train=train, rng=rng)
        return relu(self.final_norm(x, train=train))

    def spatial_chain(self, size: int) -> list[int]:
        """Spatial sizes after stem conv, stem pool, and each transition/block."""
        chain = [size]
        size = _conv_out_size(size, 7, 2, 3)
        chain.append(size)                      # stem conv
        size = _conv_out_size(size, 3, 2, 1)
        chain.append(size)                      # stem max pool
        for _ in self.transitions:
            size = _conv_out_size(size, 2, 2, 0)
            chain.append(size)                  # each transition halves
        chain.append(1)                         # global pool
        return chain


# ----------------------------------------------------------------------
# ResNet pieces
# ----------------------------------------------------------------------


class BasicBlock(Module):
    """Two 3x3 convs with identity shortcut; 1x1 projection when downsampling."""

    def __init__(self, in_channels: int, out_channels: int, stride: int, rng):
        super().__init__()
        self.conv1 = Conv2d(in_channels, out_channels, kernel=3, stride=stride,
                            padding=1, rng=rng)
        self.norm1 = BatchNorm(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, kernel=3, padding=1, rng=rng)
        self.norm2 = BatchNorm(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.proj_conv = Conv2d(in_channels, out_channels, kernel=1,
                                    stride=stride, rng=rng)
            self.proj_norm = BatchNorm(out_channels)
        else:
            object.__setattr__(self, "proj_conv", None)
            object.__setattr__(self, "proj_norm", None)

    def forward(self, x, train=False, rng=None):
        y = relu(self.norm1(self.conv1(x), train=train))
        y = self.norm2(self.conv2(y), train=train)
        if self.proj_conv is not None:
            x = self.proj_norm(self.proj_conv(x), train=train)
        return relu(y + x)


class ResNetBody(Module):
    def __init__(self, block_counts, rng):
        super().__init__()
        self.stem_conv = Conv2d(3, 64, kernel=7, stride=2, padding=3, rng=rng)
        self.stem_norm = BatchNorm(64)
        self.stages = ModuleList()
        channels = 64
        for stage, (width, count) in enumerate(zip((64, 128, 256, 512), block_counts)):
            blocks = ModuleList()
            for i in range(count):
                stride = 2 if (stage > 0 and i == 0) else 1
                blocks.append(BasicBlock(channels, width, stride, rng))
                channels = width
            self.stages.append(blocks)
        self.out_channels = channels

    def forward(self, x, train=False, rng=None):
        x = relu(self.stem_norm(self.stem_conv(x), train=train))
        x = max_pool2d(x, kernel=3, stride=2, padding=1)
        for stage in self.stages:
            for block in stage:
                x = block(x, train=train, rng=rng)
        return x


# ----------------------------------------------------------------------
# heads and the assembled classifier
# ----------------------------------------------------------------------


class StockLinearHead(Module):
    def __init__(self, feature_width: int, num_classes: int, rng):
        super().__init__()
        self.linear = Linear(feature_width, num_classes, rng)

    def forward(self, x, train=False, rng=None):
        return self.linear(global_avg_pool(x))


class ConcatPoolHead(Module):
    """Concatenated avg+max pooling into a two-layer perceptron."""

    def __init__(self, feature_width: int, num_classes: int, rng,
                 hidden: int = 512, drop1: float = 0.25, drop2: float = 0.5):
        super().__init__()
        self.drop1 = drop1
        self.drop2 = drop2
        self.norm1 = BatchNorm(2 * feature_width)
        self.linear1 = Linear(2 * feature_width, hidden, rng)
        self.norm2 = BatchNorm(hidden)
        self.linear2 = Linear(hidden, num_classes, rng)

    def forward(self, x, train=False, rng=None):
        pooled = concat([global_avg_pool(x), global_max_pool(x)], axis=1)
        y = self.norm1(pooled, train=train)
        y = dropout(y, self.drop1, train, rng)
        y = relu(self.linear1(y))
        y = self.norm2(y, train=train)
        y = dropout(y, self.drop2, train, rng)
        return self.linear2(y)


HEAD_KINDS = ("concat_pool", "stock_linear")


class Classifier(Module):
    """Backbone plus head, carrying the metadata checkpoints need."""

    def __init__(self, arch: str, num_classes: int, head_kind: str,
                 body: Module, head: Module):
        super().__init__()
        self.arch = arch
        self.num_classes = num_classes
        self.head_kind = head_kind
        self.body = body
        self.head = head

    def forward(self, x, train=False, rng=None):
        return self.head(self.body(x, train=train, rng=rng), train=train, rng=rng)

    def logits(self, images: np.ndarray) -> np.ndarray:
        """Eval-mode forward on a raw (N,C,H,W) array, no graph recorded."""
        with no_grad():
            return self.forward(Tensor(images), train=False).data


def _make_head(kind: str, feature_width: int, num_classes: int, rng,
               dropout_rates: tuple[float, float] = (0.25, 0.5)) -> Module:
    if kind == "concat_pool":
        return ConcatPoolHead(feature_width, num_classes, rng,
                              drop1=dropout_rates[0], drop2=dropout_rates[1])
    if kind == "stock_linear":
        return StockLinearHead(feature_width, num_classes, rng)
    raise ValueError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")


def build_densenet(num_classes: int, blocks=(6, 12, 24, 16), growth: int = 32,
                   stem_channels: int | None = None, compression: float = 0.5,
                   head: str = "concat_pool", seed: int = 0,
                   head_dropout: tuple[float, float] = (0.25, 0.5),
                   arch: str | None = None) -> Classifier:
    """Densely connected backbone + chosen head.

    Defaults give the 121-layer configuration: blocks (6,12,24,16), growth
    32, stem 64 channels, compression 0.5, bottleneck 4x growth.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if stem_channels is None:
        stem_channels = 2 * growth
    rng = np.random.default_rng(seed)
    body = DenseNetBody(blocks, growth, stem_channels, compression, rng)
    head_mod = _make_head(head, body.out_channels, num_classes, rng, head_dropout)
    if arch is None:
        arch = f"densenet-g{growth}-b{'.'.join(str(b) for b in blocks)}-s{stem_channels}"
    return Classifier(arch, num_classes, head, body, head_mod)


def build_densenet121(num_classes: int, head: str = "concat_pool", seed: int = 0,
                      head_dropout: tuple[float, float] = (0.25, 0.5)) -> Classifier:
    return build_densenet(num_classes, blocks=(6, 12, 24, 16), growth=32,
                          stem_channels=64, compression=0.5, head=head,
                          seed=seed, head_dropout=head_dropout, arch="densenet121")


def build_resnet(depth: int, num_classes: int, head: str = "concat_pool",
                 seed: int = 0,
                 head_dropout: tuple[float, float] = (0.25, 0.5)) -> Classifier:
    """Basic-block residual network, depth 18 or 34."""
    counts = {18: (2, 2, 2, 2), 34: (3, 4, 6, 3)}
    if depth not in counts:
        raise ValueError(f"unsupported resnet depth {depth}; expected 18 or 34")
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    body = ResNetBody(counts[depth], rng)
    head_mod = _make_head(head, body.out_channels, num_classes, rng, head_dropout)
    return Classifier(f"resnet{depth}", num_classes, head, body, head_mod)


_DENSENET_ARCH = re.compile(r"^densenet-g(\d+)-b([\d.]+)-s(\d+)$")


def build_model(arch: str, num_classes: int, head: str = "concat_pool",
                seed: int = 0,
                head_dropout: tuple[float, float] = (0.25, 0.5)) -> Classifier:
    """Build by architecture id ("densenet121", "resnet18", "resnet34",
    or parametric "densenet-g<growth>-b<l.l.l.l>-s<stem>")."""
    if arch == "densenet121":
        return build_densenet121(num_classes, head=head, seed=seed,
                                 head_dropout=head_dropout)
    if arch in ("resnet18", "resnet34"):
        return build_resnet(int(arch[6:]), num_classes, head=head, seed=seed,
                            head_dropout=head_dropout)
    m = _DENSENET_ARCH.match(arch)
    if m:
        growth = int(m.group(1))
        blocks = tuple(int(b) for b in m.group(2).split("."))
        return build_densenet(num_classes, blocks=blocks, growth=growth,
                              stem_channels=int(m.group(3)), head=head,
                              seed=seed, head_dropout=head_dropout)
    raise ValueError(f"unknown architecture {arch!r}")


def count_parameters(module: Module | dict) -> int:
    """Total element count over trainable parameters (buffers excluded)."""
    if isinstance(module, Module):
        store = module.parameter_store()
    else:
        store = module
    return sum(p.size for p in store.values() if p.requires_grad)


def parameter_breakdown(model: Module, depth: int = 2) -> list[tuple[str, int]]:
    """Per-group (name prefix, parameter count) rows summing to the total."""
    groups: dict[str, int] = {}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        prefix = ".".join(name.split(".")[:depth])
        groups[prefix] = groups.get(prefix, 0) + p.size
    return sorted(groups.items())


def freeze_backbone(model: Classifier) -> int:
    """Mark body parameters non-trainable (checkpoint fine-tuning helper)."""
    frozen = 0
    for p in model.body.parameters():
        p.requires_grad = False
        frozen += 1
    return frozen
