"""Densely connected UNet construction.

Networks are declared by :class:`DenseUNetConfig` and assembled from three
building blocks: micro-blocks (BN-ReLU-1x1 conv bottleneck, BN-ReLU-3x3
conv emitting ``growth_rate`` channels), dense blocks (each micro-block
consumes the concatenation of the block input and every previous output),
and transition layers (1x1 conv compressing channels, then 2x2 in-plane
average pooling).  The decoder runs five upsampling stages; each upsamples,
adds a 1x1-projected long-range skip (encoder stage at the same
resolution), then applies a BN-ReLU-3x3 conv.  Skip sources, from deepest
to shallowest: dense block 3, dense block 2, dense block 1, the stem
convolution, and none for the final stage.

:func:`infer_shapes` propagates extents symbolically without allocating
parameters, and is also the validity check for input sizes: every in-plane
extent must survive five exact halvings (and the z extent two) so the
doubling decoder lands back on the input grid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from liverseg.autodiff import Tensor, add, concat_channels, relu
from liverseg.ops import BatchNormState, ConvSpec, avg_pool, batch_norm, ceil_div, conv, max_pool, upsample


class ShapeError(ValueError):
    """Raised when input extents cannot flow through the stride chain."""


@dataclass(frozen=True)
class DenseUNetConfig:
    dims: int
    growth_rate: int
    bottleneck_width: int
    block_repeats: tuple
    compression: float
    stem_channels: int
    upsample_channels: tuple
    num_classes: int = 3
    in_channels: int = 3
    unet_connections_enabled: bool = True

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ValueError(f"dims must be 2 or 3, got {self.dims}")
        if len(self.block_repeats) != 4:
            raise ValueError("block_repeats must have 4 entries")
        if len(self.upsample_channels) != 5:
            raise ValueError("upsample_channels must have 5 entries")
        if not (0 < self.compression <= 1):
            raise ValueError(f"compression must be in (0, 1], got {self.compression}")
        if min(self.growth_rate, self.bottleneck_width, self.stem_channels) <= 0:
            raise ValueError("channel widths must be positive")


PRESETS = {
    # canonical pair: 2D with k=48, 3D companion with k=32
    "2d167": DenseUNetConfig(
        dims=2,
        growth_rate=48,
        bottleneck_width=192,
        block_repeats=(6, 12, 36, 24),
        compression=0.5,
        stem_channels=96,
        upsample_channels=(768, 384, 96, 96, 64),
        num_classes=3,
        in_channels=3,
    ),
    "3d65": DenseUNetConfig(
        dims=3,
        growth_rate=32,
        bottleneck_width=128,
        block_repeats=(3, 4, 12, 8),
        compression=0.5,
        stem_channels=96,
        upsample_channels=(504, 224, 192, 96, 64),
        num_classes=3,
        in_channels=4,
    ),
    # desk-scale variants; fusion requires the two feature widths to agree
    "tiny2d": DenseUNetConfig(
        dims=2,
        growth_rate=4,
        bottleneck_width=16,
        block_repeats=(2, 2, 2, 2),
        compression=0.5,
        stem_channels=8,
        upsample_channels=(16, 16, 8, 8, 8),
        num_classes=3,
        in_channels=3,
    ),
    "tiny3d": DenseUNetConfig(
        dims=3,
        growth_rate=4,
        bottleneck_width=16,
        block_repeats=(2, 2, 2, 2),
        compression=0.5,
        stem_channels=8,
        upsample_channels=(16, 16, 8, 8, 8),
        num_classes=3,
        in_channels=4,
    ),
}
# coarse localizer: liver-vs-rest
PRESETS["coarse2d"] = replace(PRESETS["tiny2d"], num_classes=2)


class ShapeRow(NamedTuple):
    name: str
    spatial: tuple
    channels: int


class ShapeTable:
    """Ordered (stage name, spatial extents, channels) rows of one network."""

    def __init__(self, rows):
        self.rows = list(rows)

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, name):
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def cells(self):
        return [(r.spatial, r.channels) for r in self.rows]

    def __repr__(self):
        body = "\n".join(f"  {r.name:28s} {str(r.spatial):18s} {r.channels}" for r in self.rows)
        return f"ShapeTable(\n{body}\n)"


def encoder_channels(cfg):
    """Channel counts along the encoder: stem, block/transition alternation."""
    trace = [cfg.stem_channels]
    ch = cfg.stem_channels
    for i, d in enumerate(cfg.block_repeats):
        ch = ch + d * cfg.growth_rate
        trace.append(ch)
        if i < 3:
            ch = int(ch * cfg.compression)
            trace.append(ch)
    return trace


def _halve(extents, strides, stage, check_even):
    out = tuple(ceil_div(n, s) for n, s in zip(extents, strides))
    if check_even:
        for n, s in zip(extents, strides):
            if s > 1 and n % s != 0:
                raise ShapeError(
                    f"{stage}: extent {n} is not divisible by stride {s} "
                    f"(input {extents} cannot round-trip the stride chain)"
                )
    return out


def infer_shapes(cfg, input_spatial, strict=True):
    """Symbolically propagate extents through every stage.

    With ``strict`` (the default) any extent that would break the exact
    encoder-halving / decoder-doubling correspondence raises
    :class:`ShapeError` naming the offending stage.
    """
    input_spatial = tuple(input_spatial)
    if len(input_spatial) != cfg.dims:
        raise ShapeError(f"expected {cfg.dims} spatial extents, got {input_spatial}")
    stride2 = (2,) * cfg.dims
    inplane = (2, 2, 1) if cfg.dims == 3 else (2, 2)
    rows = []
    ch = cfg.stem_channels
    sp = _halve(input_spatial, stride2, "convolution 1", strict)
    rows.append(ShapeRow("convolution 1", sp, ch))
    sp = _halve(sp, stride2, "pooling", strict)
    rows.append(ShapeRow("pooling", sp, ch))
    skip_extents = {}
    for i, d in enumerate(cfg.block_repeats, start=1):
        ch = ch + d * cfg.growth_rate
        rows.append(ShapeRow(f"dense block {i}", sp, ch))
        skip_extents[f"dense block {i}"] = sp
        if i < 4:
            ch = int(ch * cfg.compression)
            rows.append(ShapeRow(f"transition layer {i} (conv)", sp, ch))
            sp = _halve(sp, inplane, f"transition layer {i} (pool)", strict)
            rows.append(ShapeRow(f"transition layer {i} (pool)", sp, ch))

    up_factors = _upsample_factors(cfg.dims)
    skip_names = ["dense block 3", "dense block 2", "dense block 1", "convolution 1", None]
    for i in range(5):
        sp = tuple(n * f for n, f in zip(sp, up_factors[i]))
        stage = f"upsampling layer {i + 1}"
        src = skip_names[i]
        if strict and src is not None:
            want = skip_extents.get(src) or rows[0].spatial
            if src == "convolution 1":
                want = rows[0].spatial
            if sp != want:
                raise ShapeError(
                    f"{stage}: decoder extents {sp} do not match skip source "
                    f"'{src}' extents {want}"
                )
        ch = cfg.upsample_channels[i]
        rows.append(ShapeRow(stage, sp, ch))
    if strict and sp != input_spatial:
        raise ShapeError(f"upsampling layer 5: output extents {sp} != input {input_spatial}")
    rows.append(ShapeRow("convolution 2", sp, cfg.num_classes))
    return ShapeTable(rows)


def _upsample_factors(dims):
    if dims == 2:
        return [(2, 2)] * 5
    # in-plane only until the last two stages restore z
    return [(2, 2, 1), (2, 2, 1), (2, 2, 1), (2, 2, 2), (2, 2, 2)]


class ParameterSet:
    """Named parameter tensors plus non-learnable buffers (BN statistics)."""

    def __init__(self):
        self._tensors = {}
        self._buffers = {}

    def add(self, name, tensor):
        if name in self._tensors or name in self._buffers:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.name = name
        self._tensors[name] = tensor
        return tensor

    def add_buffer(self, name, array):
        if name in self._tensors or name in self._buffers:
            raise ValueError(f"duplicate buffer name {name!r}")
        self._buffers[name] = array
        return array

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return list(self._tensors.values())

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def trainable(self):
        return [(n, t) for n, t in self._tensors.items() if t.requires_grad]

    def select(self, predicate):
        return [(n, t) for n, t in self._tensors.items() if predicate(n)]

    def freeze(self, predicate=None):
        for n, t in self._tensors.items():
            if predicate is None or predicate(n):
                t.requires_grad = False
                t.grad = None

    def unfreeze(self, predicate=None):
        for n, t in self._tensors.items():
            if predicate is None or predicate(n):
                t.requires_grad = True
                t._ensure_grad()

    def frozen_names(self):
        return {n for n, t in self._tensors.items() if not t.requires_grad}

    def zero_grads(self):
        for t in self._tensors.values():
            t.zero_grad()

    def num_values(self):
        return sum(t.data.size for t in self._tensors.values())

    def arrays(self):
        """Everything that must persist: parameter values and buffers."""
        out = {n: t.data for n, t in self._tensors.items()}
        out.update({n: b for n, b in self._buffers.items()})
        return out

    def load_arrays(self, arrays, strict=True):
        """Assign values in place; shapes must match exactly."""
        missing = []
        for name, target in list(self._tensors.items()) + list(self._buffers.items()):
            data = target.data if isinstance(target, Tensor) else target
            if name not in arrays:
                missing.append(name)
                continue
            src = arrays[name]
            if tuple(src.shape) != tuple(data.shape):
                raise ValueError(
                    f"parameter {name!r}: checkpoint shape {tuple(src.shape)} != model {tuple(data.shape)}"
                )
            data[...] = src.astype(data.dtype, copy=False)
        unknown = set(arrays) - set(self._tensors) - set(self._buffers)
        if strict and (missing or unknown):
            raise ValueError(
                f"parameter mismatch: missing {sorted(missing)[:5]}, unknown {sorted(unknown)[:5]}"
            )
        return missing


class ConvLayer:
    def __init__(self, params, name, dims, in_ch, out_ch, kernel, stride, rng, dtype):
        kernel = tuple(kernel)
        fan_in = in_ch * int(np.prod(kernel))
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch) + kernel)
        self.w = params.add(f"{name}/w", Tensor(w.astype(dtype), requires_grad=True))
        self.b = params.add(f"{name}/b", Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True))
        self.spec = ConvSpec(dims, kernel, tuple(stride), out_ch)

    def __call__(self, x):
        return conv(x, self.spec, self.w, self.b)


class BNLayer:
    def __init__(self, params, name, channels, dtype, epsilon, momentum):
        self.state = BatchNormState.create(channels, dtype=dtype, epsilon=epsilon, momentum=momentum)
        params.add(f"{name}/gamma", self.state.gamma)
        params.add(f"{name}/beta", self.state.beta)
        params.add_buffer(f"{name}/running_mean", self.state.running_mean)
        params.add_buffer(f"{name}/running_var", self.state.running_var)

    def __call__(self, x, train):
        return batch_norm(x, self.state, train)


class MicroBlock:
    """BN-ReLU-1x1 bottleneck then BN-ReLU-3x3 emitting growth_rate channels."""

    def __init__(self, params, name, cfg, in_ch, rng, dtype, bn_epsilon, bn_momentum):
        d = cfg.dims
        one = (1,) * d
        three = (3,) * d
        self.bn1 = BNLayer(params, f"{name}/bn1", in_ch, dtype, bn_epsilon, bn_momentum)
        self.conv1 = ConvLayer(params, f"{name}/conv1", d, in_ch, cfg.bottleneck_width, one, one, rng, dtype)
        self.bn2 = BNLayer(params, f"{name}/bn2", cfg.bottleneck_width, dtype, bn_epsilon, bn_momentum)
        self.conv2 = ConvLayer(params, f"{name}/conv2", d, cfg.bottleneck_width, cfg.growth_rate, three, one, rng, dtype)
        self.out_channels = cfg.growth_rate

    def __call__(self, x, train):
        h = self.conv1(relu(self.bn1(x, train)))
        h = self.conv2(relu(self.bn2(h, train)))
        return h


class DenseBlock:
    """Micro-block i consumes the concatenation of the input and outputs 0..i-1."""

    def __init__(self, params, name, cfg, in_ch, repeats, rng, dtype, bn_epsilon, bn_momentum):
        self.micros = []
        ch = in_ch
        for i in range(repeats):
            mb = MicroBlock(params, f"{name}/micro{i}", cfg, ch, rng, dtype, bn_epsilon, bn_momentum)
            self.micros.append(mb)
            ch += cfg.growth_rate
        self.out_channels = ch

    def __call__(self, x, train):
        feats = x
        for mb in self.micros:
            feats = concat_channels([feats, mb(feats, train)])
        return feats


class Transition:
    """BN-ReLU-1x1 conv compressing channels, then in-plane average pooling."""

    def __init__(self, params, name, cfg, in_ch, rng, dtype, bn_epsilon, bn_momentum):
        d = cfg.dims
        self.out_channels = int(in_ch * cfg.compression)
        self.bn = BNLayer(params, f"{name}/bn", in_ch, dtype, bn_epsilon, bn_momentum)
        self.conv = ConvLayer(params, f"{name}/conv", d, in_ch, self.out_channels, (1,) * d, (1,) * d, rng, dtype)
        self.window = (2, 2, 1) if d == 3 else (2, 2)

    def __call__(self, x, train):
        h = self.conv(relu(self.bn(x, train)))
        return avg_pool(h, self.window, self.window)


class UpStage:
    """Upsample, add the 1x1-projected skip, then BN-ReLU-3x3 conv."""

    def __init__(self, params, name, cfg, in_ch, skip_ch, out_ch, factors, rng, dtype, bn_epsilon, bn_momentum):
        d = cfg.dims
        self.factors = factors
        self.project = None
        if skip_ch is not None:
            self.project = ConvLayer(params, f"{name}/skip_proj", d, skip_ch, in_ch, (1,) * d, (1,) * d, rng, dtype)
        self.bn = BNLayer(params, f"{name}/bn", in_ch, dtype, bn_epsilon, bn_momentum)
        self.conv = ConvLayer(params, f"{name}/conv", d, in_ch, out_ch, (3,) * d, (1,) * d, rng, dtype)

    def __call__(self, x, skip, train, use_skips):
        h = upsample(x, self.factors)
        if self.project is not None and use_skips and skip is not None:
            h = add(h, self.project(skip))
        return self.conv(relu(self.bn(h, train)))


class DenseUNet:
    """Encoder-decoder network per the declarative config.

    ``forward`` returns ``(feature, logits)`` where ``feature`` is the
    64-channel (canonically) pre-classifier map from the last upsampling
    stage; ``logits`` is ``None`` when built with ``with_classifier=False``
    (the volumetric branch of the hybrid model uses only the feature).
    """

    def __init__(self, cfg, params=None, prefix="", seed=0, dtype=np.float32,
                 with_classifier=True, bn_epsilon=1e-5, bn_momentum=0.99):
        self.cfg = cfg
        self.dtype = dtype
        self.params = params if params is not None else ParameterSet()
        self.prefix = prefix
        rng = np.random.default_rng(seed)
        p, d = self.params, cfg.dims
        bn_args = (bn_epsilon, bn_momentum)

        self.stem = ConvLayer(p, prefix + "stem/conv", d, cfg.in_channels, cfg.stem_channels, (7,) * d, (2,) * d, rng, dtype)
        self.pool_window = (3,) * d
        ch = cfg.stem_channels
        self.blocks = []
        self.transitions = []
        for i, reps in enumerate(cfg.block_repeats, start=1):
            blk = DenseBlock(p, f"{prefix}block{i}", cfg, ch, reps, rng, dtype, *bn_args)
            self.blocks.append(blk)
            ch = blk.out_channels
            if i < 4:
                tr = Transition(p, f"{prefix}transition{i}", cfg, ch, rng, dtype, *bn_args)
                self.transitions.append(tr)
                ch = tr.out_channels

        factors = _upsample_factors(d)
        block_chs = [b.out_channels for b in self.blocks]
        skip_chs = [block_chs[2], block_chs[1], block_chs[0], cfg.stem_channels, None]
        self.upstages = []
        for i in range(5):
            out_ch = cfg.upsample_channels[i]
            stage = UpStage(p, f"{prefix}up{i + 1}", cfg, ch, skip_chs[i], out_ch, factors[i], rng, dtype, *bn_args)
            self.upstages.append(stage)
            ch = out_ch

        self.classifier_bn = None
        self.classifier = None
        if with_classifier:
            self.classifier_bn = BNLayer(p, prefix + "cls/bn", ch, dtype, *bn_args)
            self.classifier = ConvLayer(p, prefix + "cls/conv", d, ch, cfg.num_classes, (1,) * d, (1,) * d, rng, dtype)
        self._checked_extents = set()

    def check_input(self, spatial):
        spatial = tuple(spatial)
        if spatial not in self._checked_extents:
            infer_shapes(self.cfg, spatial)  # raises ShapeError on a bad size
            self._checked_extents.add(spatial)

    def forward(self, x, train=False, use_skips=None):
        if use_skips is None:
            use_skips = self.cfg.unet_connections_enabled
        if x.data.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {x.data.shape[1]}")
        self.check_input(x.data.shape[2:])

        h = self.stem(x)
        stem_out = h
        h = max_pool(h, self.pool_window, (2,) * self.cfg.dims)
        block_outs = []
        for i, blk in enumerate(self.blocks):
            h = blk(h, train)
            block_outs.append(h)
            if i < 3:
                h = self.transitions[i](h, train)

        skips = [block_outs[2], block_outs[1], block_outs[0], stem_out, None]
        for stage, skip in zip(self.upstages, skips):
            h = stage(h, skip, train, use_skips)

        feature = h
        logits = None
        if self.classifier is not None:
            logits = self.classifier(relu(self.classifier_bn(feature, train)))
        return feature, logits

    def parameter_names(self):
        return [n for n in self.params.names() if n.startswith(self.prefix)]


def build_micro_block(in_ch, cfg, params=None, name="micro", seed=0, dtype=np.float32):
    params = params if params is not None else ParameterSet()
    rng = np.random.default_rng(seed)
    return MicroBlock(params, name, cfg, in_ch, rng, dtype, 1e-5, 0.99)


def build_dense_block(in_ch, repeats, cfg, params=None, name="block", seed=0, dtype=np.float32):
    params = params if params is not None else ParameterSet()
    rng = np.random.default_rng(seed)
    blk = DenseBlock(params, name, cfg, in_ch, repeats, rng, dtype, 1e-5, 0.99)
    return blk, blk.out_channels


def build_transition(in_ch, cfg, params=None, name="transition", seed=0, dtype=np.float32):
    params = params if params is not None else ParameterSet()
    rng = np.random.default_rng(seed)
    tr = Transition(params, name, cfg, in_ch, rng, dtype, 1e-5, 0.99)
    return tr, tr.out_channels


def build_denseunet(cfg, seed=0, dtype=np.float32, **kwargs):
    return DenseUNet(cfg, seed=seed, dtype=dtype, **kwargs)


def import_parameters(net, arrays, strict=False):
    """Inject externally trained values by stage name (pretrained weights hook)."""
    return net.params.load_arrays(arrays, strict=strict)
