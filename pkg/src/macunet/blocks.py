"""Network building blocks.

* asymmetric convolution block (ACB): square, horizontal and vertical kernels
  summed, then one shared batch norm and a ReLU;
* its inference-time fold into a single 3x3 convolution plus per-channel affine;
* the channel attention block (CAB);
* the multi-scale aggregation node that builds each decoder feature map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, parameter

BRANCHES = ("square", "hor", "ver")
_BRANCH_SHAPE = {"square": (3, 3), "hor": (1, 3), "ver": (3, 1)}
_BRANCH_PAD = {"square": (1, 1), "hor": (0, 1), "ver": (1, 0)}


@dataclass
class ConvSpec:
    kernel: Tensor  # [out, in, kh, kw]
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.kernel.ndim != 4 or min(self.kernel.shape) <= 0:
            raise ShapeError(f"kernel must be 4-D with positive dims, got {self.kernel.shape}")
        if self.bias is not None and self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match kernel {self.kernel.shape}")

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.kernel, self.bias, self.stride, self.padding)

    def transposed(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.kernel, self.bias, self.stride, self.padding)


@dataclass
class BnParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                               training, self.eps, self.momentum)


@dataclass
class AcbParams:
    """Branch kernels plus the batch norm applied to their sum.

    ``hor``/``ver`` may be ``None``: a square-only block is the plain
    conv+BN+ReLU of the baseline, and one extra branch gives the
    horizontal- or vertical-kernel ablations.
    """

    square: ConvSpec
    bn: BnParams
    hor: Optional[ConvSpec] = None
    ver: Optional[ConvSpec] = None

    def __post_init__(self):
        shape = (self.square.out_channels, self.square.in_channels)
        for spec in self.branches():
            if (spec.out_channels, spec.in_channels) != shape or spec.stride != 1:
                raise ShapeError("ACB branches must share channels and use stride 1")
        if self.bn.channels != shape[0]:
            raise ShapeError("ACB batch norm width differs from out_channels")

    def branches(self) -> list[ConvSpec]:
        return [s for s in (self.square, self.hor, self.ver) if s is not None]

    @property
    def in_channels(self) -> int:
        return self.square.in_channels

    @property
    def out_channels(self) -> int:
        return self.square.out_channels


@dataclass
class FusedConv:
    """A folded ACB: ``relu(conv3x3(x) * scale + shift)``."""

    spec: ConvSpec
    scale: Tensor
    shift: Tensor

    @property
    def in_channels(self) -> int:
        return self.spec.in_channels

    @property
    def out_channels(self) -> int:
        return self.spec.out_channels


@dataclass
class CabParams:
    reduce: ConvSpec
    compress_avg: ConvSpec
    compress_max: ConvSpec
    restore_avg: ConvSpec
    restore_max: ConvSpec
    ratio: int = 16

    @property
    def in_channels(self) -> int:
        return self.reduce.in_channels

    @property
    def out_channels(self) -> int:
        return self.reduce.out_channels


ConvBlock = Union[AcbParams, FusedConv]


@dataclass
class AggregateParams:
    """Parameters of one decoder node below the bottom level.

    ``down[k]`` resamples encoder level ``k < level``; ``up[k]`` holds the
    transposed convolution and block for decoder level ``k > level``.
    """

    level: int
    levels: int
    down: dict[int, ConvBlock] = field(default_factory=dict)
    up: dict[int, tuple[ConvSpec, ConvBlock]] = field(default_factory=dict)
    cab: Optional[CabParams] = None


# -- initialization -------------------------------------------------------------------

def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                    dtype=np.float32) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape), dtype=dtype)


def init_conv(rng: np.random.Generator, cin: int, cout: int, kh: int, kw: int = None,
              bias: bool = True, stride: int = 1, padding=(0, 0), dtype=np.float32) -> ConvSpec:
    kw = kh if kw is None else kw
    kernel = kaiming_uniform(rng, (cout, cin, kh, kw), cin * kh * kw, dtype)
    b = parameter(np.zeros(cout), dtype=dtype) if bias else None
    return ConvSpec(kernel, b, stride, padding)


def init_upconv(rng: np.random.Generator, cin: int, cout: int, factor: int,
                dtype=np.float32) -> ConvSpec:
    """Transposed conv with kernel == stride == ``factor``.

    Each output pixel sees exactly ``cin`` inputs, which is the fan-in used.
    """
    kernel = kaiming_uniform(rng, (cout, cin, factor, factor), cin, dtype)
    return ConvSpec(kernel, parameter(np.zeros(cout), dtype=dtype), factor, (0, 0))


def init_bn(channels: int, dtype=np.float32) -> BnParams:
    return BnParams(parameter(np.ones(channels), dtype), parameter(np.zeros(channels), dtype),
                    np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def init_acb(rng: np.random.Generator, cin: int, cout: int,
             branches: Sequence[str] = BRANCHES, dtype=np.float32) -> AcbParams:
    if "square" not in branches:
        raise ValueError("every conv block needs the square branch")
    specs = {}
    for name in BRANCHES:
        if name in branches:
            kh, kw = _BRANCH_SHAPE[name]
            specs[name] = init_conv(rng, cin, cout, kh, kw, bias=False,
                                    padding=_BRANCH_PAD[name], dtype=dtype)
    return AcbParams(specs["square"], init_bn(cout, dtype), specs.get("hor"), specs.get("ver"))


def init_cab(rng: np.random.Generator, cin: int, cout: int, ratio: int = 16,
             dtype=np.float32) -> CabParams:
    if cout % ratio:
        raise ValueError(f"CAB width {cout} is not divisible by reduction ratio {ratio}")
    mid = cout // ratio
    return CabParams(
        reduce=init_conv(rng, cin, cout, 1, dtype=dtype),
        compress_avg=init_conv(rng, cout, mid, 1, dtype=dtype),
        compress_max=init_conv(rng, cout, mid, 1, dtype=dtype),
        restore_avg=init_conv(rng, mid, cout, 1, dtype=dtype),
        restore_max=init_conv(rng, mid, cout, 1, dtype=dtype),
        ratio=ratio,
    )


# -- forward ------------------------------------------------------------------------

def acb_forward(x: Tensor, p: AcbParams, training: bool) -> Tensor:
    if x.ndim != 4 or x.shape[1] != p.in_channels:
        raise ShapeError(f"ACB expects {p.in_channels} input channels, got shape {x.shape}")
    total = None
    for spec in p.branches():
        y = spec(x)
        total = y if total is None else ops.add(total, y)
    return ops.relu(p.bn(total, training))


def fused_forward(x: Tensor, f: FusedConv) -> Tensor:
    if x.ndim != 4 or x.shape[1] != f.in_channels:
        raise ShapeError(f"fused conv expects {f.in_channels} input channels, got shape {x.shape}")
    return ops.relu(ops.affine_channels(f.spec(x), f.scale, f.shift))


def block_forward(x: Tensor, p: ConvBlock, training: bool) -> Tensor:
    if isinstance(p, FusedConv):
        if training:
            raise ValueError("fused blocks are inference-only")
        return fused_forward(x, p)
    return acb_forward(x, p, training)


def cab_attention(fprime: Tensor, p: CabParams) -> Tensor:
    """Per-channel weights in (0, 1), shape ``[N, C, 1, 1]``."""
    a = p.restore_avg(ops.relu(p.compress_avg(ops.global_pool(fprime, "avg"))))
    m = p.restore_max(ops.relu(p.compress_max(ops.global_pool(fprime, "max"))))
    return ops.sigmoid(ops.add(a, m))


def cab_forward(f_cat: Tensor, p: CabParams) -> Tensor:
    if f_cat.ndim != 4 or f_cat.shape[1] != p.in_channels:
        raise ShapeError(f"CAB expects {p.in_channels} input channels, got shape {f_cat.shape}")
    fprime = p.reduce(f_cat)
    return ops.mul(cab_attention(fprime, p), fprime)


def aggregate_node(i: int, enc: Sequence[Tensor], dec: Mapping[int, Tensor],
                   params: Optional[AggregateParams], training: bool) -> Tensor:
    """Decoder feature map at level ``i`` (1-based, 1 = finest).

    ``enc[k-1]`` is the encoder output at level ``k``; ``dec[k]`` the decoder
    output at level ``k > i``. The bottom level returns its encoder map.
    """
    n_levels = len(enc)
    if not 1 <= i <= n_levels:
        raise ShapeError(f"level {i} outside 1..{n_levels}")
    if i == n_levels:
        return enc[-1]
    if params is None or params.cab is None:
        raise ValueError(f"level {i} needs aggregation parameters")
    target = enc[i - 1]
    side = target.shape[2:]
    parts: list[Tensor] = []
    for k in range(1, i):
        factor = 2 ** (i - k)
        parts.append(block_forward(ops.maxpool2d(enc[k - 1], factor), params.down[k], training))
    parts.append(target)
    for k in range(i + 1, n_levels + 1):
        if k not in dec:
            raise ShapeError(f"level {i} is missing decoder level {k}")
        upconv, block = params.up[k]
        parts.append(block_forward(upconv.transposed(dec[k]), block, training))
    for part in parts:
        if part.shape[2:] != side:
            raise ShapeError(f"branch of shape {part.shape} does not match level {i} side {side}")
    return cab_forward(ops.concat_channels(parts), params.cab)


# -- re-parameterization ----------------------------------------------------------------

def acb_fuse(p: AcbParams) -> FusedConv:
    """Fold the branches and inference-mode batch norm into one 3x3 conv."""
    bn = p.bn
    if not (np.all(np.isfinite(bn.running_mean)) and np.all(np.isfinite(bn.running_var))):
        raise ValueError("cannot fuse: non-finite running statistics")
    denom = bn.running_var.astype(np.float64) + bn.eps
    if np.any(denom <= 0):
        raise ValueError("cannot fuse: running_var + eps must be positive")
    dtype = p.square.kernel.dtype
    kernel = p.square.kernel.data.astype(np.float64).copy()
    if p.hor is not None:
        kernel[:, :, 1:2, :] += p.hor.kernel.data
    if p.ver is not None:
        kernel[:, :, :, 1:2] += p.ver.kernel.data
    bias = np.zeros(p.out_channels)
    for spec in p.branches():
        if spec.bias is not None:
            bias += spec.bias.data
    scale = bn.gamma.data.astype(np.float64) / np.sqrt(denom)
    shift = bn.beta.data - scale * bn.running_mean
    spec = ConvSpec(parameter(kernel, dtype), parameter(bias, dtype), 1, (1, 1))
    return FusedConv(spec, parameter(scale, dtype), parameter(shift, dtype))


def conv_macs(spec: ConvSpec, h_out: int, w_out: int) -> int:
    """Multiply-accumulates of one conv producing an ``h_out x w_out`` map (per sample)."""
    co, ci, kh, kw = spec.kernel.shape
    return co * ci * kh * kw * h_out * w_out


def block_macs(p: ConvBlock, h: int, w: int) -> int:
    if isinstance(p, FusedConv):
        return conv_macs(p.spec, h, w)
    return sum(conv_macs(s, h, w) for s in p.branches())
