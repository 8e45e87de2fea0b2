"""MACU-Net, the baseline U-Net, and the ablation variants.

Variants differ along two axes:

========  ======================  =====================
variant   conv block branches     skip connections
========  ======================  =====================
unet      3x3                     plain U-Net concat
unet_h    3x3 + 1x3               plain U-Net concat
unet_v    3x3 + 3x1               plain U-Net concat
acu       3x3 + 1x3 + 3x1         plain U-Net concat
mu        3x3                     multi-scale + CAB
macu      3x3 + 1x3 + 3x1         multi-scale + CAB
========  ======================  =====================
"""
from __future__ import annotations

import copy
import dataclasses
from collections import OrderedDict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Optional, Union

import numpy as np

from . import ops
from .blocks import (AcbParams, AggregateParams, BnParams, CabParams, ConvBlock, ConvSpec,
                     FusedConv, acb_fuse, aggregate_node, block_forward, block_macs, conv_macs,
                     init_acb, init_cab, init_conv, init_upconv)
from .tensor import ShapeError, Tensor, no_grad

VARIANTS = ("macu", "unet", "unet_h", "unet_v", "acu", "mu")
_BRANCHES = {
    "macu": ("square", "hor", "ver"),
    "acu": ("square", "hor", "ver"),
    "unet": ("square",),
    "mu": ("square",),
    "unet_h": ("square", "hor"),
    "unet_v": ("square", "ver"),
}
MULTISCALE = ("macu", "mu")


@dataclass
class NetworkConfig:
    variant: str = "macu"
    levels: int = 5
    base_width: int = 16
    classes: int = 6
    in_channels: int = 3
    cab_ratio: int = 16

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.levels < 2:
            raise ValueError("need at least two levels")
        if self.base_width < 1 or self.classes < 2 or self.in_channels < 1:
            raise ValueError("base_width, classes and in_channels must be positive (classes >= 2)")
        if self.multiscale:
            for d in self.decoder_widths[:-1]:
                if d % self.cab_ratio:
                    raise ValueError(f"decoder width {d} not divisible by cab_ratio {self.cab_ratio}")

    @property
    def multiscale(self) -> bool:
        return self.variant in MULTISCALE

    @property
    def branches(self) -> tuple[str, ...]:
        return _BRANCHES[self.variant]

    @property
    def widths(self) -> list[int]:
        """Encoder width per level, finest first."""
        return [self.base_width * 2 ** i for i in range(self.levels)]

    @property
    def decoder_widths(self) -> list[int]:
        c = self.widths
        if self.multiscale:
            return [2 * w for w in c[:-1]] + [c[-1]]
        return list(c)

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)


@dataclass
class UnetDecoderParams:
    up: ConvSpec
    conv1: ConvBlock
    conv2: ConvBlock


@dataclass
class Network:
    cfg: NetworkConfig
    encoder: list[list[ConvBlock]]
    head: ConvSpec
    nodes: dict[int, AggregateParams] = field(default_factory=dict)
    decoder: dict[int, UnetDecoderParams] = field(default_factory=dict)
    fused: bool = False

    # -- naming -------------------------------------------------------------------
    def named_modules(self) -> Iterator[tuple[str, object]]:
        """Top-level blocks in a fixed order."""
        for i, level in enumerate(self.encoder, start=1):
            for j, block in enumerate(level, start=1):
                yield f"enc{i}.conv{j}", block
        for i in sorted(self.nodes, reverse=True):
            node = self.nodes[i]
            for k in sorted(node.down):
                yield f"dec{i}.down{k}", node.down[k]
            for k in sorted(node.up):
                upconv, block = node.up[k]
                yield f"dec{i}.up{k}.tconv", upconv
                yield f"dec{i}.up{k}.block", block
            yield f"dec{i}.cab", node.cab
        for i in sorted(self.decoder, reverse=True):
            d = self.decoder[i]
            yield f"dec{i}.up", d.up
            yield f"dec{i}.conv1", d.conv1
            yield f"dec{i}.conv2", d.conv2
        yield "head", self.head

    def named_tensors(self) -> Iterator[tuple[str, Union[Tensor, np.ndarray]]]:
        """Parameters (Tensor) and running statistics (ndarray) with dotted names."""
        for name, mod in self.named_modules():
            yield from _walk(mod, name)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self.named_tensors():
            if isinstance(t, Tensor):
                yield name, t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data if isinstance(t, Tensor) else t)
                           for n, t in self.named_tensors())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, t in own.items():
            arr = state[name]
            target = t.data if isinstance(t, Tensor) else t
            if target.shape != arr.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {target.shape}")
            target[...] = arr

    @property
    def dtype(self):
        return self.head.kernel.dtype


def _walk(obj, prefix: str):
    if isinstance(obj, (Tensor, np.ndarray)):
        yield prefix, obj
        return
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if value is None or isinstance(value, (int, float, str, tuple)):
            continue
        yield from _walk(value, f"{prefix}.{f.name}")


# -- construction ---------------------------------------------------------------------

def build_network(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> Network:
    """Build and initialize a network; parameters depend only on ``(cfg, seed, dtype)``."""
    rng = np.random.default_rng(seed)
    c = cfg.widths
    d = cfg.decoder_widths
    n = cfg.levels

    def block(cin: int, cout: int) -> AcbParams:
        return init_acb(rng, cin, cout, cfg.branches, dtype)

    encoder = []
    cin = cfg.in_channels
    for width in c:
        encoder.append([block(cin, width), block(width, width)])
        cin = width

    nodes: dict[int, AggregateParams] = {}
    decoder: dict[int, UnetDecoderParams] = {}
    if cfg.multiscale:
        for i in range(n - 1, 0, -1):
            node = AggregateParams(level=i, levels=n)
            for k in range(1, i):
                node.down[k] = block(c[k - 1], c[i - 1])
            for k in range(i + 1, n + 1):
                upconv = init_upconv(rng, d[k - 1], c[i - 1], 2 ** (k - i), dtype)
                node.up[k] = (upconv, block(c[i - 1], c[i - 1]))
            node.cab = init_cab(rng, n * c[i - 1], d[i - 1], cfg.cab_ratio, dtype)
            nodes[i] = node
    else:
        for i in range(n - 1, 0, -1):
            decoder[i] = UnetDecoderParams(
                up=init_upconv(rng, c[i], c[i - 1], 2, dtype),
                conv1=block(2 * c[i - 1], c[i - 1]),
                conv2=block(c[i - 1], c[i - 1]),
            )
    head = init_conv(rng, d[0], cfg.classes, 1, bias=True, dtype=dtype)
    return Network(cfg, encoder, head, nodes, decoder)


# -- forward --------------------------------------------------------------------------

def _forward(net: Network, x: Tensor, training: bool) -> Tensor:
    cfg = net.cfg
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected [N,{cfg.in_channels},H,W] input, got {x.shape}")
    h, w = x.shape[2:]
    if h % cfg.divisor or w % cfg.divisor or h == 0 or w == 0:
        raise ShapeError(f"input {h}x{w} not divisible by {cfg.divisor}")
    enc: list[Tensor] = []
    y = x
    for i, (b1, b2) in enumerate(net.encoder):
        if i:
            y = ops.maxpool2d(y, 2)
        y = block_forward(block_forward(y, b1, training), b2, training)
        enc.append(y)
    if cfg.multiscale:
        dec = {cfg.levels: enc[-1]}
        for i in range(cfg.levels - 1, 0, -1):
            dec[i] = aggregate_node(i, enc, dec, net.nodes[i], training)
        top = dec[1]
    else:
        top = enc[-1]
        for i in range(cfg.levels - 1, 0, -1):
            p = net.decoder[i]
            up = p.up.transposed(top)
            top = ops.concat_channels([enc[i - 1], up])
            top = block_forward(block_forward(top, p.conv1, training), p.conv2, training)
    return net.head(top)


def forward_logits(net: Network, x: Tensor, training: bool = False, fused: bool = False) -> Tensor:
    """Class logits ``[N, K, H, W]``.

    ``fused=True`` evaluates the re-parameterized network, folding it on the
    fly if ``net`` is not fused yet; it is inference-only.
    """
    if fused and training:
        raise ValueError("fused evaluation is inference-only")
    if training and net.fused:
        raise ValueError("a fused network cannot be trained")
    if fused and not net.fused:
        net = fuse_network(net)
    return _forward(net, x, training)


def predict(net: Network, x: Union[Tensor, np.ndarray], fused: bool = False) -> np.ndarray:
    """Per-pixel argmax class map ``[N, H, W]`` in inference mode."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=net.dtype))
    with no_grad():
        logits = forward_logits(net, x, training=False, fused=fused)
    return logits.data.argmax(axis=1)


# -- fusion and accounting ------------------------------------------------------------

def fuse_network(net: Network) -> Network:
    """Copy of ``net`` with every conv block folded into a 3x3 conv + affine."""
    if net.fused:
        return net
    out = copy.deepcopy(net)

    def fold(b):
        return acb_fuse(b) if isinstance(b, AcbParams) else b

    out.encoder = [[fold(b) for b in level] for level in out.encoder]
    for node in out.nodes.values():
        node.down = {k: fold(b) for k, b in node.down.items()}
        node.up = {k: (u, fold(b)) for k, (u, b) in node.up.items()}
    for p in out.decoder.values():
        p.conv1, p.conv2 = fold(p.conv1), fold(p.conv2)
    out.fused = True
    return out


def count_params(net: Network) -> tuple[int, "OrderedDict[str, int]"]:
    """Trainable scalar count (running statistics excluded) and per-module breakdown."""
    table: OrderedDict[str, int] = OrderedDict()
    for name, mod in net.named_modules():
        table[name] = sum(t.data.size for _, t in _walk(mod, name) if isinstance(t, Tensor))
    return sum(table.values()), table


@dataclass
class MacEntry:
    name: str
    macs: int
    fused_macs: Optional[int] = None  # set for conv blocks

    @property
    def ratio(self) -> Optional[Fraction]:
        if self.fused_macs is None:
            return None
        return Fraction(self.fused_macs, self.macs)


def mac_report(net: Network, height: int, width: Optional[int] = None) -> list[MacEntry]:
    """Analytic per-sample multiply-accumulate counts for every conv in ``net``."""
    width = height if width is None else width
    cfg = net.cfg

    def side(level: int) -> tuple[int, int]:
        f = 2 ** (level - 1)
        return height // f, width // f

    def block_entry(name: str, b: ConvBlock, level: int) -> MacEntry:
        h, w = side(level)
        if isinstance(b, FusedConv):
            m = block_macs(b, h, w)
            return MacEntry(name, m, m)
        return MacEntry(name, block_macs(b, h, w), b.out_channels * b.in_channels * 9 * h * w)

    entries = []
    for i, level in enumerate(net.encoder, start=1):
        for j, b in enumerate(level, start=1):
            entries.append(block_entry(f"enc{i}.conv{j}", b, i))
    for i in sorted(net.nodes, reverse=True):
        node = net.nodes[i]
        for k in sorted(node.down):
            entries.append(block_entry(f"dec{i}.down{k}", node.down[k], i))
        for k in sorted(node.up):
            upconv, b = node.up[k]
            entries.append(MacEntry(f"dec{i}.up{k}.tconv", conv_macs(upconv, *side(k))))
            entries.append(block_entry(f"dec{i}.up{k}.block", b, i))
        cab = node.cab
        entries.append(MacEntry(f"dec{i}.cab.reduce", conv_macs(cab.reduce, *side(i))))
        squeeze = sum(conv_macs(s, 1, 1) for s in (cab.compress_avg, cab.compress_max,
                                                   cab.restore_avg, cab.restore_max))
        entries.append(MacEntry(f"dec{i}.cab.squeeze", squeeze))
    for i in sorted(net.decoder, reverse=True):
        p = net.decoder[i]
        entries.append(MacEntry(f"dec{i}.up", conv_macs(p.up, *side(i + 1))))
        entries.append(block_entry(f"dec{i}.conv1", p.conv1, i))
        entries.append(block_entry(f"dec{i}.conv2", p.conv2, i))
    entries.append(MacEntry("head", conv_macs(net.head, height, width)))
    return entries


def total_macs(entries: list[MacEntry], fused: bool) -> int:
    return sum(e.fused_macs if (fused and e.fused_macs is not None) else e.macs for e in entries)


def cast_network(net: Network, dtype) -> Network:
    """Copy of ``net`` with every array converted to ``dtype``."""
    out = copy.deepcopy(net)
    for _, t in out.named_tensors():
        if isinstance(t, Tensor):
            t.data = t.data.astype(dtype)
    for mod in _iter_bn(out):
        mod.running_mean = mod.running_mean.astype(dtype)
        mod.running_var = mod.running_var.astype(dtype)
    return out


def _iter_bn(net: Network) -> Iterator[BnParams]:
    for _, mod in net.named_modules():
        if isinstance(mod, AcbParams):
            yield mod.bn


__all__ = [
    "VARIANTS", "NetworkConfig", "Network", "build_network", "forward_logits", "predict",
    "fuse_network", "count_params", "mac_report", "total_macs", "MacEntry", "cast_network",
    "CabParams",
]
