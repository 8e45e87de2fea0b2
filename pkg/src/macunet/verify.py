"""Float64 finite-difference checks of every differentiable piece of the engine."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np

from . import blocks, ops
from .gradcheck import grad_check
from .models import NetworkConfig, build_network, forward_logits
from .tensor import Tensor

F64 = np.float64
PRIMITIVE_TOL = 1e-4
NETWORK_TOL = 1e-3
STEP = 1e-5
# coordinates probed per tensor for the larger composites
SAMPLED = 24


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max_rel_error={self.error:.3e} tol={self.tol:.0e}"


def _rand(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.uniform(-1.0, 1.0, size=shape).astype(F64))


def _probe(y: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(y * weights)``; random weights keep every output in play."""
    return ops.sum_all(ops.mul(y, Tensor(weights)))


def _scalar_check(fn: Callable[[], Tensor], wrt, rng, h, **kw) -> float:
    w_cache: dict[str, np.ndarray] = {}

    def f() -> Tensor:
        y = fn()
        if "w" not in w_cache:
            w_cache["w"] = rng.uniform(-1.0, 1.0, size=y.shape)
        return _probe(y, w_cache["w"])

    return grad_check(f, wrt, h, **kw)


def _f64_acb(rng: np.random.Generator, cin: int, cout: int) -> blocks.AcbParams:
    p = blocks.init_acb(rng, cin, cout, dtype=F64)
    p.bn.gamma.data[:] = rng.uniform(0.5, 1.5, cout)
    p.bn.beta.data[:] = rng.uniform(-0.5, 0.5, cout)
    return p


def _acb_tensors(p: blocks.AcbParams) -> list[Tensor]:
    return [s.kernel for s in p.branches()] + [p.bn.gamma, p.bn.beta]


def _cab_tensors(p: blocks.CabParams) -> list[Tensor]:
    out = []
    for spec in (p.reduce, p.compress_avg, p.compress_max, p.restore_avg, p.restore_max):
        out += [spec.kernel, spec.bias]
    return out


def primitive_checks(seed: int = 0, h: float = STEP) -> Iterator[tuple[str, Callable[[], float]]]:
    rng = np.random.default_rng(seed)
    x = _rand(rng, 2, 3, 8, 8)
    w3 = _rand(rng, 4, 3, 3, 3)
    b4 = _rand(rng, 4)

    yield "conv2d", lambda: _scalar_check(lambda: ops.conv2d(x, w3, b4, 1, 1), [x, w3, b4], rng, h)
    w13 = _rand(rng, 4, 3, 1, 3)
    yield "conv2d_1x3", lambda: _scalar_check(lambda: ops.conv2d(x, w13, None, 1, (0, 1)), [x, w13], rng, h)
    yield "conv2d_stride2", lambda: _scalar_check(lambda: ops.conv2d(x, w3, b4, 2, 1), [x, w3, b4], rng, h)
    wt = _rand(rng, 4, 3, 2, 2)
    yield "conv_transpose2d", lambda: _scalar_check(
        lambda: ops.conv_transpose2d(x, wt, b4, 2), [x, wt, b4], rng, h)
    wt3 = _rand(rng, 4, 3, 3, 3)
    yield "conv_transpose2d_overlap", lambda: _scalar_check(
        lambda: ops.conv_transpose2d(x, wt3, b4, 2, 1), [x, wt3, b4], rng, h)
    yield "maxpool2d", lambda: _scalar_check(lambda: ops.maxpool2d(x, 2), [x], rng, h)
    yield "global_avg_pool", lambda: _scalar_check(lambda: ops.global_pool(x, "avg"), [x], rng, h)
    yield "global_max_pool", lambda: _scalar_check(lambda: ops.global_pool(x, "max"), [x], rng, h)
    g, b = _rand(rng, 3), _rand(rng, 3)
    rm, rv = rng.uniform(-0.5, 0.5, 3), rng.uniform(0.5, 1.5, 3)
    yield "batchnorm2d_train", lambda: _scalar_check(
        lambda: ops.batchnorm2d(x, g, b, rm.copy(), rv.copy(), True), [x, g, b], rng, h)
    yield "batchnorm2d_eval", lambda: _scalar_check(
        lambda: ops.batchnorm2d(x, g, b, rm, rv, False), [x, g, b], rng, h)
    yield "relu", lambda: _scalar_check(lambda: ops.relu(x), [x], rng, h)
    yield "sigmoid", lambda: _scalar_check(lambda: ops.sigmoid(x), [x], rng, h)
    y = _rand(rng, 2, 3, 8, 8)
    yield "add", lambda: _scalar_check(lambda: ops.add(x, y), [x, y], rng, h)
    yield "mul", lambda: _scalar_check(lambda: ops.mul(x, y), [x, y], rng, h)
    c = _rand(rng, 1, 3, 1, 1)
    yield "add_broadcast", lambda: _scalar_check(lambda: ops.add(x, c), [x, c], rng, h)
    yield "mul_broadcast", lambda: _scalar_check(lambda: ops.mul(x, c), [x, c], rng, h)
    z = _rand(rng, 2, 5, 8, 8)
    yield "concat_channels", lambda: _scalar_check(lambda: ops.concat_channels([x, z]), [x, z], rng, h)
    yield "softmax_channels", lambda: _scalar_check(lambda: ops.softmax_channels(z), [z], rng, h)
    labels = rng.integers(0, 5, size=(2, 8, 8))
    yield "cross_entropy", lambda: grad_check(lambda: ops.cross_entropy(z, labels), [z], h)


def block_checks(seed: int = 0, h: float = STEP) -> Iterator[tuple[str, Callable[[], float]]]:
    rng = np.random.default_rng(seed + 1)
    x = _rand(rng, 2, 3, 8, 8)
    acb = _f64_acb(rng, 3, 4)
    yield "acb_forward", lambda: _scalar_check(
        lambda: blocks.acb_forward(x, acb, True), [x] + _acb_tensors(acb), rng, h)

    cab = blocks.init_cab(rng, 12, 8, ratio=4, dtype=F64)
    for spec in (cab.reduce, cab.compress_avg, cab.compress_max, cab.restore_avg, cab.restore_max):
        spec.bias.data[:] = rng.uniform(-0.2, 0.2, spec.bias.shape)
    f_cat = _rand(rng, 2, 12, 4, 4)
    yield "cab_forward", lambda: _scalar_check(
        lambda: blocks.cab_forward(f_cat, cab), [f_cat] + _cab_tensors(cab), rng, h)

    # three levels, widths (4, 8, 16), aggregated at level 1 with decoder maps at 2 and 3
    widths = (4, 8, 16)
    enc = [_rand(rng, 1, c, 8 // 2 ** i, 8 // 2 ** i) for i, c in enumerate(widths)]
    dec = {2: _rand(rng, 1, 16, 4, 4), 3: enc[2]}
    node = blocks.AggregateParams(level=1, levels=3)
    node.up[2] = (blocks.init_upconv(rng, 16, 4, 2, F64), _f64_acb(rng, 4, 4))
    node.up[3] = (blocks.init_upconv(rng, 16, 4, 4, F64), _f64_acb(rng, 4, 4))
    node.cab = blocks.init_cab(rng, 12, 8, ratio=4, dtype=F64)
    params = [enc[0], dec[2], dec[3]]
    for k in (2, 3):
        up, blk = node.up[k]
        params += [up.kernel, up.bias] + _acb_tensors(blk)
    params += _cab_tensors(node.cab)
    yield "aggregate_node_up", lambda: _scalar_check(
        lambda: blocks.aggregate_node(1, enc, dec, node, True), params, rng, h,
        max_coords=SAMPLED)

    node2 = blocks.AggregateParams(level=2, levels=3)
    node2.down[1] = _f64_acb(rng, 4, 8)
    node2.up[3] = (blocks.init_upconv(rng, 16, 8, 2, F64), _f64_acb(rng, 8, 8))
    node2.cab = blocks.init_cab(rng, 24, 16, ratio=4, dtype=F64)
    params2 = [enc[0], enc[1], dec[3]] + _acb_tensors(node2.down[1])
    params2 += [node2.up[3][0].kernel, node2.up[3][0].bias] + _acb_tensors(node2.up[3][1])
    params2 += _cab_tensors(node2.cab)
    yield "aggregate_node_down", lambda: _scalar_check(
        lambda: blocks.aggregate_node(2, enc, dec, node2, True), params2, rng, h,
        max_coords=SAMPLED)


TINY = NetworkConfig(variant="macu", levels=3, base_width=4, classes=2, cab_ratio=4)


def network_check(seed: int = 0, h: float = STEP, variant: str = "macu",
                  max_coords: Optional[int] = SAMPLED) -> float:
    """Cross-entropy gradient w.r.t. every parameter tensor of a tiny network."""
    cfg = NetworkConfig(variant=variant, levels=TINY.levels, base_width=TINY.base_width,
                        classes=TINY.classes, cab_ratio=TINY.cab_ratio)
    net = build_network(cfg, seed=seed, dtype=F64)
    rng = np.random.default_rng(seed + 2)
    for p in net.parameters():
        if p.data.ndim == 1 and not p.data.any():
            p.data[:] = rng.uniform(-0.2, 0.2, p.shape)
    x = _rand(rng, 2, 3, 16, 16)
    labels = rng.integers(0, cfg.classes, size=(2, 16, 16))
    return grad_check(lambda: ops.cross_entropy(forward_logits(net, x, training=True), labels),
                      net.parameters(), h, max_coords=max_coords, rng=rng)


def run_all(tol: float = PRIMITIVE_TOL, network_tol: float = NETWORK_TOL, h: float = STEP,
            seed: int = 0, max_coords: Optional[int] = SAMPLED) -> list[CheckResult]:
    results = []
    for name, check in list(primitive_checks(seed, h)) + list(block_checks(seed, h)):
        results.append(CheckResult(name, check(), tol))
    for variant in ("macu", "unet"):
        results.append(CheckResult(f"network_{variant}",
                                   network_check(seed, h, variant, max_coords), network_tol))
    return results
