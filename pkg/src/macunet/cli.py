"""Command-line entry point: ``macunet <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 gradient verification failure.
"""
from __future__ import annotations

import argparse
import logging
import statistics
import sys
import time
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint, data, verify
from .config import ConfigError, load_config
from .models import (build_network, count_params, forward_logits, fuse_network, mac_report,
                     predict, total_macs)
from .tensor import ShapeError, Tensor, no_grad
from .train import compute_metrics, evaluate, fit, write_log

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_subset(root: Path, index: data.DatasetIndex, subset: str, classes: int):
    stems = index.subset(subset)
    return data.stack([data.load_sample(root, s, classes) for s in stems])


# -- subcommands ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    samples = data.synth_generate(args.count, args.size, args.classes, args.seed)
    for s in samples:
        data.save_sample(args.out, s)
    print(f"samples={len(samples)}")
    return EXIT_OK


def cmd_tile(args) -> int:
    total = 0
    for stem in data.list_stems(args.inp):
        for tile in data.tile_image(data.load_sample(args.inp, stem), args.patch):
            data.save_sample(args.out, tile)
            total += 1
    print(f"patches={total}")
    return EXIT_OK


def cmd_split(args) -> int:
    stems = data.list_stems(args.data)
    index = data.split_dataset(stems, seed=args.seed)
    data.write_split(index, args.out)
    n_train, n_val, n_test = index.counts()
    print(f"train={n_train} val={n_val} test={n_test}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    # echoed verbatim so a run can be reproduced from its log alone
    sys.stderr.write("effective config:\n" + cfg.dump())
    net_cfg = cfg.network()
    index = data.read_split(args.split)
    train = _load_subset(args.data, index, "train", cfg.classes)
    val = _load_subset(args.data, index, "val", cfg.classes)
    if len(train[0]) == 0:
        raise ValueError("split file assigns no training samples")
    net = build_network(net_cfg, cfg.seed, cfg.dtype)
    rows = fit(net, train, val, cfg.epochs, cfg.batch_size, cfg.seed, cfg.lr, cfg.lr_min)
    if args.log:
        write_log(rows, args.log)
    checkpoint.save_checkpoint(net, args.out)
    final = rows[-1].train_loss if rows else float("nan")
    print(f"epochs={len(rows)} final_train_loss={final:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = checkpoint.load_checkpoint(args.ckpt)
    index = data.read_split(args.split)
    images, masks = _load_subset(args.data, index, args.subset, net.cfg.classes)
    if len(images) == 0:
        raise ValueError(f"subset {args.subset!r} is empty")
    report = compute_metrics(evaluate(net, images, masks)).report()
    sys.stdout.write(report)
    if args.report:
        Path(args.report).write_text(report)
    return EXIT_OK


def cmd_infer(args) -> int:
    net = checkpoint.load_checkpoint(args.ckpt)
    image = data.decode_image(Path(args.image).read_bytes())
    if image.ndim != 4:
        raise data.BadMagicError("--image must be a P6 file")
    pred = predict(net, image, fused=args.fused)[0]
    Path(args.out).write_bytes(data.encode_image(pred.astype(np.uint8)))
    if args.color:
        Path(args.color).write_bytes(data.colorize_prediction(pred, data.palette(net.cfg.classes)))
    if args.fused and not net.fused:
        plain = predict(net, image, fused=False)[0]
        print(f"fused_mismatch={int((plain != pred).sum())}/{pred.size}")
    print(f"pixels={pred.size}")
    return EXIT_OK


def _ratio_text(r: Fraction) -> str:
    # in fifteenths when possible: a three-branch block has a 15-tap footprint
    if (r * 15).denominator == 1:
        return f"{r * 15}/15"
    return f"{r.numerator}/{r.denominator}"


def _acb_ratio_line(entries) -> str:
    ratios = {e.ratio for e in entries if e.ratio is not None}
    if not ratios:
        return "acb_mac_ratio=n/a"
    if len(ratios) == 1:
        r = ratios.pop()
        return f"acb_mac_ratio={_ratio_text(r)} ({float(r):.6f}) for every conv block"
    return "acb_mac_ratio=" + ",".join(sorted(_ratio_text(r) for r in ratios))


def cmd_fuse(args) -> int:
    net = checkpoint.load_checkpoint(args.ckpt)
    fused = fuse_network(net)
    before, _ = count_params(net)
    after, _ = count_params(fused)
    checkpoint.save_checkpoint(fused, args.out)
    print(f"params_before={before} params_after={after}")
    print(_acb_ratio_line(mac_report(net, args.size)))
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = load_config(args.config)
    total, table = count_params(build_network(cfg.network(), cfg.seed))
    width = max(len(k) for k in table)
    for name, n in table.items():
        print(f"{name:<{width}}  {n}")
    print(f"total={total} ({total / 1e6:.3f}M)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = verify.run_all(tol=args.tol)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"checks={len(results)} failed={len(failed)}")
    return EXIT_OK if not failed else EXIT_VERIFY


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    net = build_network(cfg.network(), cfg.seed, cfg.dtype)
    fused = fuse_network(net)
    rng = np.random.default_rng(cfg.seed)
    x = Tensor(rng.uniform(0, 1, size=(1, net.cfg.in_channels, args.size, args.size)).astype(net.dtype))

    def median_time(model) -> float:
        times = []
        with no_grad():
            for _ in range(args.reps):
                t0 = time.perf_counter()
                forward_logits(model, x, training=False)
                times.append(time.perf_counter() - t0)
        return statistics.median(times)

    entries = mac_report(net, args.size)
    unfused_macs = total_macs(entries, fused=False)
    fused_macs = total_macs(entries, fused=True)
    print(f"forward_median_s unfused={median_time(net):.6f} fused={median_time(fused):.6f}")
    print(f"macs unfused={unfused_macs} fused={fused_macs} "
          f"ratio={float(Fraction(fused_macs, unfused_macs)):.6f}")
    print(_acb_ratio_line(entries))
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="macunet", description="MACU-Net segmentation toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--classes", type=int, default=6)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("tile", help="cut images into non-overlapping patches")
    s.add_argument("--in", dest="inp", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--patch", type=int, default=256)
    s.set_defaults(func=cmd_tile)

    s = sub.add_parser("split", help="seeded 60/20/20 train/val/test split")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train a network and save a checkpoint")
    s.add_argument("--config", type=Path)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--split", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--log", type=Path)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="metrics report on one split subset")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--split", type=Path, required=True)
    s.add_argument("--subset", choices=data.SPLITS, default="test")
    s.add_argument("--report", type=Path)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="predict a class mask for one image")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--image", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--color", type=Path)
    s.add_argument("--fused", action="store_true")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("fuse", help="fold every conv block into a single 3x3 conv")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--size", type=int, default=256, help="input side for the MAC report")
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("params", help="parameter count table")
    s.add_argument("--config", type=Path)
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("gradcheck", help="finite-difference verification suite (float64)")
    s.add_argument("--tol", type=float, default=verify.PRIMITIVE_TOL)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", help="forward timing and MAC counts, fused vs unfused")
    s.add_argument("--config", type=Path)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--reps", type=int, default=10)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError("missing subcommand; see --help")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, data.NetpbmError, checkpoint.CheckpointError, ShapeError, ValueError,
            KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def run(argv: Sequence[str]) -> int:
    return main(list(argv))


if __name__ == "__main__":
    sys.exit(main())
