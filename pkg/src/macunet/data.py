"""Image/mask I/O, tiling, splitting and the synthetic scene generator.

Images are binary PPM (``P6``) and masks binary PGM (``P5``), both with
maxval 255. On disk a dataset looks like::

    <root>/images/<stem>.ppm
    <root>/masks/<stem>.pgm
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

# bare soil, building, pavement, road, vegetation, water
DEFAULT_PALETTE: tuple[tuple[int, int, int], ...] = (
    (128, 128, 128),
    (255, 0, 0),
    (192, 192, 0),
    (255, 255, 0),
    (0, 255, 0),
    (0, 0, 255),
)

SPLITS = ("train", "val", "test")


class NetpbmError(ValueError):
    """Base class for image decoding and validation failures."""


class BadMagicError(NetpbmError):
    pass


class TruncatedError(NetpbmError):
    pass


class MaxvalError(NetpbmError):
    pass


class MaskRangeError(NetpbmError):
    pass


@dataclass
class LabeledSample:
    image: np.ndarray  # [1, 3, H, W], values in [0, 1]
    mask: np.ndarray  # [H, W] integer class indices
    stem: str

    def __post_init__(self):
        if self.image.shape[-2:] != self.mask.shape:
            raise ValueError(f"{self.stem}: image {self.image.shape} and mask {self.mask.shape} differ")


# -- netpbm codec ---------------------------------------------------------------------

def _header(data: bytes) -> tuple[bytes, int, int, int, int]:
    """Parse magic, width, height, maxval; return them with the payload offset."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise BadMagicError(f"expected P5 or P6 magic, got {magic!r}")
    pos = 2
    tokens: list[int] = []
    comment_ok = True
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise TruncatedError("header ends early")
        if data[pos:pos + 1] == b"#":
            if not comment_ok:
                raise NetpbmError("comment allowed only after the magic")
            end = data.find(b"\n", pos)
            if end < 0:
                raise TruncatedError("unterminated header comment")
            pos = end + 1
            comment_ok = False
            continue
        comment_ok = False
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise NetpbmError(f"bad header byte {data[pos:pos + 1]!r}")
        tokens.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise TruncatedError("missing whitespace after maxval")
    width, height, maxval = tokens
    if maxval != 255:
        raise MaxvalError(f"maxval must be 255, got {maxval}")
    return magic, width, height, maxval, pos + 1


def decode_image(data: bytes, classes: Optional[int] = None) -> np.ndarray:
    """PPM bytes -> float64 ``[1, 3, H, W]`` in [0, 1]; PGM bytes -> uint8 ``[H, W]`` mask.

    With ``classes``, mask values must be below it.
    """
    magic, width, height, _, off = _header(data)
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = data[off:off + need]
    if len(payload) < need:
        raise TruncatedError(f"payload has {len(payload)} bytes, expected {need}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    if channels == 3:
        return (arr.reshape(height, width, 3).transpose(2, 0, 1)[None] / 255.0)
    mask = arr.reshape(height, width).copy()
    if classes is not None and mask.size and mask.max() >= classes:
        raise MaskRangeError(f"mask value {int(mask.max())} >= class count {classes}")
    return mask


def quantize(image: np.ndarray) -> np.ndarray:
    """Round half up to bytes, clamped to [0, 255]."""
    return np.clip(np.floor(np.asarray(image, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def encode_image(image: np.ndarray) -> bytes:
    """``[1,3,H,W]``/``[3,H,W]`` float image -> P6, ``[H,W]`` mask -> P5."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise MaskRangeError("mask values must lie in 0..255")
        h, w = arr.shape
        return f"P5\n{w} {h}\n255\n".encode() + arr.astype(np.uint8).tobytes()
    if arr.ndim == 4:
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a 3-channel image, got shape {np.shape(image)}")
    _, h, w = arr.shape
    return f"P6\n{w} {h}\n255\n".encode() + quantize(arr).transpose(1, 2, 0).tobytes()


def encode_rgb_bytes(rgb: np.ndarray) -> bytes:
    """``[H, W, 3]`` uint8 -> P6 bytes."""
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


# -- tiling and splitting -------------------------------------------------------------

def tile_count(height: int, width: int, patch: int) -> int:
    return (height // patch) * (width // patch)


def tile_image(sample: LabeledSample, patch: int) -> list[LabeledSample]:
    """Non-overlapping ``patch`` tiles in row-major order; right/bottom residue is dropped.

    Tiles are views into the source arrays.
    """
    if patch < 1:
        raise ValueError("patch must be >= 1")
    h, w = sample.mask.shape
    out = []
    for r in range(h // patch):
        for c in range(w // patch):
            ys, xs = slice(r * patch, (r + 1) * patch), slice(c * patch, (c + 1) * patch)
            out.append(LabeledSample(sample.image[..., ys, xs], sample.mask[ys, xs],
                                     f"{sample.stem}_r{r}_c{c}"))
    return out


@dataclass
class DatasetIndex:
    root: Optional[Path]
    stems: list[str]
    assignment: dict[str, str]

    def subset(self, name: str) -> list[str]:
        return [s for s in self.stems if self.assignment[s] == name]

    def counts(self) -> tuple[int, int, int]:
        return tuple(len(self.subset(s)) for s in SPLITS)  # type: ignore[return-value]


def split_counts(n: int, fractions: Sequence[float] = (0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    # decimal reading of the fractions keeps 0.6 * 5 == 3 exact
    n_train = math.floor(Fraction(repr(float(fractions[0]))) * n)
    n_val = math.floor(Fraction(repr(float(fractions[1]))) * n)
    return n_train, n_val, n - n_train - n_val


def split_dataset(stems: Iterable[str], fractions: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0,
                  root: Optional[Path] = None) -> DatasetIndex:
    """Seeded Fisher-Yates shuffle of the sorted stems, then contiguous train/val/test runs."""
    ordered = sorted(stems)
    if not ordered:
        raise ValueError("cannot split an empty stem list")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three values summing to 1, got {fractions}")
    rng = random.Random(seed)
    shuffled = list(ordered)
    for i in range(len(shuffled) - 1, 0, -1):
        j = rng.randint(0, i)
        shuffled[i], shuffled[j] = shuffled[j], shuffled[i]
    n_train, n_val, _ = split_counts(len(shuffled), fractions)
    assignment = {}
    for pos, stem in enumerate(shuffled):
        assignment[stem] = "train" if pos < n_train else "val" if pos < n_train + n_val else "test"
    return DatasetIndex(root, ordered, assignment)


def write_split(index: DatasetIndex, path: Union[str, Path]) -> None:
    with open(path, "w", newline="\n") as fh:
        for stem in index.stems:
            fh.write(f"{stem}\t{index.assignment[stem]}\n")


def read_split(path: Union[str, Path]) -> DatasetIndex:
    assignment = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line:
            continue
        stem, sep, name = line.partition("\t")
        if not sep or name not in SPLITS:
            raise ValueError(f"{path}:{lineno}: expected '<stem>\\t<train|val|test>'")
        assignment[stem] = name
    return DatasetIndex(None, sorted(assignment), assignment)


# -- dataset directories --------------------------------------------------------------

def list_stems(root: Union[str, Path]) -> list[str]:
    return sorted(p.stem for p in (Path(root) / "images").glob("*.ppm"))


def load_sample(root: Union[str, Path], stem: str, classes: Optional[int] = None) -> LabeledSample:
    root = Path(root)
    image = decode_image((root / "images" / f"{stem}.ppm").read_bytes())
    mask = decode_image((root / "masks" / f"{stem}.pgm").read_bytes(), classes)
    if image.ndim != 4 or mask.ndim != 2:
        raise BadMagicError(f"{stem}: image must be P6 and mask P5")
    return LabeledSample(image, mask, stem)


def save_sample(root: Union[str, Path], sample: LabeledSample) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    (root / "images" / f"{sample.stem}.ppm").write_bytes(encode_image(sample.image))
    (root / "masks" / f"{sample.stem}.pgm").write_bytes(encode_image(sample.mask))


def stack(samples: Sequence[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch samples into ``(images [N,3,H,W], masks [N,H,W])``."""
    if not samples:
        return np.zeros((0, 3, 0, 0)), np.zeros((0, 0, 0), dtype=np.int64)
    images = np.concatenate([s.image for s in samples], axis=0)
    masks = np.stack([s.mask for s in samples]).astype(np.int64)
    return images, masks


# -- synthetic scenes -----------------------------------------------------------------

def class_colors(k: int) -> np.ndarray:
    """Base RGB colour in [0, 1] for each class (fixed, seed independent)."""
    pal = np.array(palette(k), dtype=np.float64) / 255.0
    return 0.1 + 0.8 * pal


def palette(k: int) -> list[tuple[int, int, int]]:
    """``k`` distinct RGB triples; the first six are :data:`DEFAULT_PALETTE`."""
    out = list(DEFAULT_PALETTE[:k])
    rng = np.random.default_rng(12345)
    while len(out) < k:
        c = tuple(int(v) for v in rng.integers(0, 256, size=3))
        if c not in out:
            out.append(c)
    return out


def _draw_scene(rng: np.random.Generator, size: int, k: int, noise: float,
                colors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = np.zeros((size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(3, 7))):
        cls = int(rng.integers(1, k))
        h = int(rng.integers(size // 8, size // 2 + 1))
        w = int(rng.integers(size // 8, size // 2 + 1))
        top = int(rng.integers(0, size - h + 1))
        left = int(rng.integers(0, size - w + 1))
        if rng.random() < 0.5:
            region = (yy >= top) & (yy < top + h) & (xx >= left) & (xx < left + w)
        else:
            cy, cx = top + (h - 1) / 2.0, left + (w - 1) / 2.0
            region = ((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2 <= 1.0
        mask[region] = cls
    image = colors[mask].transpose(2, 0, 1)[None]
    if noise > 0:
        image = image + rng.uniform(-noise, noise, size=image.shape)
    return np.clip(image, 0.0, 1.0), mask


def synth_generate(count: int, size: int, k: int = 6, seed: int = 0, noise: float = 0.05,
                   max_retries: int = 10) -> list[LabeledSample]:
    """Random scenes of rectangles and ellipses over a class-0 background.

    If some class never appears across the set, the set is regenerated with
    ``seed + 1`` (up to ``max_retries`` times).
    """
    if k < 2:
        raise ValueError("need at least two classes")
    colors = class_colors(k)
    samples: list[LabeledSample] = []
    for attempt in range(max_retries + 1):
        rng = np.random.default_rng(seed + attempt)
        samples = []
        for i in range(count):
            image, mask = _draw_scene(rng, size, k, noise, colors)
            samples.append(LabeledSample(image, mask, f"synth_{i:05d}"))
        seen = set()
        for s in samples:
            seen.update(np.unique(s.mask).tolist())
        if len(seen) == k or count == 0:
            break
    return samples


def colorize_prediction(mask: np.ndarray, pal: Optional[Sequence[tuple[int, int, int]]] = None) -> bytes:
    """Render a class mask as P6 bytes with ``pal[class]`` per pixel."""
    mask = np.asarray(mask)
    pal_arr = np.array(pal if pal is not None else DEFAULT_PALETTE, dtype=np.uint8)
    if mask.size and mask.max() >= len(pal_arr):
        raise MaskRangeError(f"class {int(mask.max())} has no palette entry")
    return encode_rgb_bytes(pal_arr[mask])


def decolorize(data: bytes, pal: Optional[Sequence[tuple[int, int, int]]] = None) -> np.ndarray:
    """Inverse of :func:`colorize_prediction` for palettes with distinct entries."""
    magic, w, h, _, off = _header(data)
    if magic != b"P6":
        raise BadMagicError("expected a P6 image")
    rgb = np.frombuffer(data[off:off + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    pal_arr = np.array(pal if pal is not None else DEFAULT_PALETTE, dtype=np.uint8)
    mask = np.full((h, w), -1, dtype=np.int64)
    for c, colour in enumerate(pal_arr):
        mask[np.all(rgb == colour, axis=-1)] = c
    if (mask < 0).any():
        raise MaskRangeError("pixel colour not in palette")
    return mask
