import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from macunet import data
from macunet.data import (BadMagicError, LabeledSample, MaskRangeError, MaxvalError, TruncatedError,
                          colorize_prediction, decode_image, decolorize, encode_image, read_split,
                          split_counts, split_dataset, synth_generate, tile_image, write_split)


def big_sample(width, height, stem="gid"):
    """Zero-copy stand-in for a large scene."""
    image = np.broadcast_to(np.zeros((1, 1, 1, 1)), (1, 3, height, width))
    mask = np.broadcast_to(np.zeros((1, 1), dtype=np.uint8), (height, width))
    return LabeledSample(image, mask, stem)


# -- codec -----------------------------------------------------------------------------

def test_decode_examples():
    img = decode_image(b"P6\n1 1\n255\n" + bytes([255, 0, 0]))
    np.testing.assert_array_equal(img, [[[[1.0]], [[0.0]], [[0.0]]]])
    mask = decode_image(b"P5\n2 1\n255\n" + bytes([0, 5]), classes=6)
    np.testing.assert_array_equal(mask, [[0, 5]])


def test_decode_accepts_one_comment():
    raw = b"P5\n# made by hand\n2 1\n255\n" + bytes([1, 2])
    np.testing.assert_array_equal(decode_image(raw), [[1, 2]])
    with pytest.raises(data.NetpbmError):
        decode_image(b"P5\n2 # no\n1\n255\n" + bytes([1, 2]))


@pytest.mark.parametrize("raw,err", [
    (b"P3\n1 1\n255\n0 0 0", BadMagicError),
    (b"P6\n2 2\n255\n" + bytes(5), TruncatedError),
    (b"P5\n1 1\n65535\n" + bytes(2), MaxvalError),
    (b"P5\n2 1\n255\n" + bytes([0, 6]), MaskRangeError),
])
def test_decode_errors_are_distinct(raw, err):
    with pytest.raises(err):
        decode_image(raw, classes=6)


def test_encode_examples():
    assert encode_image(np.full((1, 3, 1, 1), 0.5))[-3:] == bytes([128] * 3)
    assert encode_image(np.zeros((2, 2), dtype=np.uint8)) == b"P5\n2 2\n255\n" + bytes(4)
    clipped = encode_image(np.array([-0.2, 1.7, 0.0]).reshape(1, 3, 1, 1))
    assert clipped[-3:] == bytes([0, 255, 0])
    with pytest.raises(MaskRangeError):
        encode_image(np.array([[0, 300]]))


def test_codec_round_trip_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        h, w = rng.integers(1, 9, size=2)
        header = f"P6\n{w} {h}\n255\n".encode()
        raw = header + rng.integers(0, 256, size=h * w * 3, dtype=np.uint8).tobytes()
        assert encode_image(decode_image(raw)) == raw
        raw = f"P5\n{w} {h}\n255\n".encode() + rng.integers(0, 6, size=h * w, dtype=np.uint8).tobytes()
        assert encode_image(decode_image(raw, classes=6)) == raw


# -- tiling ----------------------------------------------------------------------------

def test_tile_large_scene_counts():
    tiles = tile_image(big_sample(7200, 6800), 256)
    assert len(tiles) == 28 * 26 == 728
    assert sum(len(tile_image(big_sample(7200, 6800, f"s{i}"), 256)) for i in range(15)) == 10920
    assert tiles[0].stem == "gid_r0_c0" and tiles[29].stem == "gid_r1_c1"


def test_tile_small_cases():
    rng = np.random.default_rng(1)
    s = LabeledSample(rng.uniform(size=(1, 3, 256, 256)), rng.integers(0, 6, (256, 256)), "a")
    (only,) = tile_image(s, 256)
    np.testing.assert_array_equal(only.image, s.image)
    np.testing.assert_array_equal(only.mask, s.mask)
    assert tile_image(big_sample(256, 255), 256) == []


def test_tiles_reassemble_kept_region():
    rng = np.random.default_rng(2)
    image = rng.uniform(size=(1, 3, 23, 30))
    mask = rng.integers(0, 6, (23, 30))
    tiles = tile_image(LabeledSample(image, mask, "x"), 7)
    rows, cols = 23 // 7, 30 // 7
    grid = np.block([[tiles[r * cols + c].mask for c in range(cols)] for r in range(rows)])
    np.testing.assert_array_equal(grid, mask[:rows * 7, :cols * 7])
    img = np.concatenate([np.concatenate([tiles[r * cols + c].image for c in range(cols)], axis=3)
                          for r in range(rows)], axis=2)
    np.testing.assert_array_equal(img, image[..., :rows * 7, :cols * 7])


# -- splitting -------------------------------------------------------------------------

def test_split_counts_examples():
    assert split_counts(4940) == (2964, 988, 988)
    assert split_counts(10920) == (6552, 2184, 2184)
    idx = split_dataset([f"img{i:05d}" for i in range(4940)], seed=1)
    assert idx.counts() == (2964, 988, 988)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(3, 10 ** 5))
def test_split_counts_floor_formula(n):
    a, b, c = split_counts(n)
    assert a == (6 * n) // 10 and b == (2 * n) // 10 and c == n - a - b


@settings(max_examples=30, deadline=None)
@given(n=st.integers(3, 300), seed=st.integers(0, 2 ** 32))
def test_split_is_a_partition(n, seed):
    stems = [f"s{i}" for i in range(n)]
    idx = split_dataset(stems[::-1], seed=seed)
    parts = [idx.subset(name) for name in data.SPLITS]
    assert sorted(sum(parts, [])) == sorted(stems)
    assert tuple(map(len, parts)) == split_counts(n)


def test_split_determinism_and_seed_sensitivity():
    stems = [f"s{i}" for i in range(20)]
    base = split_dataset(stems, seed=0).assignment
    assert split_dataset(list(reversed(stems)), seed=0).assignment == base
    differing = sum(split_dataset(stems, seed=s).assignment != base for s in range(1, 101))
    assert differing >= 95


def test_split_rejects_bad_input():
    with pytest.raises(ValueError):
        split_dataset([])
    with pytest.raises(ValueError):
        split_dataset(["a", "b"], fractions=(0.5, 0.2, 0.2))


def test_split_file_round_trip(tmp_path):
    idx = split_dataset([f"s{i}" for i in range(10)], seed=3)
    path = tmp_path / "split.txt"
    write_split(idx, path)
    raw = path.read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    lines = raw.decode().splitlines()
    assert lines == sorted(lines) and all("\t" in line for line in lines)
    assert read_split(path).assignment == idx.assignment
    path.write_text("s0\tholdout\n")
    with pytest.raises(ValueError):
        read_split(path)


# -- synthetic data --------------------------------------------------------------------

def test_synth_coverage_and_determinism():
    a = synth_generate(8, 64, 6, seed=7)
    b = synth_generate(8, 64, 6, seed=7)
    assert len(a) == 8
    seen = set()
    for s, t in zip(a, b):
        assert s.image.shape == (1, 3, 64, 64) and s.mask.shape == (64, 64)
        assert s.mask.max() < 6 and 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert s.image.tobytes() == t.image.tobytes() and s.mask.tobytes() == t.mask.tobytes()
        seen.update(np.unique(s.mask).tolist())
    assert seen == set(range(6))


def test_synth_noise_free_is_piecewise_constant():
    for s in synth_generate(3, 32, 4, seed=1, noise=0.0):
        for c in np.unique(s.mask):
            pixels = s.image[0][:, s.mask == c]
            assert np.all(pixels == pixels[:, :1])


def test_dataset_directory_round_trip(tmp_path):
    samples = synth_generate(3, 16, 6, seed=2)
    for s in samples:
        data.save_sample(tmp_path, s)
    assert data.list_stems(tmp_path) == [s.stem for s in samples]
    back = data.load_sample(tmp_path, samples[0].stem, classes=6)
    np.testing.assert_array_equal(back.mask, samples[0].mask)
    np.testing.assert_allclose(back.image, samples[0].image, atol=0.5 / 255 + 1e-12)
    images, masks = data.stack([data.load_sample(tmp_path, s.stem) for s in samples])
    assert images.shape == (3, 3, 16, 16) and masks.shape == (3, 16, 16)


# -- colorization ----------------------------------------------------------------------

def test_colorize_examples():
    pal = data.palette(6)
    raw = colorize_prediction(np.full((2, 3), 4), pal)
    rgb = np.frombuffer(raw[-18:], dtype=np.uint8).reshape(6, 3)
    assert np.all(rgb == pal[4])
    ident = [(c, c, c) for c in range(6)]
    assert colorize_prediction(np.array([[3]]), ident)[-3:] == bytes([3, 3, 3])


def test_colorize_inverse():
    mask = np.random.default_rng(3).integers(0, 9, size=(7, 5))
    pal = data.palette(9)
    assert len(set(pal)) == 9
    np.testing.assert_array_equal(decolorize(colorize_prediction(mask, pal), pal), mask)
    with pytest.raises(MaskRangeError):
        colorize_prediction(np.array([[6]]))
