import numpy as np
import pytest

from lfqgen.data import (
    DataError,
    ImageDataset,
    decode_raster,
    decode_tokens,
    encode_raster,
    encode_tokens,
    load_dataset,
    prefetch,
    read_image,
    save_dataset,
    synthetic_textures,
    to_unit_range,
    to_uint8,
    write_image,
    write_manifest,
)


def test_pixel_mapping():
    np.testing.assert_array_equal(to_unit_range(np.array([0, 255], dtype=np.uint8)), [-1.0, 1.0])
    np.testing.assert_array_equal(to_uint8(np.array([-1.0, 1.0, 5.0])), [0, 255, 255])


def test_raster_round_trip(rng):
    pixels = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
    np.testing.assert_array_equal(decode_raster(encode_raster(pixels)), pixels)


def test_raster_corruption():
    payload = encode_raster(np.zeros((2, 2, 3), dtype=np.uint8))
    with pytest.raises(DataError):
        decode_raster(payload[:-1])
    with pytest.raises(DataError):
        decode_raster(b"XXXX" + payload[4:])


def test_image_file_round_trip(tmp_path):
    img = synthetic_textures(1, size=8)[0]
    write_image(tmp_path / "a.lfqi", img)
    assert np.abs(read_image(tmp_path / "a.lfqi") - img).max() <= 1 / 127.5


def test_tokens_round_trip(rng):
    grids = rng.integers(0, 256, (3, 4, 4))
    back, bits = decode_tokens(encode_tokens(grids, 8))
    assert bits == 8
    np.testing.assert_array_equal(back, grids)
    with pytest.raises(ValueError):
        encode_tokens(grids, 7)
    with pytest.raises(DataError):
        decode_tokens(encode_tokens(grids, 8)[:-4])


def test_empty_manifest(tmp_path):
    write_manifest(tmp_path / "m.tsv", [])
    data = load_dataset(tmp_path / "m.tsv")
    assert len(data) == 0 and list(data) == []


def test_manifest_errors(tmp_path):
    (tmp_path / "m.tsv").write_text("a.lfqi\tx\n")
    with pytest.raises(DataError):
        load_dataset(tmp_path / "m.tsv")
    (tmp_path / "m.tsv").write_text("missing.lfqi\t0\n")
    with pytest.raises(DataError):
        load_dataset(tmp_path / "m.tsv")


def test_dataset_save_load(tmp_path):
    images = synthetic_textures(4, size=8, seed=1)
    manifest = save_dataset(tmp_path, images, [0, 1, 2, 3])
    data = load_dataset(manifest, image_size=8)
    np.testing.assert_array_equal(data.labels, [0, 1, 2, 3])
    assert np.abs(data.images - images).max() <= 1 / 127.5
    with pytest.raises(DataError):
        load_dataset(manifest, image_size=16)


def test_seeded_epoch_order_repeats():
    data = ImageDataset(np.zeros((10, 1, 2, 2)) + np.arange(10)[:, None, None, None], np.arange(10))
    a = [label for _, label in data.iter_epoch(7)]
    b = [label for _, label in data.iter_epoch(7)]
    assert a == b and sorted(a) == list(range(10))


def test_prefetch_preserves_order_and_errors():
    assert list(prefetch(iter(range(20)), depth=3)) == list(range(20))

    def broken():
        yield 1
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError):
        list(prefetch(broken()))


def test_textures_are_seeded_and_bounded():
    a = synthetic_textures(3, seed=4)
    np.testing.assert_array_equal(a, synthetic_textures(3, seed=4))
    assert a.shape == (3, 3, 32, 32) and np.abs(a).max() <= 1.0
