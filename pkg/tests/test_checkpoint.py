import numpy as np
import pytest

from lfqgen.checkpoint import CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint


def records(rng):
    return {
        "b/w": rng.standard_normal((3, 4)).astype(np.float32),
        "a/v": rng.standard_normal(5),
        "meta/step": np.array([7], dtype=np.int64),
        "scalar": np.float64(2.5),
    }


def test_round_trip_and_byte_stability(tmp_path, rng):
    recs = records(rng)
    save_checkpoint(tmp_path / "a.ckpt", "lr = 0.1\n", recs)
    text, back = load_checkpoint(tmp_path / "a.ckpt")
    assert text == "lr = 0.1\n"
    for k, v in recs.items():
        assert back[k].dtype == np.asarray(v).dtype
        np.testing.assert_array_equal(back[k], v)
    save_checkpoint(tmp_path / "b.ckpt", text, back)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_corruption_is_reported(rng):
    blob = encode_checkpoint("x = 1\n", records(rng))
    for bad in (blob[:-3], blob + b"\0", b"NOPE" + blob[4:], blob[:4] + b"\x02" + blob[5:]):
        with pytest.raises(CheckpointError):
            decode_checkpoint(bad)


def test_unsupported_dtype():
    with pytest.raises(CheckpointError):
        encode_checkpoint("", {"c": np.zeros(2, dtype=np.complex64)})
