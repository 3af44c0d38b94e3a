import numpy as np
import pytest

from lfqgen import autodiff as ad
from lfqgen.autodiff import ShapeError, Tensor, finite_diff_check_params
from lfqgen.data import synthetic_textures
from lfqgen.lfq import LFQConfig, index_to_code
from lfqgen.tokenizer import TokenizerConfig, TokenizerModel, quantization_offset, tokenizer_loss

SMALL = TokenizerConfig(image_size=16, channels=(4, 8), groups=2, lfq=LFQConfig(bits=5))


@pytest.fixture(scope="module")
def model():
    return TokenizerModel(TokenizerConfig(channels=(8, 8, 16), groups=4), seed=3)


@pytest.fixture(scope="module")
def images():
    return synthetic_textures(3, seed=5).astype(np.float32)


def test_grid_shape_and_range(model, images):
    grid = model.tokenize(images)
    assert grid.shape == (3, 4, 4)
    assert grid.min() >= 0 and grid.max() < 256


def test_tokenize_is_deterministic(model, images):
    np.testing.assert_array_equal(model.tokenize(images), model.tokenize(images))


def test_decode_shape_and_purity(model, images):
    grid = model.tokenize(images)
    with ad.no_grad():
        a = model.decode(grid).data
        b = model.decode(grid).data
    assert a.shape == images.shape
    assert np.array_equal(a, b)


def test_quantized_map_consistent(model, images):
    with ad.no_grad():
        z, qmap = model.encode(images)
    assert set(np.unique(qmap.codes)) <= {-1.0, 1.0}
    np.testing.assert_array_equal(qmap.codes, np.where(z.data > 0, 1.0, -1.0))
    np.testing.assert_array_equal(index_to_code(qmap.indices, 8, axis=1), qmap.codes)


def test_shape_errors(model):
    with pytest.raises(ShapeError):
        model.tokenize(np.zeros((1, 3, 16, 16)))
    with pytest.raises(ShapeError):
        model.decode(np.zeros((1, 3, 3), dtype=np.int64))


def test_config_validation():
    with pytest.raises(ValueError):
        TokenizerConfig(image_size=30, channels=(8, 8, 8))
    with pytest.raises(ValueError):
        TokenizerConfig(channels=(6, 8), groups=4)


def test_loss_without_extra_terms_is_mse(images):
    m = TokenizerModel(SMALL, seed=1, dtype=np.float64)
    x = synthetic_textures(2, size=16, seed=2)
    parts = tokenizer_loss(m, x, entropy_weight=0.0, commitment_weight=0.0)
    assert parts.total.item() == parts.reconstruction.item()
    recon = m.reconstruct(x)
    assert parts.reconstruction.item() == pytest.approx(np.mean((recon - x) ** 2), rel=1e-12)


def test_perfect_reconstruction_terms_vanish():
    m = TokenizerModel(SMALL, seed=1, dtype=np.float64)
    x = synthetic_textures(2, size=16, seed=2)
    codes = index_to_code(np.arange(2 * 16).reshape(2, 4, 4) % 32, 5, axis=1)
    m.encoder = lambda _: Tensor(codes)
    m.decoder = lambda _: Tensor(x)
    parts = tokenizer_loss(m, x)
    assert parts.reconstruction.item() == 0.0
    assert parts.commitment.item() == 0.0


def test_loss_parameter_gradients():
    m = TokenizerModel(SMALL, seed=4, dtype=np.float64)
    # nonzero modulation so the adaptive norm projections carry gradient
    for name, p in m.named_parameters():
        if "proj" in name:
            p.data[...] = np.random.default_rng(len(name)).standard_normal(p.shape) * 0.1
    x = synthetic_textures(2, size=16, seed=7)
    offset = quantization_offset(m, x)
    params = m.parameters()
    rng = np.random.default_rng(0)
    picks = [(int(i), int(rng.integers(params[i].size))) for i in rng.choice(len(params), 5, replace=False)]
    err = finite_diff_check_params(lambda: tokenizer_loss(m, x, quant_offset=offset).total, params, picks)
    assert err <= 1e-4


def test_meta_model_counts_parameters():
    m = TokenizerModel(TokenizerConfig(), meta=True)
    real = TokenizerModel(TokenizerConfig(channels=(32, 64, 128)))
    assert m.num_parameters() == real.num_parameters()
