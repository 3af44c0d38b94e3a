import itertools
import math

import numpy as np
import pytest

from lfqgen import autodiff as ad
from lfqgen.autodiff import Tensor, finite_diff_check_params
from lfqgen.factorize import FactorizationScheme
from lfqgen.generator import (
    LARGE_SHAPES,
    ARConfig,
    ARModel,
    generate,
    incremental_logprob,
    large_config,
    sampling_distribution,
    sequence_logprob,
    train_loss,
)
from lfqgen.optim import Adam


def tiny(seq_len=4, bits=(1, 2), seed=0, **kw):
    cfg = ARConfig(inter_blocks=2, intra_blocks=1, width=8, heads=2, scheme=FactorizationScheme(bits),
                   num_classes=3, seq_len=seq_len, **kw)
    return ARModel(cfg, seed=seed)


def random_sub(model, n, rng):
    cfg = model.config
    return np.stack([rng.integers(0, s, (n, cfg.seq_len)) for s in cfg.scheme.sizes], axis=-1)


def all_sequences(model):
    cfg = model.config
    per_pos = list(itertools.product(*[range(s) for s in cfg.scheme.sizes]))
    return np.array(list(itertools.product(per_pos, repeat=cfg.seq_len)))


def test_single_position_context_depends_on_class_only(rng):
    m = tiny(seq_len=1)
    a = m.inter_forward([1], random_sub(m, 1, rng)).data
    b = m.inter_forward([1], random_sub(m, 1, rng)).data
    np.testing.assert_array_equal(a, b)


def test_context_is_causal(rng):
    m = tiny(seq_len=6)
    sub = random_sub(m, 1, rng)
    base = m.inter_forward([0], sub).data
    for t in range(6):
        other = sub.copy()
        other[:, t:] = random_sub(m, 1, rng)[:, t:]
        np.testing.assert_array_equal(m.inter_forward([0], other).data[:, : t + 1], base[:, : t + 1])


def test_class_conditioning_is_live(rng):
    m = tiny()
    sub = random_sub(m, 1, rng)
    assert not np.allclose(m.inter_forward([0], sub).data[:, 0], m.inter_forward([1], sub).data[:, 0])


def test_first_subtoken_ignores_its_own_value(rng):
    m = tiny(bits=(2, 3))
    ctx = Tensor(rng.standard_normal((2, 8)))
    a = m.intra_forward(ctx, np.array([[0], [1]]), 1).data
    b = m.intra_forward(ctx, np.array([[3], [2]]), 1).data
    np.testing.assert_array_equal(a, b)


def test_second_subtoken_depends_on_first(rng):
    m = tiny(bits=(2, 3))
    ctx = Tensor(rng.standard_normal((1, 8)))
    a = m.intra_forward(ctx, np.array([[0]]), 2).data
    b = m.intra_forward(ctx, np.array([[3]]), 2).data
    assert not np.allclose(a, b)
    p = np.exp(a - a.max())
    assert (p / p.sum()).sum() == pytest.approx(1.0, abs=1e-9)


def test_intra_paths_agree(rng):
    m = tiny(bits=(2, 3))
    sub = random_sub(m, 2, rng)
    ctx = m.inter_forward([0, 2], sub)
    forced = m.intra_logits(ctx, sub)
    for j in range(2):
        step = m.intra_forward(ctx, sub, j + 1).data
        np.testing.assert_allclose(step, forced[j].data, atol=1e-12)


@pytest.mark.parametrize("seq_len,bits", [(1, (1, 2)), (2, (1, 2)), (1, (2, 2, 1))])
def test_joint_probabilities_normalize(seq_len, bits):
    m = tiny(seq_len=seq_len, bits=bits, seed=2)
    seqs = all_sequences(m)
    with ad.no_grad():
        lp = sequence_logprob(m, np.full(len(seqs), 1), seqs).data
    assert np.exp(lp).sum() == pytest.approx(1.0, abs=1e-6)


def test_uniform_model_logprob(rng):
    m = tiny(seq_len=3, bits=(2, 3))
    for head in m.heads:
        head.weight.data[...] = 0.0
    sub = random_sub(m, 4, rng)
    lp = sequence_logprob(m, [0, 1, 2, 0], sub).data
    np.testing.assert_allclose(lp, -3 * 5 * math.log(2), atol=1e-12)
    assert train_loss(m, [0, 1, 2, 0], sub).item() == pytest.approx(2.5 * math.log(2), abs=1e-12)


def test_incremental_matches_teacher_forced(rng):
    m = tiny(seq_len=5, bits=(2, 3), seed=4)
    sub = random_sub(m, 3, rng)
    forced = sequence_logprob(m, [0, 1, 2], sub).data
    np.testing.assert_allclose(incremental_logprob(m, [0, 1, 2], sub), forced, atol=1e-6)


def test_eval_passes_are_identical(rng):
    m = tiny()
    sub = random_sub(m, 2, rng)
    assert train_loss(m, [0, 1], sub).item() == train_loss(m, [0, 1], sub).item()


def test_training_reduces_loss(rng):
    m = tiny(seq_len=4, bits=(2, 3), dropout=0.0, cond_drop=0.0)
    sub = random_sub(m, 4, rng)
    ids = np.array([0, 1, 2, 0])
    opt = Adam(m.parameters(), 0.9, 0.95)
    losses = []
    for _ in range(200):
        m.zero_grad()
        loss = train_loss(m, ids, sub)
        loss.backward()
        opt.step(3e-3)
        losses.append(loss.item())
    smooth = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert smooth[-1] < smooth[0] * 0.5
    assert np.all(np.diff(smooth[::20]) < 0)


def test_train_loss_gradients():
    m = tiny(seq_len=3, bits=(1, 2), seed=6)
    sub = random_sub(m, 2, np.random.default_rng(1))
    params = m.parameters()
    rng = np.random.default_rng(2)
    picks = [(i, int(rng.integers(params[i].size))) for i in range(len(params))]
    assert finite_diff_check_params(lambda: train_loss(m, [0, 2], sub), params, picks) <= 1e-4


def test_class_validation():
    m = tiny()
    with pytest.raises(ValueError):
        generate(m, 4)
    with pytest.raises(ValueError):
        sequence_logprob(m, [-1], np.zeros((1, 4, 2), dtype=np.int64))


def test_greedy_is_argmax_chain():
    m = tiny(seq_len=3, bits=(2, 3), seed=8)
    trace = generate(m, 1, n=2, temperature=0.0, guidance_scale=1.5, return_trace=True)
    for t, row in enumerate(trace.logits):
        for j, lg in enumerate(row):
            np.testing.assert_array_equal(trace.sub_tokens[:, t, j], np.argmax(lg, axis=-1))
    again = generate(m, 1, n=2, temperature=0.0, guidance_scale=1.5, seed=99)
    np.testing.assert_array_equal(trace.indices, again)


def test_unit_guidance_is_plain_conditional():
    m = tiny(seq_len=3, bits=(2, 3), seed=8)
    trace = generate(m, 2, n=1, temperature=0.0, guidance_scale=1.0, return_trace=True)
    sub = trace.sub_tokens
    with ad.no_grad():
        ctx = m.inter_forward([2], sub)
        forced = m.intra_logits(ctx, sub)
    for t in range(3):
        for j in range(2):
            np.testing.assert_allclose(trace.logits[t][j], forced[j].data[:, t], atol=1e-9)


def test_guidance_combines_conditional_and_null():
    m = tiny(seq_len=1, bits=(2, 3), seed=8)
    trace = generate(m, 0, n=1, temperature=0.0, guidance_scale=3.0, return_trace=True)
    sub = trace.sub_tokens
    with ad.no_grad():
        cond = m.intra_logits(m.inter_forward([0], sub), sub)
        null = m.intra_logits(m.inter_forward([m.null_class], sub), sub)
    for j in range(2):
        expect = null[j].data[:, 0] + 3.0 * (cond[j].data[:, 0] - null[j].data[:, 0])
        np.testing.assert_allclose(trace.logits[0][j], expect, atol=1e-9)


def test_sampling_distribution_top_k_and_temperature():
    logits = np.array([[1.0, 3.0, 2.0, 0.0]])
    p = sampling_distribution(logits, 1.0, 2)
    assert np.count_nonzero(p) == 2 and p[0, 1] > p[0, 2]
    np.testing.assert_allclose(sampling_distribution(logits, 1.0, 99), sampling_distribution(logits, 1.0, None))
    sharp = sampling_distribution(logits, 0.1, None)
    assert sharp[0, 1] > 0.99


def test_seeded_sampling_is_reproducible():
    m = tiny(seq_len=3, bits=(2, 3), seed=1)
    a = generate(m, 0, n=4, temperature=1.0, top_k=3, seed=5)
    b = generate(m, 0, n=4, temperature=1.0, top_k=3, seed=5)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (4, 3) and a.max() < 32


def test_generation_argument_errors():
    m = tiny()
    with pytest.raises(ValueError):
        generate(m, 0, temperature=-1.0)
    with pytest.raises(ValueError):
        generate(m, 0, top_k=0)


@pytest.mark.parametrize("name", sorted(LARGE_SHAPES))
def test_large_shapes_construct(name):
    cfg = large_config(name)
    m = ARModel(cfg, meta=True)
    assert m.num_parameters() > 1e8
    assert cfg.scheme.sizes == (64, 4096)
