import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from medtimeline import model as M
from oracles import gradient_check

SMALL = M.ModelConfig(vocab_size=13, n_layers=2, d_model=16, n_heads=2, d_mlp=32, context_len=16, dtype="float64")


def _noisy(c, seed=0, std=0.3):
    rng = np.random.default_rng(seed)
    p = M.init_params(c, seed)
    return {k: v + rng.normal(0, std, v.shape).astype(v.dtype) for k, v in p.items()}


def test_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig(vocab_size=10, d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        M.ModelConfig(vocab_size=10, context_len=1)
    with pytest.raises(ValueError):
        M.ModelConfig(vocab_size=0)


def test_causality():
    p = _noisy(SMALL)
    rng = np.random.default_rng(1)
    row = rng.integers(0, 13, 12)
    base = M.forward(p, SMALL, row)
    for j in range(12):
        other = row.copy()
        other[j] = (other[j] + 1) % 13
        changed = M.forward(p, SMALL, other)
        assert np.array_equal(base[:j], changed[:j])
        assert not np.allclose(base[j:], changed[j:])


def test_finite_and_normalized():
    p = _noisy(SMALL)
    logits = M.forward(p, SMALL, np.zeros(10, dtype=int))
    assert np.all(np.isfinite(logits))
    probs = np.exp(logits - logits.max(-1, keepdims=True))
    probs /= probs.sum(-1, keepdims=True)
    assert np.allclose(probs.sum(-1), 1.0, atol=1e-6)


def test_rejects_out_of_range_ids():
    with pytest.raises(ValueError):
        M.forward(M.init_params(SMALL), SMALL, [0, 13])


def test_uniform_logits_loss_is_log_v():
    p = M.init_params(SMALL)
    p["head"][:] = 0.0
    loss, _ = M.loss_and_grad(p, SMALL, np.arange(10).reshape(2, 5), with_grad=False)
    assert loss == pytest.approx(math.log(13))


def test_empty_mask_is_an_error():
    with pytest.raises(ValueError, match="no supervised positions"):
        M.loss_and_grad(M.init_params(SMALL), SMALL, np.ones((2, 4), int), np.zeros((2, 4), bool))


def test_duplicated_batch_same_loss_and_grad():
    p = _noisy(SMALL)
    rows = np.random.default_rng(0).integers(0, 13, (3, 7))
    a, ga = M.loss_and_grad(p, SMALL, rows)
    b, gb = M.loss_and_grad(p, SMALL, np.concatenate([rows, rows]))
    assert a == pytest.approx(b, rel=1e-12)
    for k in ga:
        np.testing.assert_allclose(ga[k], gb[k], rtol=1e-9, atol=1e-14)


def test_vocabulary_permutation_invariance():
    p = _noisy(SMALL)
    rows = np.random.default_rng(2).integers(0, 13, (2, 9))
    perm = np.random.default_rng(3).permutation(13)
    q = dict(p)
    q["emb"] = np.empty_like(p["emb"])
    q["emb"][perm] = p["emb"]
    q["head"] = np.empty_like(p["head"])
    q["head"][:, perm] = p["head"]
    a, _ = M.loss_and_grad(p, SMALL, rows, with_grad=False)
    b, _ = M.loss_and_grad(q, SMALL, perm[rows], with_grad=False)
    assert a == pytest.approx(b, rel=1e-12)


def test_gradient_check_small():
    c = M.ModelConfig(vocab_size=7, n_layers=1, d_model=8, n_heads=2, d_mlp=12, context_len=8, dtype="float64")
    assert gradient_check(c, seed=4, length=5) < 1e-4


def test_init_statistics():
    c = M.ModelConfig(vocab_size=500, n_layers=4, d_model=128, n_heads=4, d_mlp=512)
    p = M.init_params(c, 0)
    assert p["emb"].std() == pytest.approx(0.02, rel=0.02)
    assert p["h0.w2"].std() == pytest.approx(0.02 / math.sqrt(8), rel=0.03)
    assert np.all(p["h1.ln1_g"] == 1) and np.all(p["h1.bqkv"] == 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.sampled_from([(8, 2), (16, 4), (24, 2), (32, 8)]), st.integers(1, 64), st.integers(2, 300))
def test_count_matches_allocation(L, dh, m, V):
    d, h = dh
    c = M.ModelConfig(vocab_size=V, n_layers=L, d_model=d, n_heads=h, d_mlp=m)
    counts = M.count_params(c)
    assert counts["total"] == sum(int(np.prod(s)) for s in M.param_shapes(c).values())
    c2 = M.ModelConfig(vocab_size=V, n_layers=2 * L, d_model=d, n_heads=h, d_mlp=m)
    assert M.count_params(c2)["non_embedding"] == 2 * counts["non_embedding"]


def test_reference_scale_count():
    c = M.ModelConfig(vocab_size=7105, n_layers=12, d_model=768, n_heads=12, d_mlp=3072)
    total = M.count_params(c)["total"]
    assert 5e7 <= total < 5e8  # order 1e8


def test_sampling():
    assert M.sample_next(np.array([1.0, 3.0, 2.0]), 0.0, np.random.default_rng(0)) == 1
    assert M.sample_next(np.array([3.0, 3.0, 2.0]), 0.0, np.random.default_rng(0)) == 0
    rng = np.random.default_rng(0)
    draws = M.sample_from_uniform(np.zeros((100000, 2)), 1.0, rng.random(100000))
    assert abs(draws.mean() - 0.5) < 0.01
    skew = np.tile([3.0, 1.0, 0.0, -1.0], (100000, 1))
    u = np.random.default_rng(1).random(100000)

    def entropy(x):
        f = np.bincount(x, minlength=4) / len(x)
        f = f[f > 0]
        return -(f * np.log(f)).sum()

    assert entropy(M.sample_from_uniform(skew, 2.0, u)) > entropy(M.sample_from_uniform(skew, 1.0, u))
    with pytest.raises(ValueError):
        M.sample_next(np.zeros(3), -1.0, rng)


def test_repeated_batch_is_learnable():
    from medtimeline import trainer as T

    c = M.ModelConfig(vocab_size=13, n_layers=1, d_model=16, n_heads=2, d_mlp=32, context_len=12)
    p = M.init_params(c, 0)
    rows = np.random.default_rng(0).integers(0, 13, (4, 12))
    first, _ = M.loss_and_grad(p, c, rows, with_grad=False)
    opt = T.AdamW(p, T.TrainConfig(weight_decay=0.0))
    for _ in range(200):
        _, g = M.loss_and_grad(p, c, rows)
        opt.update(p, g, 1e-2)
    last, _ = M.loss_and_grad(p, c, rows, with_grad=False)
    assert last < 0.5 * first


@pytest.mark.parametrize("sliding", [False, True])
def test_decoder_matches_full_forward(sliding):
    p = _noisy(SMALL, std=0.1)
    rng = np.random.default_rng(5)
    W, keep = 10, 6
    dec = M.KVDecoder(p, SMALL, window=W, keep=keep, sliding=sliding)
    first = rng.integers(0, 13, 3)
    out = dec.prefill([first, rng.integers(0, 13, 6), rng.integers(0, 13, 1), first])
    # tokens currently visible to the cache (rows are left-aligned to the longest prompt)
    seen = 6
    for step in range(16):
        for r, h in enumerate(dec.history):
            if sliding and seen > W:
                continue  # sliding attention is not a truncated forward beyond one layer
            np.testing.assert_allclose(out[r], M.forward(p, SMALL, h[-seen:])[-1], atol=1e-9)
        if step == 7:
            dec.select([0, 2, 3])
            out = out[[0, 2, 3]]
        out = dec.step(rng.integers(0, 13, dec.batch_size))
        seen += 1
        if not sliding and seen > W:
            seen = keep


def test_sliding_decoder_one_layer_is_window_exact():
    c = M.ModelConfig(vocab_size=11, n_layers=1, d_model=16, n_heads=2, d_mlp=32, context_len=8, dtype="float64")
    p = _noisy(c, std=0.1)
    rng = np.random.default_rng(0)
    dec = M.KVDecoder(p, c, window=6, sliding=True)
    dec.prefill([[1, 2, 3], [4, 5, 6, 7]])
    for _ in range(12):
        out = dec.step(rng.integers(0, 11, 2))
        for r, h in enumerate(dec.history):
            # rotary scores are relative, so a single layer sees exactly the last window
            np.testing.assert_allclose(out[r], M.forward(p, c, h[-6:])[-1], atol=1e-9)


def test_checkpoint_roundtrip(tmp_path):
    p = M.init_params(SMALL, 1)
    path = tmp_path / "m.ckpt"
    M.save_checkpoint(path, p, SMALL, step=7, rng_state={"s": 1}, tensors={"adam.m.emb": np.ones((13, 16))})
    q, cfg, header, other = M.load_checkpoint(path)
    assert cfg == SMALL and header["step"] == 7 and header["rng_state"] == {"s": 1}
    for k in p:
        np.testing.assert_allclose(q[k], p[k].astype(np.float32), rtol=0, atol=0)
    assert np.all(other["adam.m.emb"] == 1)
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw[:-8])
    with pytest.raises(M.CheckpointError):
        M.load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"X" + raw[1:])
    with pytest.raises(M.CheckpointError):
        M.load_checkpoint(tmp_path / "magic.ckpt")
