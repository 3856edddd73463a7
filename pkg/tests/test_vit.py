import numpy as np
import pytest

import gradcheck as gc
from cropr import tensor as T
from cropr.errors import ConfigError, ContractError
from cropr.vit import CLS_POSITION, Block, TokenBatch, ViT, ViTConfig, attention_readout, droppath


def small(**kw):
    base = dict(image_side=16, patch_size=4, channels=2, depth=2, width=8, heads=2, num_classes=3)
    base.update(kw)
    return ViTConfig(**base)


def test_patch_embed_counts_and_positions():
    vit = ViT(ViTConfig(image_side=32, patch_size=16, channels=3, depth=1, width=8, heads=2), np.random.default_rng(0))
    batch = vit.patch_embed(np.zeros((1, 3, 32, 32)))
    assert batch.num_tokens == 4
    assert batch.positions[0].tolist() == [0, 1, 2, 3]

    cfg = ViTConfig(image_side=224, patch_size=16, depth=1, width=8, heads=2)
    assert cfg.num_patches == 196

    vit = ViT(ViTConfig(image_side=224, patch_size=16, depth=1, width=8, heads=2, cls_token=True),
              np.random.default_rng(0))
    batch = vit.patch_embed(np.zeros((1, 3, 224, 224)))
    assert batch.num_tokens == 197
    assert batch.positions[0, 0] == CLS_POSITION


def test_config_errors():
    with pytest.raises(ConfigError):
        ViTConfig(image_side=30, patch_size=8)
    with pytest.raises(ConfigError):
        ViTConfig(width=10, heads=4)
    with pytest.raises(ConfigError):
        ViTConfig(depth=2, droppath_rates=[0.1])
    with pytest.raises(ConfigError):
        ViTConfig(pooling="cls", cls_token=False)


def test_droppath_rates_linear():
    cfg = ViTConfig(depth=5, drop_path_max=0.4)
    np.testing.assert_allclose(cfg.droppath_rates, [0.0, 0.1, 0.2, 0.3, 0.4])


def test_zero_output_projections_make_block_identity():
    rng = np.random.default_rng(1)
    blk = Block(rng, 8, 2, 16)
    blk.attn.proj.weight.data[:] = 0
    blk.attn.proj.bias.data[:] = 0
    blk.mlp.fc2.weight.data[:] = 0
    blk.mlp.fc2.bias.data[:] = 0
    x = T.Tensor(rng.normal(size=(2, 5, 8)))
    np.testing.assert_array_equal(blk(x).data, x.data)


def test_single_token_attention_is_value_path():
    rng = np.random.default_rng(2)
    blk = Block(rng, 4, 1, 8)
    x = T.Tensor(rng.normal(size=(1, 1, 4)))
    h = blk.norm1(x)
    expected = blk.attn.proj(blk.attn.v(h)).data
    np.testing.assert_allclose(blk.attn(h).data, expected, rtol=1e-12)
    assert blk.attention_probs(x)[0, 0, 0] == 1.0


def test_block_gradient_check():
    rng = np.random.default_rng(3)
    blk = Block(rng, 4, 2, 8)
    for p in blk.parameters():
        p.data[:] = rng.normal(scale=0.5, size=p.shape)
    xv = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(2, 3, 4))
    x = T.Tensor(xv.copy(), requires_grad=True)
    params = dict(blk.named_parameters())
    params["input"] = x
    errs = gc.check_params(lambda: T.sum_(T.mul(blk(x), T.Tensor(w))), params)
    assert max(errs.values()) <= 1e-4, errs


def test_attention_scores_examples():
    probs = np.full((1, 3, 3), 1 / 3)
    s = attention_readout(probs, "avg", cls_present=False)
    assert np.allclose(s, s[0, 0])
    probs = np.array([[[1.0, 0.0], [1.0, 0.0]]])
    np.testing.assert_array_equal(attention_readout(probs, "avg", False), [[1.0, 0.0]])
    with pytest.raises(ContractError):
        attention_readout(probs, "cls", False)


def test_attention_scores_match_dense_oracle():
    rng = np.random.default_rng(4)
    vit = ViT(small(cls_token=True), rng)
    for p in vit.parameters():
        p.data[:] = rng.normal(scale=0.3, size=p.shape)
    batch = vit.patch_embed(rng.normal(size=(2, 2, 16, 16)))
    blk = vit.blocks[0]
    x = batch.tokens.data
    mu = x.mean(-1, keepdims=True)
    h = (x - mu) / np.sqrt(x.var(-1, keepdims=True) + 1e-6) * blk.norm1.gamma.data + blk.norm1.beta.data
    q = h @ blk.attn.q.weight.data + blk.attn.q.bias.data
    k = h @ blk.attn.k.weight.data + blk.attn.k.bias.data
    dh = 4
    full = np.zeros((2, 2, 17, 17))
    for head in range(2):
        qh, kh = q[..., head * dh:(head + 1) * dh], k[..., head * dh:(head + 1) * dh]
        logits = qh @ kh.transpose(0, 2, 1) / np.sqrt(dh)
        e = np.exp(logits - logits.max(-1, keepdims=True))
        full[:, head] = e / e.sum(-1, keepdims=True)
    avg = full.mean(axis=1)
    cls_scores = vit.self_attention_scores(batch, 0, "cls")
    np.testing.assert_allclose(cls_scores[:, 1:], avg[:, 0, 1:], rtol=1e-10)
    assert np.all(np.isinf(cls_scores[:, 0]))
    avg_scores = vit.self_attention_scores(batch, 0, "avg")
    np.testing.assert_allclose(avg_scores[:, 1:], avg.mean(axis=1)[:, 1:], rtol=1e-10)


def test_droppath_semantics():
    x = T.Tensor(np.ones((4, 3)))
    assert droppath(x, 0.0, True, np.random.default_rng(0)) is x
    assert droppath(x, 0.3, False) is x
    out = droppath(T.Tensor(np.ones((10_000, 1))), 0.5, True, np.random.default_rng(0)).data
    survivors = (out > 0).mean()
    assert abs(survivors - 0.5) <= 0.02
    np.testing.assert_array_equal(np.unique(out), [0.0, 2.0])


def test_pooling_examples():
    rng = np.random.default_rng(5)
    vit = ViT(small(), rng)
    tok = rng.normal(size=(1, 1, 8))
    same = TokenBatch(T.Tensor(np.concatenate([tok, tok], axis=1)), [[0, 1]])
    np.testing.assert_allclose(vit.pool(same).data, tok[:, 0], rtol=1e-12)

    vit.norm.gamma.data[:] = 1
    vit.norm.beta.data[:] = 0
    vit.head.weight.data[:] = 0
    vit.head.weight.data[0, 0] = vit.head.weight.data[1, 1] = vit.head.weight.data[2, 2] = 1
    vit.head.bias.data[:] = 0
    one = TokenBatch(T.Tensor(rng.normal(size=(1, 1, 8))), [[0]])
    normed = vit.norm(one.tokens).data[0, 0]
    np.testing.assert_allclose(vit.pool_and_head(one).data[0], normed[:3], rtol=1e-12)

    x = T.Tensor(rng.normal(size=(1, 4, 8)), requires_grad=True)
    T.sum_(vit.pool(TokenBatch(x, [[0, 1, 2, 3]]))).backward()
    np.testing.assert_allclose(x.grad, np.full((1, 4, 8), 0.25))

    with pytest.raises(ContractError):
        vit.pool(one, "cls")


def test_avg_pool_ignores_cls_and_token_order():
    rng = np.random.default_rng(6)
    vit = ViT(small(cls_token=True), rng)
    batch = vit.forward_features(rng.normal(size=(2, 2, 16, 16)))
    logits = vit.pool_and_head(batch).data
    perm = np.concatenate([[0], 1 + rng.permutation(batch.num_patches)])
    permuted = TokenBatch(T.gather_rows(batch.tokens, np.tile(perm, (2, 1))), batch.positions[:, perm], True)
    np.testing.assert_allclose(vit.pool_and_head(permuted).data, logits, rtol=1e-12)


def test_forward_shapes_and_determinism():
    cfg = small()
    a = ViT(cfg, np.random.default_rng(7))
    b = ViT(cfg, np.random.default_rng(7))
    images = np.random.default_rng(8).normal(size=(3, 2, 16, 16))
    out_a, out_b = a(images), b(images)
    assert out_a.shape == (3, 3)
    assert np.array_equal(out_a.data, out_b.data)
    feats = a.forward_features(images)
    assert feats.tokens.shape == (3, 16, 8)
