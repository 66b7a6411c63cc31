import math

import numpy as np
import pytest
import torch

from wholebody_lift.gradcheck import END_TO_END_TOL, SUBLAYER_TOL, finite_difference_error, randomize_parameters
from wholebody_lift.model import (
    BodyPartDecoder,
    JointEmbedding,
    ModelConfig,
    PoseLifter,
    SelfAttentionBlock,
    SemGANLayer,
    SemGraphConv,
    build_model,
    count_parameters,
)
from wholebody_lift.skeleton import build_adjacency


@pytest.fixture(scope="module")
def adj(topo):
    return build_adjacency(topo)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(feature_dim=256, attention_heads=7)
    with pytest.raises(ValueError, match="dropout"):
        ModelConfig(dropout=1.0)
    cfg = ModelConfig()
    assert (cfg.feature_dim, cfg.encoder_layers, cfg.attention_heads, cfg.decoder_blocks_per_part) == (256, 4, 8, 2)


# --- joint embedding -------------------------------------------------------


def test_embedding_linearity():
    emb = JointEmbedding(133, 3, 256).double()
    with torch.no_grad():
        emb.proj.bias.zero_()
        emb.index_embed.zero_()
    assert torch.count_nonzero(emb(torch.zeros(2, 133, 3, dtype=torch.float64))) == 0
    x = torch.randn(2, 133, 3, dtype=torch.float64)
    out = emb(x)
    assert out.shape == (2, 133, 256)
    torch.testing.assert_close(emb(2 * x), 2 * out, rtol=0, atol=1e-6)


def test_embedding_shape_check():
    with pytest.raises(ValueError):
        JointEmbedding(133, 3, 256)(torch.zeros(1, 133, 2))


# --- SemGCN ---------------------------------------------------------------


def test_semgcn_single_node():
    gcn = SemGraphConv(4, 5, np.ones((1, 1), dtype=bool)).double()
    h = torch.randn(2, 1, 4, dtype=torch.float64)
    assert gcn.edge_weights().item() == 1.0
    expected = torch.nn.functional.gelu(h @ gcn.W_self + h @ gcn.W_neigh + gcn.bias)
    torch.testing.assert_close(gcn(h), expected)


def test_semgcn_equal_logits_split_evenly():
    mask = np.array([[1, 1], [1, 1]], dtype=bool)
    w = SemGraphConv(3, 3, mask).edge_weights()
    torch.testing.assert_close(w, torch.full((2, 2), 0.5))


def _dense_semgcn_oracle(h, mask, logits_dense, w_self, w_neigh, bias):
    """Dense reference with masked logits set to -inf."""
    z = np.where(mask, logits_dense, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    a = e / e.sum(axis=1, keepdims=True)
    pre = h @ w_self + a @ (h @ w_neigh) + bias
    return 0.5 * pre * (1 + np.vectorize(math.erf)(pre / math.sqrt(2)))


def test_semgcn_matches_dense_oracle():
    mask = np.array([[1, 1, 0, 0], [1, 1, 1, 0], [0, 1, 1, 1], [0, 0, 1, 1]], dtype=bool)
    gcn = randomize_parameters(SemGraphConv(6, 5, mask).double(), seed=3)
    logits = np.zeros((4, 4))
    logits[mask] = gcn.edge_logits.detach().numpy()  # row-major order of nonzero()
    h = np.random.default_rng(0).normal(size=(2, 4, 6))
    expected = _dense_semgcn_oracle(
        h, mask, logits, gcn.W_self.detach().numpy(), gcn.W_neigh.detach().numpy(), gcn.bias.detach().numpy()
    )
    got = gcn(torch.as_tensor(h)).detach().numpy()
    np.testing.assert_allclose(got, expected, atol=1e-6)


def test_semgcn_rows_sum_to_one(adj):
    gcn = randomize_parameters(SemGraphConv(8, 8, adj).double(), seed=1)
    w = gcn.edge_weights()
    torch.testing.assert_close(w.sum(dim=1), torch.ones(133, dtype=torch.float64), rtol=0, atol=1e-6)
    assert torch.count_nonzero(w[torch.as_tensor(~adj)]) == 0


def test_semgcn_rejects_empty_row():
    with pytest.raises(ValueError, match="neighbours"):
        SemGraphConv(2, 2, np.array([[1, 0], [0, 0]], dtype=bool))


# --- self-attention ---------------------------------------------------------


def test_attention_uniform_for_identical_tokens():
    block = randomize_parameters(SelfAttentionBlock(32, 4).double(), seed=0)
    h = torch.randn(1, 1, 32, dtype=torch.float64).expand(2, 23, 32)
    _, w = block.attend(block.norm(h))
    torch.testing.assert_close(w, torch.full_like(w, 1 / 23))


def test_attention_rows_sum_to_one():
    block = randomize_parameters(SelfAttentionBlock(64, 8).double(), seed=0)
    _, w = block.attend(torch.randn(3, 42, 64, dtype=torch.float64))
    torch.testing.assert_close(w.sum(-1), torch.ones(3, 8, 42, dtype=torch.float64), rtol=0, atol=1e-6)


def test_attention_hand_unrolled():
    d, n = 4, 3
    block = SelfAttentionBlock(d, 1).double()
    rng = np.random.default_rng(5)
    wq, wk, wv, wo = (rng.normal(size=(d, d)) for _ in range(4))
    with torch.no_grad():
        block.qkv.weight.copy_(torch.as_tensor(np.concatenate([wq, wk, wv])))
        block.qkv.bias.zero_()
        block.out.weight.copy_(torch.as_tensor(wo))
        block.out.bias.zero_()
    h = rng.normal(size=(n, d))

    normed = []
    for t in range(n):
        mu = sum(h[t]) / d
        var = sum((v - mu) ** 2 for v in h[t]) / d
        normed.append((h[t] - mu) / math.sqrt(var + 1e-5))
    expected = np.zeros((n, d))
    for i in range(n):
        row = h[i]
        q = wq @ normed[i]
        scores = [float(q @ (wk @ normed[t])) / math.sqrt(d) for t in range(n)]
        m = max(scores)
        ex = [math.exp(s - m) for s in scores]
        attn = [e / sum(ex) for e in ex]
        ctx = sum(attn[t] * (wv @ normed[t]) for t in range(n))
        expected[i] = row + wo @ ctx
    got = block(torch.as_tensor(h)[None]).detach().numpy()[0]
    np.testing.assert_allclose(got, expected, atol=1e-6)


def test_attention_head_check():
    with pytest.raises(ValueError):
        SelfAttentionBlock(256, 7)


# --- SemGAN layer -----------------------------------------------------------


def test_semgan_shape_and_residual_identity(adj):
    layer = randomize_parameters(SemGANLayer(256, 8, adj).double().eval(), seed=2)
    h = torch.randn(2, 133, 256, dtype=torch.float64)
    assert layer(h).shape == (2, 133, 256)
    with torch.no_grad():
        layer.gcn.W_self.zero_()
        layer.gcn.W_neigh.zero_()
        layer.gcn.bias.zero_()
    torch.testing.assert_close(layer(h), layer.attn(h), rtol=0, atol=1e-7)


def test_semgan_gradients_match_finite_differences(adj):
    torch.manual_seed(0)
    layer = randomize_parameters(SemGANLayer(32, 4, adj).double().eval(), seed=4)
    h = torch.randn(1, 133, 32, dtype=torch.float64, requires_grad=True)
    params = [h] + list(layer.parameters())
    err, k = finite_difference_error(lambda: layer(h).sum(), params, num_entries=None)
    assert k == sum(p.numel() for p in params)
    assert err < SUBLAYER_TOL


# --- encoder / decoder / full model ----------------------------------------


@pytest.fixture(scope="module")
def model(topo):
    m = build_model(ModelConfig(), topo, seed=0).double().eval()
    return randomize_parameters(m, seed=7)


def test_encoder_shape_and_determinism(model):
    x = torch.randn(2, 133, 3, dtype=torch.float64)
    a = model.encoder(x)
    assert a.shape == (2, 133, 256)
    assert torch.equal(a, model.encoder(x))


def test_encoder_is_not_permutation_equivariant(model, topo, adj):
    # joints 17 (left big toe) and 30 (face): not adjacent, not a flip pair
    i, j = 17, 30
    assert not adj[i, j]
    assert dict(topo.flip_pairs).get(i) != j
    x = torch.randn(1, 133, 3, dtype=torch.float64)
    perm = torch.arange(133)
    perm[i], perm[j] = j, i
    out = model.encoder(x)
    out_perm = model.encoder(x[:, perm])
    assert not torch.allclose(out_perm, out[:, perm])
    assert not torch.allclose(out_perm, out)


def test_encoder_has_four_semgan_layers(model):
    assert len(model.encoder.layers) == 4
    assert all(layer.use_gcn for layer in model.encoder.layers)


def test_last_layer_only_switch(topo):
    m = PoseLifter(ModelConfig(semgcn_last_layer_only=True), topo)
    assert [layer.use_gcn for layer in m.encoder.layers] == [False, False, False, True]


def test_post_norm_switch(topo, adj):
    block = SelfAttentionBlock(16, 2, norm_first=False).double()
    h = torch.randn(2, 5, 16, dtype=torch.float64) * 3 + 1
    # zero out-projection: the block reduces to LayerNorm of its input
    torch.testing.assert_close(block(h), block.norm(h))
    cfg = ModelConfig(norm_first=False, dropout=0.0)
    m = PoseLifter(cfg, topo).double().eval()
    assert count_parameters(m) == count_parameters(PoseLifter(ModelConfig(), topo))
    out = m(torch.randn(1, 133, 3, dtype=torch.float64))
    assert out.joints_3d.shape == (1, 133, 3) and torch.isfinite(out.joints_3d).all()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_decoder_reassembly_with_identity_blocks(topo, adj):
    dec = BodyPartDecoder(ModelConfig(dropout=0.0), adj, topo.part_ranges).double().eval()
    # out projections start at zero, so every attention block is the identity
    h = torch.randn(2, 133, 256, dtype=torch.float64)
    assert torch.equal(dec.part_features(h), h)
    sizes = {k: hi - lo for k, (lo, hi) in dec.part_ranges.items()}
    assert sizes == {"body": 23, "face": 68, "hands": 42}
    assert [len(dec.parts[k]) for k in ("body", "face", "hands")] == [2, 2, 2]


def test_decoder_part_isolation(model, topo):
    dec = model.decoder
    h = torch.randn(1, 133, 256, dtype=torch.float64)
    h2 = h.clone()
    h2[:, 91:133] += torch.randn(1, 42, 256, dtype=torch.float64)
    f1, f2 = dec.part_features(h), dec.part_features(h2)
    assert torch.equal(f1[:, :91], f2[:, :91])
    o1, o2 = dec(h), dec(h2)
    # body wrists are graph neighbours of the hand roots
    for wrist in (9, 10):
        assert not torch.allclose(o1.joints_3d[:, wrist], o2.joints_3d[:, wrist])
    assert torch.equal(o1.joints_3d[:, 0], o2.joints_3d[:, 0])


def test_forward_shapes_and_determinism(model):
    x = torch.randn(3, 133, 3, dtype=torch.float64)
    out = model(x)
    assert out.joints_3d.shape == (3, 133, 3)
    assert out.error.shape == (3, 133, 3)
    again = model(x)
    assert torch.equal(out.joints_3d, again.joints_3d) and torch.equal(out.error, again.error)


def test_dropout_only_in_train_mode(topo):
    m = build_model(ModelConfig(), topo, seed=0)
    randomize_parameters(m, seed=1)
    x = torch.randn(1, 133, 3)
    m.train()
    assert not torch.equal(m(x).joints_3d, m(x).joints_3d)
    m.eval()
    assert torch.equal(m(x).joints_3d, m(x).joints_3d)


def _expected_parameter_count(cfg, num_edges):
    d, j = cfg.feature_dim, cfg.num_joints
    layernorm = 2 * d
    attention = layernorm + (d * 3 * d + 3 * d) + (d * d + d)
    gcn = lambda din, dout: 2 * din * dout + dout + num_edges
    embedding = cfg.input_dim * d + d + j * d
    encoder = embedding + cfg.encoder_layers * (attention + layernorm + gcn(d, d))
    decoder = 3 * cfg.decoder_blocks_per_part * attention + layernorm + gcn(d, 3) + (d * 3 + 3)
    return encoder + decoder


def test_parameter_count(topo, adj):
    cfg = ModelConfig()
    num_edges = int(adj.sum())
    assert num_edges == 133 + 2 * 132
    expected = _expected_parameter_count(cfg, num_edges)
    assert count_parameters(PoseLifter(cfg, topo)) == expected == 3_204_039


def test_seeded_build_is_reproducible(topo):
    a = build_model(ModelConfig(), topo, seed=3)
    b = build_model(ModelConfig(), topo, seed=3)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_full_model_gradient_check(model):
    x = torch.randn(1, 133, 3, dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    w = torch.randn(1, 133, 3, generator=g, dtype=torch.float64)
    params = list(model.parameters())
    err, k = finite_difference_error(lambda: (model(x).joints_3d * w).sum(), params, num_entries=20, seed=1)
    assert k == 20
    assert err < END_TO_END_TOL
