import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from medvis.insert import (
    FrozenBlockConfig,
    LLMInsert,
    Mapper,
    build_frozen_block,
    freeze_audit,
    insert_param_counts,
    lora_linear_forward,
    mapper_forward,
    save_block_snapshot,
    weight_source_id,
)
from medvis.layers import Linear, TransformerBlock, block_param_count
from medvis.model import ModelSpec, build_model, count_parameters, enumerate_parameters
from medvis.numerics import ShapeError, Tensor, finite_difference_check, no_grad, ops
from medvis.vit import Decoder, Encoder, PatchEmbedding, ViTConfig, depatchify, patchify, vit_param_count

from . import oracles

TOY = ViTConfig(image_size=16, patch_size=4, embed_dim=32, depth=1, heads=4, decoder_depth=1)
TOY_INSERT = FrozenBlockConfig(dim=48, heads=4, mlp_hidden=96, rank=2)


# --- patchify

def test_patchify_large_volume_arithmetic():
    cfg = ViTConfig(image_size=128, patch_size=8, embed_dim=64, heads=4)
    assert cfg.num_tokens == 4096 and cfg.patch_voxels == 512


def test_single_patch_is_flattened_volume(rng):
    v = rng.standard_normal((4, 4, 4))
    seq = patchify(v, 4)
    assert seq.tokens.shape == (1, 64)
    np.testing.assert_array_equal(seq.tokens[0], v.ravel())


def test_patchify_matches_loop_oracle(rng):
    v = rng.standard_normal((8, 6, 4))
    np.testing.assert_array_equal(patchify(v, (4, 3, 2)).tokens, oracles.patchify_loop(v, (4, 3, 2)))


@given(st.tuples(*[st.integers(1, 3)] * 3), st.tuples(*[st.integers(1, 3)] * 3), st.integers(0, 99))
def test_patchify_inverse_pair(grid, patch, seed):
    shape = tuple(g * p for g, p in zip(grid, patch))
    v = np.random.default_rng(seed).standard_normal((2, *shape))
    seq = patchify(v, patch)
    assert seq.grid == grid
    assert depatchify(seq, grid, patch).tobytes() == v.tobytes()
    np.testing.assert_array_equal(patchify(depatchify(seq.tokens, grid, patch), patch).tokens, seq.tokens)


def test_patchify_non_divisible_names_axis():
    with pytest.raises(ShapeError, match="axis 1"):
        patchify(np.zeros((4, 5, 4)), 4)
    with pytest.raises(ValueError, match="axis 2"):
        ViTConfig(image_size=(8, 8, 6), patch_size=4)


# --- embedding, encoder, decoder

def test_embedding_zero_weights_gives_positional_table(rng):
    emb = PatchEmbedding(TOY, seed=0)
    emb.proj.weight.data[...] = 0
    out = emb(Tensor(rng.standard_normal((TOY.num_tokens, 64)).astype(np.float32)))
    np.testing.assert_array_equal(out.data, emb.pos.data)


def test_embedding_identity_weights(rng):
    cfg = ViTConfig(image_size=4, patch_size=4, embed_dim=64, heads=4)
    emb = PatchEmbedding(cfg, seed=0)
    emb.proj.weight.data = np.eye(64, dtype=np.float32)
    tok = rng.standard_normal((1, 64)).astype(np.float32)
    np.testing.assert_array_equal(emb(Tensor(tok)).data, tok + emb.pos.data)


def test_embedding_token_count_mismatch():
    with pytest.raises(ShapeError):
        PatchEmbedding(TOY, 0)(Tensor(np.zeros((3, 64), np.float32)))


def test_positional_table_gradient(f64, rng):
    emb = PatchEmbedding(TOY, seed=0)
    raw = Tensor(rng.standard_normal((TOY.num_tokens, 64)))
    rep = finite_difference_check(emb, [raw], params=[emb.pos], max_entries=40)
    assert rep.passed, str(rep)


def test_depth_zero_encoder_is_identity(rng):
    enc = Encoder(ViTConfig(depth=0), 0)
    x = Tensor(rng.standard_normal((512, 64)).astype(np.float32))
    assert enc(x) is x


def test_encoder_permutation_equivariance(f64, rng):
    enc = Encoder(TOY, 3)
    x = rng.standard_normal((TOY.num_tokens, 32))
    perm = rng.permutation(TOY.num_tokens)
    with no_grad():
        a = enc(Tensor(x)).data
        b = enc(Tensor(x[perm])).data
    np.testing.assert_allclose(b, a[perm], atol=1e-6)


def test_zero_head_gives_half_probability(rng):
    dec = Decoder(TOY, 0)
    dec.head.weight.data[...] = 0
    logits = dec(Tensor(rng.standard_normal((1, TOY.num_tokens, 32)).astype(np.float32)))
    assert logits.shape == (1, 16, 16, 16)
    assert not logits.data.any()
    assert (ops.sigmoid(logits).data == 0.5).all()


def test_decoder_grid_mismatch():
    with pytest.raises(ShapeError):
        Decoder(TOY, 0)(Tensor(np.zeros((1, 5, 32), np.float32)))


def test_logits_shape_and_determinism(rng):
    x = rng.standard_normal((2, 16, 16, 16)).astype(np.float32)
    a = build_model(ModelSpec(vit=TOY), seed=5)
    b = build_model(ModelSpec(vit=TOY), seed=5)
    with no_grad():
        ya, yb = a(x).data, b(x).data
    assert ya.shape == x.shape
    assert ya.tobytes() == yb.tobytes()


def test_base_count_by_hand():
    # embed 64*32+32 + pos 64*32; two blocks of 4*(32*32+32) + 32*128+128 + 128*32+32 + 4*32; head 32*64+64
    block = 4 * (32 * 32 + 32) + (32 * 128 + 128) + (128 * 32 + 32) + 4 * 32
    hand = (64 * 32 + 32) + 64 * 32 + 2 * block + (32 * 64 + 64)
    assert vit_param_count(TOY) == hand
    assert enumerate_parameters(build_model(ModelSpec(vit=TOY)))[2] == hand


def test_toy_linear_count():
    assert enumerate_parameters(Linear("l", 4, 3, 0))[2] == 15


# --- mappers and LoRA

def test_mapper_count_and_zero_a(rng):
    m = Mapper("m", 8, 16, 2, seed=0)
    assert enumerate_parameters(m)[2] == 2 * (8 + 16) + 16
    m.A.data[...] = 0
    m.bias.data = rng.standard_normal(16).astype(np.float32)
    out = mapper_forward(Tensor(rng.standard_normal((5, 8)).astype(np.float32)), m)
    np.testing.assert_array_equal(out.data, np.broadcast_to(m.bias.data, (5, 16)))


def test_mapper_dim_mismatch():
    with pytest.raises(ShapeError):
        Mapper("m", 8, 16, 2, 0)(Tensor(np.zeros((3, 7), np.float32)))


@pytest.mark.parametrize("rank", [1, 2, 3])
def test_mapper_rank_bound(rank):
    m = Mapper("m", 10, 12, rank, seed=rank)
    s = np.linalg.svd(m.matrix().astype(np.float64), compute_uv=False)
    assert int((s > 1e-5 * s[0]).sum()) <= rank


def test_fresh_lora_is_exact_base(rng):
    lin = Linear("l", 6, 5, 0, bias=False, trainable=False)
    x = Tensor(rng.standard_normal((3, 6)).astype(np.float32))
    base = lin(x).data
    lin.attach_lora(2, 2.0, seed=1)
    assert lora_linear_forward(x, lin).data.tobytes() == base.tobytes()


def test_alpha_zero_lora_is_base(rng):
    lin = Linear("l", 6, 5, 0, bias=False, trainable=False)
    x = Tensor(rng.standard_normal((3, 6)).astype(np.float32))
    base = lin(x).data
    ad = lin.attach_lora(2, 0.0, seed=1)
    ad.B.data = rng.standard_normal(ad.B.shape).astype(np.float32)
    np.testing.assert_array_equal(lin(x).data, base)


def test_lora_gradient_only_reaches_adapter(f64, rng):
    lin = Linear("l", 6, 5, 0, bias=False, trainable=False)
    ad = lin.attach_lora(2, 4.0, seed=1)
    ad.B.data = rng.standard_normal(ad.B.shape)
    rep = finite_difference_check(lin, [Tensor(rng.standard_normal((3, 6)))], params=lin.parameters())
    assert set(rep.max_rel_error) == {"l.lora_A", "l.lora_B"}
    assert rep.passed, str(rep)


# --- frozen block and insert

def test_frozen_block_single_token_is_value_path(f64, rng):
    blk = build_frozen_block(FrozenBlockConfig(dim=8, heads=2, mlp_hidden=16), lora=False)
    x = Tensor(rng.standard_normal((1, 8)))
    h = blk.norm1(x)
    expected = x.data + blk.attn.output(blk.attn.value(h)).data
    with no_grad():
        attn_out = ops.add(x, blk.attn(blk.norm1(x))).data
    np.testing.assert_allclose(attn_out, expected, atol=1e-12)


def test_frozen_block_permutation_equivariance(f64, rng):
    blk = build_frozen_block(TOY_INSERT, lora=True, seed=0)
    x = rng.standard_normal((7, 48))
    perm = rng.permutation(7)
    np.testing.assert_allclose(blk(Tensor(x[perm])).data, blk(Tensor(x)).data[perm], atol=1e-6)


def test_zero_lora_block_equals_pure_block(rng):
    x = Tensor(rng.standard_normal((5, 48)).astype(np.float32))
    plain = build_frozen_block(TOY_INSERT, lora=False)(x).data
    adapted = build_frozen_block(TOY_INSERT, lora=True, seed=9)(x).data
    assert plain.tobytes() == adapted.tobytes()


def test_frozen_block_dim_mismatch():
    with pytest.raises(ShapeError):
        build_frozen_block(TOY_INSERT)(Tensor(np.zeros((2, 47), np.float32)))


def test_insert_identity_at_init(rng):
    ins = LLMInsert(32, TOY_INSERT, seed=0)
    p = Tensor(rng.standard_normal((1, 64, 32)).astype(np.float32))
    assert ins(p).data.tobytes() == p.data.tobytes()


def test_insert_residual_definition(f64, rng):
    ins = LLMInsert(32, TOY_INSERT, seed=0)
    ins.mapper_out.B.data = rng.standard_normal(ins.mapper_out.B.shape)
    p = Tensor(rng.standard_normal((64, 32)))
    np.testing.assert_allclose(ins(p).data - p.data, ins.branch(p).data, atol=1e-12)


@pytest.mark.parametrize("mode", ["lora", "linear"])
def test_insert_gradient(f64, rng, mode):
    ins = LLMInsert(32, TOY_INSERT, seed=0, mode=mode)
    for p in ins.parameters():
        # a large bias would make every token identical and flatten the attention
        if p.trainable and not p.data.any() and not p.name.endswith("bias"):
            p.data = rng.normal(0, 0.5, p.shape)
    ins.block.attn.key.weight.data *= 50
    rep = finite_difference_check(ins, [Tensor(rng.standard_normal((6, 32)), requires_grad=True)],
                                  max_entries=30)
    assert rep.passed, str(rep)
    assert not any(k.startswith("insert.block") and "lora" not in k for k in rep.max_rel_error)


def test_freeze_audit_partitions():
    base = build_model(ModelSpec(vit=TOY), 0)
    assert freeze_audit(base).frozen_count == 0
    llama = build_model(ModelSpec(vit=TOY, bridge="llama-lora", insert=TOY_INSERT), 0)
    rep = freeze_audit(llama)
    assert rep.frozen_count == block_param_count(48, 96, bias=False)
    assert all(k.startswith("insert.block.") and "lora" not in k for k in rep.frozen)


def test_seeded_frozen_weights_deterministic():
    a = build_frozen_block(TOY_INSERT).state_dict()
    b = build_frozen_block(TOY_INSERT, seed=99).state_dict()
    for k, v in a.items():
        if "lora" not in k:
            assert v.tobytes() == b[k].tobytes()
    assert weight_source_id(TOY_INSERT) == weight_source_id(TOY_INSERT)


def test_block_snapshot_roundtrip(tmp_path):
    src = build_frozen_block(FrozenBlockConfig(dim=48, heads=4, mlp_hidden=96, weight_seed=77))
    save_block_snapshot(src, tmp_path / "blk.lbsw")
    cfg = FrozenBlockConfig(dim=48, heads=4, mlp_hidden=96, source="snapshot",
                            snapshot_path=str(tmp_path / "blk.lbsw"))
    dst = build_frozen_block(cfg)
    for k, v in src.state_dict().items():
        assert dst.state_dict()[k].tobytes() == v.tobytes()
    assert weight_source_id(cfg).startswith("sha256:")


def test_block_snapshot_wrong_dim(tmp_path):
    save_block_snapshot(build_frozen_block(TOY_INSERT), tmp_path / "blk.lbsw")
    cfg = FrozenBlockConfig(dim=64, heads=4, mlp_hidden=96, source="snapshot",
                            snapshot_path=str(tmp_path / "blk.lbsw"))
    with pytest.raises(ValueError, match="expected"):
        build_frozen_block(cfg)


# --- counts

def test_insert_count_toy():
    t, f = insert_param_counts(8, FrozenBlockConfig(dim=16, heads=2, mlp_hidden=32, rank=2))
    # mappers 2*2*(8+16) + 16 + 8, LoRA on query and value 2 * 2*(16+16)
    assert t == 96 + 24 + 128
    assert f == block_param_count(16, 32, bias=False)


def test_llama_linear_mapper_count():
    t, _ = insert_param_counts(64, FrozenBlockConfig(dim=128), mode="linear")
    assert t == 16576


@given(st.sampled_from([8, 16, 32]), st.sampled_from([16, 32, 48]), st.integers(1, 12),
       st.lists(st.sampled_from(["query", "key", "value", "output", "mlp-in", "mlp-out"]),
                min_size=1, max_size=6, unique=True))
def test_insert_count_affine_in_rank(d_v, d_l, r, targets):
    def count(rank):
        cfg = FrozenBlockConfig(dim=d_l, heads=4, mlp_hidden=2 * d_l, rank=rank, lora_targets=targets)
        return insert_param_counts(d_v, cfg)[0]

    sizes = {"query": 2 * d_l, "key": 2 * d_l, "value": 2 * d_l, "output": 2 * d_l,
             "mlp-in": 3 * d_l, "mlp-out": 3 * d_l}
    slope = 2 * (d_v + d_l) + sum(sizes[t] for t in targets)
    assert count(r + 1) - count(r) == slope


@pytest.mark.parametrize("bridge", ["none", "llama-lora", "llama-linear", "mlp"])
def test_closed_form_equals_enumeration(bridge):
    spec = ModelSpec(vit=TOY, bridge=bridge, insert=TOY_INSERT if "llama" in bridge else None,
                     mlp_width=40 if bridge == "mlp" else 0)
    assert count_parameters(spec) == enumerate_parameters(build_model(spec))


def test_model_spec_roundtrip():
    spec = ModelSpec(vit=TOY, bridge="llama-lora", insert=TOY_INSERT, name="x")
    assert ModelSpec.from_dict(spec.to_dict()) == spec


def test_transformer_block_rejects_unknown_target():
    with pytest.raises(ValueError):
        TransformerBlock("b", 8, 2, 16, 0).linear_for("gate")
