import numpy as np
import pytest

from smrabooth import dit, flowmatch, lora
from smrabooth import numerics as nm
from smrabooth.errors import EmptyPrompt, ShapeError
from smrabooth.numerics import ParamStore, Tensor
from smrabooth.toyvae import D_LAT

TOY = dit.ModelConfig(d_model=16, n_blocks=2, n_heads=2, d_ffn=32)


def _latent(shape=(1, 2, 2, D_LAT), seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape).astype(np.float32))


def test_named_layers_counts_and_types():
    cfg = dit.ModelConfig()  # 4 blocks
    target = dit.targetable_layers(cfg)
    assert len(target) == 24
    assert {l.layer_type for l in target} == {"q", "k", "v", "o", "ffn.0", "ffn.2"}
    all_layers = dit.named_layers(cfg)
    cross = [l for l in all_layers if l.layer_type == "cross"]
    assert len(cross) == 16
    assert not any(l.targetable for l in cross)


def test_cross_attention_targetable_via_flag():
    cfg = dit.ModelConfig(lora_cross_attn=True)
    assert any(l.layer_type == "cross" and l.targetable
               for l in dit.named_layers(cfg))


def test_embed_text_deterministic():
    a = dit.embed_text("a red circle slides", 3, TOY)
    b = dit.embed_text("a red circle slides", 3, TOY)
    assert a.token_ids == b.token_ids
    assert np.array_equal(a.embeddings.data, b.embeddings.data)


def test_embed_text_reserved_rows_never_collide():
    cond = dit.embed_text("V* S* circle square slides spins jumps", 1, TOY)
    assert cond.token_ids[0] == dit.VSTAR_ID
    assert cond.token_ids[1] == dit.SSTAR_ID
    assert all(tid >= 3 for tid in cond.token_ids[2:])


def test_embed_text_seed_changes_values_not_ids():
    a = dit.embed_text("some ordinary words", 1, TOY)
    b = dit.embed_text("some ordinary words", 2, TOY)
    assert a.token_ids == b.token_ids
    assert not np.array_equal(a.embeddings.data, b.embeddings.data)


def test_embed_text_empty_is_null_token():
    cond = dit.embed_text("", 1, TOY)
    assert cond.token_ids == [dit.NULL_ID]


def test_embed_text_whitespace_only_raises():
    with pytest.raises(EmptyPrompt):
        dit.embed_text("   ", 1, TOY)


def test_embed_text_truncates_to_max_tokens():
    cond = dit.embed_text(" ".join(f"w{i}" for i in range(20)), 1, TOY)
    assert len(cond.token_ids) == TOY.max_text_tokens


def test_forward_shapes_and_determinism():
    params = dit.init_params(TOY, 0)
    cond = dit.embed_text("hello world", 0, TOY)
    z = _latent((2, 2, 2, D_LAT))
    a = dit.forward(TOY, params, z, 0.5, cond)
    b = dit.forward(TOY, params, z, 0.5, cond)
    assert a.velocity.shape == z.shape
    assert a.tap.shape == (2 * 2 * 2, TOY.d_model)
    assert np.array_equal(a.velocity.data, b.velocity.data)
    assert np.array_equal(a.tap.data, b.tap.data)


def test_forward_rejects_bad_shapes():
    params = dit.init_params(TOY, 0)
    cond = dit.embed_text("x", 0, TOY)
    with pytest.raises(ShapeError):
        dit.forward(TOY, params, Tensor(np.zeros((1, 2, 2, 7), np.float32)),
                    0.5, cond)
    with pytest.raises(ShapeError):
        dit.forward(TOY, params, _latent(), 1.5, cond)


def test_zero_b_lora_is_bit_identical():
    params = dit.init_params(TOY, 0)
    cond = dit.embed_text("x y", 0, TOY)
    z = _latent()
    plain = dit.forward(TOY, params, z, 0.3, cond).velocity.data
    subject = lora.attach("subject", TOY, 3, seed=5)
    motion = lora.attach("motion", TOY, 3, seed=6)
    ctx = lora.merge(subject, motion, 1)
    decorated = dit.forward(TOY, params, z, 0.3, cond, ctx).velocity.data
    assert np.array_equal(plain, decorated)


def test_tap_locality():
    params = dit.init_params(TOY, 0)
    cond = dit.embed_text("x", 0, TOY)
    z = _latent()
    tap0 = dit.forward(TOY, params, z, 0.5, cond).tap.data
    later = params.copy()
    rng = np.random.default_rng(1)
    for name in ("block2.self_attn.q.weight", "block2.ffn.0.weight",
                 "block2.ln1.gain", "final_ln.gain", "head.weight"):
        later[name].data += rng.normal(0, 0.1, later[name].shape).astype(np.float32)
    assert np.array_equal(dit.forward(TOY, later, z, 0.5, cond).tap.data, tap0)
    first = params.copy()
    first["block1.self_attn.v.weight"].data += 0.1
    assert not np.array_equal(dit.forward(TOY, first, z, 0.5, cond).tap.data, tap0)


def test_token_overrides_swap_reserved_rows():
    params = dit.init_params(TOY, 0)
    cond = dit.embed_text("a V* b", 0, TOY)
    z = _latent()
    base = dit.forward(TOY, params, z, 0.5, cond).tap.data
    row = Tensor(np.full(TOY.d_model, 0.3, dtype=np.float32))
    swapped = dit.forward(TOY, params, z, 0.5, cond,
                          token_overrides={"text.vstar": row}).tap.data
    assert not np.array_equal(base, swapped)
    # overrides to a prompt without reserved tokens are a no-op
    plain_cond = dit.embed_text("a b", 0, TOY)
    x = dit.forward(TOY, params, z, 0.5, plain_cond).tap.data
    y = dit.forward(TOY, params, z, 0.5, plain_cond,
                    token_overrides={"text.vstar": row}).tap.data
    assert np.array_equal(x, y)


def test_velocity_grad_check_one_block():
    cfg = dit.ModelConfig(d_model=8, n_blocks=1, n_heads=2, d_ffn=16)
    params = dit.init_params(cfg, 1)
    params["head.weight"].data[:] = np.random.default_rng(8).normal(
        0, 0.05, params["head.weight"].shape)
    cond = dit.embed_text("t u", 1, cfg)
    z = nm.constant(np.random.default_rng(9).normal(size=(1, 2, 2, D_LAT)),
                    dtype=np.float64)
    probe = ParamStore()
    for name in ("block1.self_attn.q.weight", "block1.self_attn.o.weight",
                 "block1.ffn.0.bias", "block1.ln1.gain", "head.bias"):
        probe.add(name, params[name].data.copy())

    def loss_fn(ps):
        merged = ParamStore(params.rng_seed)
        for name, p in params.items():
            if name in ps:
                merged.add(name, ps[name], trainable=True)
            else:
                merged.add(name, Tensor(p.data), trainable=False)
        out = dit.forward(cfg, merged, z, 0.37, cond)
        return (out.velocity * out.velocity).mean()

    report = nm.grad_check(loss_fn, probe)
    assert report.passed, f"{report.max_rel_err} on {report.worst_param}"
