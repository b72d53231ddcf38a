import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from barlow_swin import tensor as T
from barlow_swin.encoder import (
    MASK_PENALTY,
    EncoderConfig,
    PatchEmbed,
    PatchMerging,
    SwinBlock,
    SwinEncoder,
    WindowAttention,
    relative_position_index,
    shift_attention_mask,
    window_partition,
    window_partition_reverse,
    window_reverse,
)
from barlow_swin.exceptions import ConfigError
from barlow_swin.tensor import Tensor

TINY = dict(embed_dim=8, stage_channels=(8, 16, 32), num_heads=2, window_size=2)


# --- config ---------------------------------------------------------------


def test_defaults():
    cfg = EncoderConfig()
    assert (cfg.image_size, cfg.patch_size, cfg.window_size, cfg.embed_dim) == (512, 4, 4, 96)
    assert cfg.stage_channels == (96, 192, 384) and cfg.depths == (2, 2, 2)
    assert cfg.num_heads == 8 and cfg.mlp_ratio == 4.0 and cfg.drop_path_rate == 0.1


@pytest.mark.parametrize(
    "kw, match",
    [
        (dict(image_size=48), "token grid"),
        (dict(image_size=10), "not divisible by patch_size"),
        (dict(stage_channels=(96, 190, 384)), "double"),
        (dict(num_heads=7), "heads"),
        (dict(window_size=3), "even"),
    ],
)
def test_config_validation(kw, match):
    with pytest.raises(ConfigError, match=match):
        EncoderConfig(**kw)


def test_drop_path_schedule_linear():
    np.testing.assert_allclose(EncoderConfig().drop_path_rates(), np.linspace(0, 0.1, 6))


# --- patch embedding --------------------------------------------------------


def test_patch_vector_length_48_and_grid():
    cfg = EncoderConfig()
    emb = PatchEmbed(cfg, np.random.default_rng(0))
    assert emb.proj.weight.shape == (48, 96)
    assert emb.output_shape((512, 512, 3)) == (128, 128, 96)


def test_patch_flattening_order(rng):
    emb = PatchEmbed(EncoderConfig(image_size=32, **TINY), rng)
    img = rng.standard_normal((1, 8, 8, 3))
    p = emb.patches(Tensor(img)).data
    assert p.shape == (1, 2, 2, 48)
    np.testing.assert_array_equal(p[0, 1, 0], img[0, 4:8, 0:4, :].reshape(-1))


def test_patch_embed_indivisible(rng):
    emb = PatchEmbed(EncoderConfig(image_size=32, **TINY), rng)
    with pytest.raises(ConfigError):
        emb.patches(Tensor(np.zeros((1, 10, 10, 3))))
    with pytest.raises(ConfigError):
        emb.output_shape((10, 10, 3))


def test_position_table_zero_init_and_added(rng):
    emb = PatchEmbed(EncoderConfig(image_size=32, **TINY), rng)
    assert not emb.pos.data.any()
    x = Tensor(rng.standard_normal((1, 32, 32, 3)))
    before = emb(x).data
    emb.pos.data[1, 2, 3] = 5.0
    delta = emb(x).data - before
    assert delta[0, 1, 2, 3] == pytest.approx(5.0)
    assert np.count_nonzero(delta) == 1


# --- windows ----------------------------------------------------------------


def test_partition_counts():
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    win = window_partition(x, 2)
    assert win.shape == (4, 4, 1)
    np.testing.assert_array_equal(win[0, :, 0], [0, 1, 4, 5])
    np.testing.assert_array_equal(win[1, :, 0], [2, 3, 6, 7])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 2, 4]), st.integers(1, 3))
def test_partition_reverse_roundtrip(b, nh, nw, window, c):
    h, w = nh * window, nw * window
    x = np.random.default_rng(h * 31 + w).standard_normal((b, h, w, c))
    win = window_partition_reverse(Tensor(x), window, "partition")
    assert win.shape == (b * nh * nw, window * window, c)
    back = window_partition_reverse(win, window, "reverse", h, w)
    assert back.data.tobytes() == x.tobytes()


def test_partition_divisibility_error():
    with pytest.raises(ValueError):
        window_partition(np.zeros((1, 5, 4, 1)), 2)
    with pytest.raises(ValueError):
        window_partition_reverse(np.zeros((1, 4, 4, 1)), 2, "sideways")


@given(st.integers(-6, 6), st.integers(-6, 6))
def test_cyclic_shift_inverse(s1, s2):
    x = np.random.default_rng(0).standard_normal((1, 6, 5, 2))
    y = T.roll(T.roll(Tensor(x), (s1, s2), (1, 2)), (-s1, -s2), (1, 2))
    assert y.data.tobytes() == x.tobytes()


def test_relative_position_index_range_and_symmetry():
    for w in (2, 4, 7):
        idx = relative_position_index(w)
        assert idx.shape == (w * w, w * w)
        assert idx.min() == 0 and idx.max() == (2 * w - 1) ** 2 - 1
        centre = (w - 1) * (2 * w - 1) + (w - 1)
        assert np.all(np.diag(idx) == centre)
        # pairs with the same offset share a row
        assert idx[0, 1] == idx[w, w + 1]


def test_shift_mask_blocks_wrapped_pairs():
    mask = shift_attention_mask(8, 8, 4, 2)
    assert mask.shape == (4, 16, 16)
    assert not mask[0].any()  # top-left window never wraps
    assert set(np.unique(mask)) == {0.0, MASK_PENALTY}
    np.testing.assert_array_equal(mask, mask.transpose(0, 2, 1))
    with pytest.raises(ValueError):
        mask[0, 0, 0] = 1.0


# --- attention ----------------------------------------------------------------


def test_attention_constant_values_give_constant_rows(rng, f64):
    attn = WindowAttention(4, 2, 2, rng)
    attn.qkv.weight.data[:, 8:] = 0.0
    attn.qkv.bias.data[8:] = rng.standard_normal(4)
    out = attn(Tensor(rng.standard_normal((3, 4, 4)))).data
    np.testing.assert_allclose(out, np.broadcast_to(out[:, :1], out.shape), atol=1e-12)


def test_attention_single_token_is_projected_value(rng, f64):
    attn = WindowAttention(4, 2, 1, rng)
    x = Tensor(rng.standard_normal((5, 1, 4)))
    v = (x.data @ attn.qkv.weight.data + attn.qkv.bias.data)[..., 8:]
    expected = v @ attn.proj.weight.data + attn.proj.bias.data
    np.testing.assert_allclose(attn(x).data, expected, atol=1e-12)


def test_attention_zero_qk_is_uniform(rng, f64):
    attn = WindowAttention(4, 2, 2, rng)
    attn.qkv.weight.data[:, :8] = 0.0
    x = Tensor(rng.standard_normal((2, 4, 4)))
    out, probs = attn(x, return_probs=True)
    np.testing.assert_allclose(probs.data, 0.25, atol=1e-12)
    v = (x.data @ attn.qkv.weight.data + attn.qkv.bias.data)[..., 8:]
    expected = np.broadcast_to(v.mean(axis=1, keepdims=True), v.shape) @ attn.proj.weight.data + attn.proj.bias.data
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_attention_heads_divisibility(rng):
    with pytest.raises(ConfigError):
        WindowAttention(6, 4, 2, rng)


def test_bias_table_shape(rng):
    attn = WindowAttention(8, 2, 4, rng)
    assert attn.rel_bias.shape == (49, 2)
    assert attn.bias().shape == (2, 16, 16)


def test_shifted_probabilities(rng, f64):
    block = SwinBlock(8, 2, 4, 2, rng).eval()
    for p in block.parameters().values():
        p.data[...] = rng.standard_normal(p.shape)
    x = Tensor(rng.standard_normal((2, 8, 8, 8)))
    _, probs = block.attention_branch(x, return_probs=True)
    p = probs.data.reshape(2, 4, 2, 16, 16)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    blocked = shift_attention_mask(8, 8, 4, 2) != 0
    assert p.transpose(0, 2, 1, 3, 4)[:, :, blocked].max() < 1e-6


# --- blocks -------------------------------------------------------------------


@pytest.mark.parametrize("shift", [0, 2])
def test_block_shape_preserved(rng, shift):
    block = SwinBlock(8, 2, 4, shift, rng)
    assert block(Tensor(rng.standard_normal((2, 8, 12, 8)).astype(np.float32))).shape == (2, 8, 12, 8)


def test_block_bad_shift_and_grid(rng):
    with pytest.raises(ConfigError):
        SwinBlock(8, 2, 4, 1, rng)
    with pytest.raises(ConfigError):
        SwinBlock(8, 2, 4, 0, rng)(Tensor(np.zeros((1, 6, 8, 8), dtype=np.float32)))


def test_zero_branches_give_identity(rng):
    block = SwinBlock(8, 2, 4, 2, rng, drop_path=0.1).eval()
    for lin in (block.attn.proj, block.mlp.fc2):
        lin.weight.data[...] = 0.0
        lin.bias.data[...] = 0.0
    x = rng.standard_normal((2, 8, 8, 8)).astype(np.float32)
    assert block(Tensor(x)).data.tobytes() == x.tobytes()


def test_unshifted_block_path_matches_plain_attention(rng, f64):
    block = SwinBlock(8, 2, 4, 0, rng).eval()
    x = Tensor(rng.standard_normal((1, 8, 8, 8)))
    y = block.norm1(x)
    manual = window_reverse(block.attn(window_partition(y, 4)), 4, 8, 8)
    assert block.attention_branch(x).data.tobytes() == manual.data.tobytes()


def test_drop_path_needs_rng_and_is_seeded(rng):
    block = SwinBlock(8, 2, 4, 0, rng, drop_path=0.5).train()
    x = Tensor(rng.standard_normal((4, 4, 4, 8)).astype(np.float32))
    with pytest.raises(RuntimeError, match="rng"):
        block(x)
    a = block.set_rng(np.random.default_rng(3))(x).data
    b = block.set_rng(np.random.default_rng(3))(x).data
    assert a.tobytes() == b.tobytes()


def test_patch_merging_gather_oracle(rng, f64):
    merge = PatchMerging(2, rng)
    x = rng.standard_normal((1, 4, 4, 2))
    out = merge(Tensor(x)).data
    assert out.shape == (1, 2, 2, 4)
    gathered = np.concatenate([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], axis=-1)
    for i in range(2):
        for j in range(2):
            explicit = np.concatenate([x[0, 2 * i, 2 * j], x[0, 2 * i + 1, 2 * j], x[0, 2 * i, 2 * j + 1],
                                       x[0, 2 * i + 1, 2 * j + 1]])
            np.testing.assert_array_equal(gathered[0, i, j], explicit)
    np.testing.assert_allclose(out, gathered @ merge.reduction.weight.data, atol=1e-12)
    with pytest.raises(ConfigError):
        merge(Tensor(np.zeros((1, 3, 4, 2))))


# --- encoder --------------------------------------------------------------------


def test_symbolic_shapes_512():
    enc = SwinEncoder(EncoderConfig(), np.random.default_rng(0))
    assert enc.output_shapes() == ((128, 128, 96), (64, 64, 192), (32, 32, 384))


def test_desk_forward_shapes_and_eval_determinism():
    enc = SwinEncoder(EncoderConfig(image_size=64), np.random.default_rng(0)).eval()
    x = Tensor(np.random.default_rng(1).random((1, 64, 64, 3)))
    with T.no_grad():
        a = enc(x)
        b = enc(x)
    assert a.shapes() == ((16, 16, 96), (8, 8, 192), (4, 4, 384))
    assert a.deep.data.tobytes() == b.deep.data.tobytes()
    assert a.deep.dtype == np.float32


def test_encoder_rejects_wrong_size():
    enc = SwinEncoder(EncoderConfig(image_size=32, **TINY), np.random.default_rng(0))
    with pytest.raises(ConfigError, match="expects images"):
        enc(Tensor(np.zeros((1, 64, 64, 3), dtype=np.float32)))


def test_parameter_names_deterministic():
    a = SwinEncoder(EncoderConfig(image_size=32, **TINY), np.random.default_rng(0))
    b = SwinEncoder(EncoderConfig(image_size=32, **TINY), np.random.default_rng(0))
    assert list(a.parameters()) == list(b.parameters())
    assert "stage1.block0.attn.qkv.weight" in a.parameters()
    assert all(np.array_equal(a.parameters()[k].data, b.parameters()[k].data) for k in a.parameters())
