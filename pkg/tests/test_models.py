import numpy as np
import pytest

from ecgtext import autodiff as ad
from ecgtext import models
from ecgtext.autodiff import Tensor
from ecgtext.exceptions import ConfigError
from ecgtext.models import EncoderConfig
from oracles import max_rel_err


@pytest.fixture()
def config():
    return EncoderConfig(
        vocab_size=10,
        max_report_len=9,
        n_leads=3,
        patches_per_lead=4,
        p=5,
        d_model=16,
        n_heads=4,
        depth_ecg=1,
        depth_text=1,
        depth_dec=1,
        d_proj=8,
    ).validate()


@pytest.fixture()
def params(config):
    return models.init_params(config, seed=0, dtype=np.float64)


def grid(config):
    lead = np.repeat(np.arange(config.n_leads), config.patches_per_lead)
    time = np.tile(np.arange(config.patches_per_lead), config.n_leads)
    return lead, time


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(vocab_size=5, max_report_len=4, d_model=10, n_heads=4).validate()
    with pytest.raises(ConfigError):
        EncoderConfig(vocab_size=5, max_report_len=4, activation="swish").validate()


def test_init_is_deterministic(config):
    a = models.init_params(config, seed=3)
    b = models.init_params(config, seed=3)
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    c = models.init_params(config, seed=4)
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a)


def test_flatten_round_trip_bit_exact(config):
    params = models.init_params(config, seed=1)
    flat = models.flatten_params(params, config)
    back = models.unflatten_params(flat, config)
    assert set(back) == set(params)
    for name in params:
        np.testing.assert_array_equal(back[name].data, params[name].data)
    np.testing.assert_array_equal(models.flatten_params(back, config), flat)


def test_layout_hash_tracks_architecture(config):
    same = EncoderConfig(**{**config.__dict__})
    assert models.param_layout_hash(config) == models.param_layout_hash(same)
    other = EncoderConfig(**{**config.__dict__, "d_model": 32})
    assert models.param_layout_hash(config) != models.param_layout_hash(other)


def test_embed_patches_zero_everything_is_zero(config, params):
    lead, time = grid(config)
    params["ecg.pos_lead"].data[:] = 0.0
    params["ecg.pos_time"].data[:] = 0.0
    patches = Tensor(np.zeros((2, config.n_patches, config.p)))
    tokens = models.embed_patches(patches, lead, time, params)
    np.testing.assert_array_equal(tokens.data, 0.0)


def test_embed_patches_position_separates_identical_content(config, params):
    lead, time = grid(config)
    patch = np.ones((1, config.n_patches, config.p))
    tokens = models.embed_patches(Tensor(patch), lead, time, params).data[0]
    # same lead, equal content, different time slots
    assert not np.allclose(tokens[0], tokens[1])
    params["ecg.pos_time"].data[:] = params["ecg.pos_time"].data[0]
    tokens = models.embed_patches(Tensor(patch), lead, time, params).data[0]
    np.testing.assert_allclose(tokens[0], tokens[1], atol=1e-12)


def test_embed_patches_gradient(config, params):
    lead, time = grid(config)
    rng = np.random.default_rng(0)
    patches = Tensor(rng.normal(size=(2, config.n_patches, config.p)))
    trainable = {"ecg.patch_embed.weight": params["ecg.patch_embed.weight"]}

    def builder(p):
        merged = {**params, **p}
        return ad.tsum(models.embed_patches(patches, lead, time, merged))

    _, grads = ad.forward_backward(builder, trainable)
    fd = ad.finite_diff_grad(builder, trainable)
    assert max_rel_err(grads["ecg.patch_embed.weight"], fd["ecg.patch_embed.weight"]) <= 1e-5


def test_ecg_encode_depth_zero_is_identity(config, params):
    shallow = EncoderConfig(**{**config.__dict__, "depth_ecg": 0})
    rng = np.random.default_rng(1)
    tokens = Tensor(rng.normal(size=(2, 7, config.d_model)))
    out = models.ecg_encode(tokens, params, shallow)
    np.testing.assert_array_equal(out.data, tokens.data)


def test_ecg_encode_permutation_equivariant(config, params):
    rng = np.random.default_rng(2)
    tokens = rng.normal(size=(1, 8, config.d_model))
    perm = rng.permutation(8)
    base = models.ecg_encode(Tensor(tokens), params, config).data
    permuted = models.ecg_encode(Tensor(tokens[:, perm]), params, config).data
    np.testing.assert_allclose(permuted, base[:, perm], atol=1e-10)


def test_ecg_encode_deterministic(config, params):
    rng = np.random.default_rng(3)
    tokens = rng.normal(size=(2, 6, config.d_model))
    a = models.ecg_encode(Tensor(tokens), params, config).data
    b = models.ecg_encode(Tensor(tokens), params, config).data
    np.testing.assert_array_equal(a, b)


def test_insert_mask_tokens_no_masking_is_reorder(config, params):
    rng = np.random.default_rng(4)
    n = config.n_patches
    z_vis = rng.normal(size=(2, n, config.d_model))
    order = np.stack([rng.permutation(n) for _ in range(2)])
    lead, time = grid(config)
    full = models.insert_mask_tokens(
        Tensor(z_vis), order, np.zeros((2, 0), dtype=int), lead, time, params, n
    ).data
    for b in range(2):
        np.testing.assert_array_equal(full[b][order[b]], z_vis[b])


def test_insert_mask_tokens_fills_masked_slots(config, params):
    lead, time = grid(config)
    n = config.n_patches
    visible = np.array([[5]])
    masked = np.array([[i for i in range(n) if i != 5]])
    z_vis = np.random.default_rng(5).normal(size=(1, 1, config.d_model))
    full = models.insert_mask_tokens(
        Tensor(z_vis), visible, masked, lead, time, params, n
    ).data[0]
    np.testing.assert_array_equal(full[5], z_vis[0, 0])
    expected = (
        params["dec.mask_token"].data
        + params["ecg.pos_lead"].data[lead[masked[0]]]
        + params["ecg.pos_time"].data[time[masked[0]]]
    )
    np.testing.assert_allclose(full[masked[0]], expected, atol=1e-12)


def test_insert_then_gather_round_trip(config, params):
    rng = np.random.default_rng(6)
    n = config.n_patches
    vis_count = n // 2
    visible = np.stack([np.sort(rng.permutation(n)[:vis_count]) for _ in range(3)])
    masked = np.stack(
        [np.setdiff1d(np.arange(n), visible[b]) for b in range(3)]
    )
    z_vis = Tensor(rng.normal(size=(3, vis_count, config.d_model)))
    lead, time = grid(config)
    full = models.insert_mask_tokens(z_vis, visible, masked, lead, time, params, n)
    gathered = ad.take_along_rows(full, visible).data
    np.testing.assert_array_equal(gathered, z_vis.data)


def test_insert_mask_tokens_rejects_bad_indices(config, params):
    lead, time = grid(config)
    z_vis = Tensor(np.zeros((1, 2, config.d_model)))
    with pytest.raises(ValueError, match="out of range"):
        models.insert_mask_tokens(
            z_vis,
            np.array([[0, config.n_patches]]),
            np.zeros((1, 0), dtype=int),
            lead,
            time,
            params,
            config.n_patches,
        )
    with pytest.raises(ValueError, match="does not match"):
        models.insert_mask_tokens(
            z_vis, np.array([[0, 1, 2]]), np.zeros((1, 0), dtype=int), lead, time, params, config.n_patches
        )


def test_decode_zero_head_gives_zero(config, params):
    params["dec.head.weight"].data[:] = 0.0
    params["dec.head.bias"].data[:] = 0.0
    rng = np.random.default_rng(7)
    out = models.decode(Tensor(rng.normal(size=(2, config.n_patches, config.d_model))), params, config)
    np.testing.assert_array_equal(out.data, 0.0)


def test_decode_shape_contract(config, params):
    rng = np.random.default_rng(8)
    for b, n in [(1, 4), (3, config.n_patches)]:
        out = models.decode(Tensor(rng.normal(size=(b, n, config.d_model))), params, config)
        assert out.shape == (b, n, config.p)


def test_text_encode_single_token(config, params):
    states = models.text_encode(np.array([[0]]), np.ones((1, 1)), params, config)
    assert states.shape == (1, 1, config.d_model)
    again = models.text_encode(np.array([[0]]), np.ones((1, 1)), params, config)
    np.testing.assert_array_equal(states.data, again.data)


def test_text_encode_permutation_with_zero_positions(config, params):
    params["text.pos_embed"].data[:] = 0.0
    ids = np.array([[1, 4, 7, 2]])
    perm = np.array([2, 0, 3, 1])
    base = models.text_encode(ids, np.ones_like(ids, dtype=float), params, config).data
    permuted = models.text_encode(ids[:, perm], np.ones_like(ids, dtype=float), params, config).data
    np.testing.assert_allclose(permuted, base[:, perm], atol=1e-10)


def test_text_encode_rejects_unknown_token(config, params):
    with pytest.raises(ValueError, match="vocabulary"):
        models.text_encode(np.array([[config.vocab_size]]), np.ones((1, 1)), params, config)


def test_text_encode_padding_does_not_change_real_states(config, params):
    ids, mask = models.pad_reports(
        [np.array([1, 2, 3]), np.array([4])], config.max_report_len, config.vocab_size
    )
    states = models.text_encode(ids, mask, params, config).data
    solo = models.text_encode(np.array([[4]]), np.ones((1, 1)), params, config).data
    np.testing.assert_allclose(states[1, 0], solo[0, 0], atol=1e-10)


def test_text_encode_gradient(config, params):
    ids, mask = models.pad_reports(
        [np.array([1, 2]), np.array([3, 4, 5])], config.max_report_len, config.vocab_size
    )
    trainable = {"text.tok_embed": params["text.tok_embed"]}

    def builder(p):
        merged = {**params, **p}
        states = models.text_encode(ids, mask, merged, config)
        return ad.tsum(models.pool_mean_padded(states, mask))

    _, grads = ad.forward_backward(builder, trainable)
    fd = ad.finite_diff_grad(builder, trainable)
    assert max_rel_err(grads["text.tok_embed"], fd["text.tok_embed"]) <= 1e-5


def test_pool_mean_cases():
    row = np.array([[[1.0, 2.0, 3.0]]])
    np.testing.assert_array_equal(models.pool_mean(Tensor(row)).data, row[:, 0])
    v = np.random.default_rng(9).normal(size=(1, 1, 4))
    pair = np.concatenate([v, -v], axis=1)
    np.testing.assert_allclose(models.pool_mean(Tensor(pair)).data, 0.0, atol=1e-12)
    three = np.array([[[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]]])
    np.testing.assert_allclose(models.pool_mean(Tensor(three)).data, [[3.0, 5.0]])
    with pytest.raises(ValueError, match="empty pool"):
        models.pool_mean(Tensor(np.zeros((1, 0, 4))))


def test_project_contracts(config, params):
    rng = np.random.default_rng(10)
    v = rng.normal(size=(5, config.d_model))
    out = models.project(Tensor(v), params, "ecg").data
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)
    doubled = models.project(Tensor(2.0 * v), params, "ecg").data
    np.testing.assert_allclose(out, doubled, atol=1e-6)
    zero = models.project(Tensor(np.zeros((1, config.d_model))), params, "text").data
    assert np.all(np.isfinite(zero))
    with pytest.raises(ValueError, match="projection head"):
        models.project(Tensor(v), params, "audio")


def test_mask_ratio_zero_keeps_all_tokens(config, params):
    # with nothing masked the encoder sees the full grid and insertion is a
    # pure reorder
    rng = np.random.default_rng(11)
    n = config.n_patches
    patches = Tensor(rng.normal(size=(1, n, config.p)))
    lead, time = grid(config)
    tokens = models.embed_patches(patches, lead, time, params)
    assert tokens.shape[1] == n
    z = models.ecg_encode(tokens, params, config)
    identity = np.arange(n)[None, :]
    full = models.insert_mask_tokens(
        z, identity, np.zeros((1, 0), dtype=int), lead, time, params, n
    )
    np.testing.assert_array_equal(full.data, z.data)
