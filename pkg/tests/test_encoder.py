import numpy as np
import pytest

from dsaa import autodiff as ad
from dsaa.adapters import ScalePair
from dsaa.autodiff import Tensor
from dsaa.encoder import EncoderConfig, EncoderWeights, embed, encode
from dsaa.errors import ContractError
from dsaa.text import TokenSeq

CFG = EncoderConfig(vocab_size=12, num_layers=3, num_heads=2, model_dim=8, feedforward_dim=16, max_len=10,
                    modulated_layers=(2, 3))


@pytest.fixture
def weights():
    return EncoderWeights.init(CFG, np.random.default_rng(3))


def seq(*ids):
    return TokenSeq(tuple(ids), tuple(f"t{i}" for i in ids))


def scales(rng, D=8, gamma=0.1):
    return ScalePair(Tensor(1 + gamma * np.tanh(rng.normal(size=D))), Tensor(1 + gamma * np.tanh(rng.normal(size=D))))


class TestConfig:
    def test_heads_divide_dim(self):
        with pytest.raises(ContractError):
            EncoderConfig(model_dim=10, num_heads=4)

    def test_modulated_layers_in_range(self):
        with pytest.raises(ContractError):
            EncoderConfig(num_layers=2, modulated_layers=(1, 3))


class TestEmbed:
    def test_zero_tables(self, weights):
        weights.tok_emb.data[:] = 0
        weights.pos_emb.data[:] = 0
        assert not embed(weights, seq(4, 5, 6)).data.any()

    def test_single_token(self, weights):
        np.testing.assert_array_equal(embed(weights, seq(5)).data[0], weights.tok_emb.data[5] + weights.pos_emb.data[0])

    def test_swap_changes_token_parts(self, weights):
        a, b = embed(weights, seq(4, 5, 6)).data, embed(weights, seq(5, 4, 6)).data
        tok, pos = weights.tok_emb.data, weights.pos_emb.data
        np.testing.assert_array_equal(a[:2], [tok[4] + pos[0], tok[5] + pos[1]])
        np.testing.assert_array_equal(b[:2], [tok[5] + pos[0], tok[4] + pos[1]])
        np.testing.assert_array_equal(a[2], b[2])

    def test_id_out_of_range(self, weights):
        with pytest.raises(ContractError):
            embed(weights, seq(12))


class TestEncode:
    def test_no_scales_matches_plain(self, weights, rng):
        x = Tensor(rng.normal(size=(5, 8)))
        a, b = encode(weights, CFG, x), encode(weights, CFG, x, attr_positions=(1, 2), scales=None)
        np.testing.assert_array_equal(a.pooled.data, b.pooled.data)

    def test_unit_scales_match_plain(self, weights, rng):
        x = Tensor(rng.normal(size=(5, 8)))
        ones = ScalePair(Tensor(np.ones(8)), Tensor(np.ones(8)))
        a, b = encode(weights, CFG, x), encode(weights, CFG, x, attr_positions=(1, 2), scales=ones)
        np.testing.assert_array_equal(a.hidden.data, b.hidden.data)

    def test_empty_stack(self, rng):
        cfg = EncoderConfig(vocab_size=12, num_layers=0, num_heads=2, model_dim=8, feedforward_dim=16, max_len=10,
                            modulated_layers=())
        w = EncoderWeights.init(cfg, np.random.default_rng(0))
        x = rng.normal(size=(4, 8))
        res = encode(w, cfg, Tensor(x), num_prefix=1)
        np.testing.assert_array_equal(res.hidden.data, x)
        np.testing.assert_allclose(res.pooled.data, x[1:].mean(axis=0), atol=1e-15)

    def test_pooled_excludes_prefix(self, weights, rng):
        res = encode(weights, CFG, Tensor(rng.normal(size=(5, 8))), num_prefix=2)
        np.testing.assert_allclose(res.pooled.data, res.hidden.data[2:].mean(axis=0), atol=1e-14)

    def test_bad_scale_shape(self, weights, rng):
        bad = ScalePair(Tensor(np.ones(7)), Tensor(np.ones(7)))
        with pytest.raises(ContractError):
            encode(weights, CFG, Tensor(rng.normal(size=(4, 8))), attr_positions=(1,), scales=bad)

    def test_frozen_weights_get_no_grad(self, weights, rng):
        x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
        ad.backward(ad.tsum(encode(weights, CFG, x).pooled))
        assert x.grad is not None
        assert all(t.grad is None for t in weights.named().values())

    def test_input_gradient(self, weights, rng):
        x = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
        sc = scales(rng)
        s_k = Tensor(sc.s_k.data, requires_grad=True)
        c = rng.normal(size=8)
        err = ad.gradcheck(lambda: ad.tsum(encode(weights, CFG, x, (1,), ScalePair(s_k, sc.s_v)).pooled * c), [x, s_k])
        assert err < 1e-4


class TestLocality:
    def test_kv_rows_and_layers(self, weights, rng):
        x = Tensor(rng.normal(size=(6, 8)))
        attr = (1, 3)
        mod = encode(weights, CFG, x, attr, scales(rng), collect_kv=True).per_layer_kv
        plain = encode(weights, CFG, x, collect_kv=True).per_layer_kv
        outside = [i for i in range(6) if i not in attr]
        for layer, snap in enumerate(mod, start=1):
            for key in ("k", "v"):
                np.testing.assert_array_equal(snap[key][0, outside], snap[f"{key}_pre"][0, outside])
                if layer not in CFG.modulated_layers:
                    np.testing.assert_array_equal(snap[key], snap[f"{key}_pre"])
                else:
                    assert not np.array_equal(snap[key][0, list(attr)], snap[f"{key}_pre"][0, list(attr)])
        # the run is untouched until the first modulated layer acts
        first = min(CFG.modulated_layers)
        for layer in range(1, first + 1):
            for key in ("k_pre", "v_pre"):
                np.testing.assert_array_equal(mod[layer - 1][key], plain[layer - 1][key])
        for key in ("k", "v"):
            np.testing.assert_array_equal(mod[first - 1][key][0, outside], plain[first - 1][key][0, outside])
