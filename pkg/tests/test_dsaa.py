import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dsaa import autodiff as ad
from dsaa.adapters import ApaWeights, DsaaParams, ModulatorWeights, apa_prefix, build_prefixes, condition_vector, modulation_scales
from dsaa.autodiff import Tensor
from dsaa.errors import ContractError
from dsaa.pipeline import PipelineFlags
from dsaa.text import AttributeSpanSet, Span

D, d = 8, 3


def random_apa(rng, scale=1.0):
    w = ApaWeights.init(D, d, rng)
    w.w1.data = rng.normal(0, scale, size=(d, D))
    w.w2.data = rng.normal(0, scale, size=(D, d))
    w.ln_w.data = rng.normal(1, 0.2, size=d)
    w.ln_b.data = rng.normal(0, 0.2, size=d)
    return w


def random_mod(rng, scale=1.0, gamma=0.1):
    m = ModulatorWeights.init(D, d, rng, gamma, gamma)
    for t in m.params().values():
        t.data = rng.normal(0, scale, size=t.shape)
    return m


def spans(*groups):
    return AttributeSpanSet(tuple(Span(f"p{i}", tuple(g)) for i, g in enumerate(groups)))


class TestApa:
    def test_bottleneck_bounds(self, rng):
        with pytest.raises(ContractError):
            ApaWeights.init(D, D, rng)

    def test_zero_branch_is_identity(self, rng):
        w = ApaWeights.init(D, d, rng)
        w.w1.data[:] = 0
        a = rng.normal(size=D)
        np.testing.assert_allclose(apa_prefix(w, Tensor(a)).data, a, rtol=0, atol=1e-15)

    @given(arrays(np.float64, D, elements=st.floats(-10, 10)), st.integers(0, 2**31))
    def test_norm_preserved(self, a, seed):
        w = random_apa(np.random.default_rng(seed), 3.0)
        out = apa_prefix(w, Tensor(a)).data
        assert abs(np.linalg.norm(out) - np.linalg.norm(a)) <= 1e-9 * max(1.0, np.linalg.norm(a))

    def test_zero_vector_passthrough(self, rng):
        out = apa_prefix(random_apa(rng), Tensor(np.zeros(D))).data
        assert np.all(out == 0)

    def test_gradient(self, rng):
        w = random_apa(rng)
        a = Tensor(rng.normal(size=(2, D)), requires_grad=True)
        c = rng.normal(size=(2, D))
        params = [a, *w.params().values()]
        for p in params:
            p.requires_grad = True
        assert ad.gradcheck(lambda: ad.tsum(apa_prefix(w, a) * c), params) < 1e-4


class TestPrefixes:
    def test_empty(self, rng):
        out = build_prefixes(random_apa(rng), Tensor(rng.normal(size=(4, D))), AttributeSpanSet())
        assert out.shape == (0, D)

    def test_rows_follow_indices(self, rng):
        w, e = random_apa(rng), rng.normal(size=(4, D))
        out = build_prefixes(w, Tensor(e), spans((2,), (3,))).data
        np.testing.assert_allclose(out[0], apa_prefix(w, Tensor(e[1])).data, rtol=1e-13, atol=0)
        np.testing.assert_allclose(out[1], apa_prefix(w, Tensor(e[2])).data, rtol=1e-13, atol=0)

    def test_duplicates_identical(self, rng):
        e = rng.normal(size=(4, D))
        e[2] = e[1]
        out = build_prefixes(random_apa(rng), Tensor(e), spans((2,), (3,))).data
        np.testing.assert_array_equal(out[0], out[1])


class TestCondition:
    def test_single_span(self, rng):
        e = rng.normal(size=(5, D))
        np.testing.assert_allclose(condition_vector(e, spans((2, 3))).data, e[1:3].mean(axis=0), atol=1e-15)

    def test_weighted(self, rng):
        e = rng.normal(size=(5, D))
        p, q = e[0], e[2:5].mean(axis=0)
        np.testing.assert_allclose(condition_vector(e, spans((1,), (3, 4, 5))).data, (p + 3 * q) / 4, atol=1e-14)

    def test_equal_rows(self, rng):
        v = rng.normal(size=D)
        e = np.tile(v, (4, 1))
        np.testing.assert_allclose(condition_vector(e, spans((1,), (3, 4))).data, v, atol=1e-15)

    def test_empty_rejected(self, rng):
        with pytest.raises(ContractError):
            condition_vector(rng.normal(size=(3, D)), AttributeSpanSet())

    @given(arrays(np.float64, (5, D), elements=st.floats(-5, 5)))
    def test_in_prototype_hull(self, e):
        c = condition_vector(e, spans((1,), (2, 3), (5,))).data
        protos = np.array([e[0], e[1:3].mean(axis=0), e[4]])
        assert np.all(c >= protos.min(axis=0) - 1e-12) and np.all(c <= protos.max(axis=0) + 1e-12)


class TestModulator:
    def test_gamma_positive(self, rng):
        with pytest.raises(ContractError):
            ModulatorWeights.init(D, d, rng, gamma_k=0.0)

    def test_zero_weights_identity(self, rng):
        m = random_mod(rng)
        for t in m.params().values():
            t.data[:] = 0
        s = modulation_scales(m, Tensor(rng.normal(size=D)))
        assert np.all(s.s_k.data == 1) and np.all(s.s_v.data == 1)

    def test_identity_at_init(self, rng):
        s = modulation_scales(ModulatorWeights.init(D, d, rng), Tensor(rng.normal(size=D)))
        assert np.all(s.s_k.data == 1) and np.all(s.s_v.data == 1)

    @given(st.integers(0, 2**31), st.floats(0.01, 0.5), st.floats(0.1, 20))
    def test_bounded(self, seed, gamma, scale):
        rng = np.random.default_rng(seed)
        s = modulation_scales(random_mod(rng, scale, gamma), Tensor(rng.normal(0, 5, size=D)))
        for v in (s.s_k.data, s.s_v.data):
            assert np.all(np.abs(v - 1) < gamma)

    def test_gradient(self, rng):
        m = random_mod(rng)
        c = Tensor(rng.normal(size=D), requires_grad=True)
        params = [c, *m.params().values()]
        for p in params:
            p.requires_grad = True
        w = rng.normal(size=D)

        def fn():
            s = modulation_scales(m, c)
            return ad.tsum(s.s_k * w) + ad.tsum(s.s_v * s.s_v)

        assert ad.gradcheck(fn, params) < 1e-4


class TestParams:
    def test_roundtrip(self, rng):
        p = DsaaParams.init(D, d, d, rng, 0.2, 0.3)
        q = DsaaParams.from_arrays(p.to_arrays(), p.hyper())
        assert q.modulator.gamma_k == 0.2 and q.modulator.gamma_v == 0.3
        for k, v in p.to_arrays().items():
            np.testing.assert_array_equal(q.to_arrays()[k], v)

    def test_missing_param(self, rng):
        arrays = DsaaParams.init(D, d, d, rng).to_arrays()
        del arrays["dsaa.apa.w2"]
        with pytest.raises(ContractError):
            DsaaParams.from_arrays(arrays)


def perturbed_dsaa(world, seed=0):
    rng = np.random.default_rng(seed)
    dsaa = DsaaParams.init(world.encoder_config.model_dim, 16, 16, rng)
    for t in dsaa.named().values():
        t.data = t.data + rng.normal(0, 0.3, size=t.shape)
    return dsaa


class TestPipeline:
    def test_fallback_bit_identical(self, small_world):
        plain = small_world.pipeline()
        dsaa = small_world.pipeline(perturbed_dsaa(small_world))
        for cap in ["a dog", "a thing", "a chair", "a red dog", "a wooden mug"]:
            a, b = plain.forward([cap]).pooled.data, dsaa.forward([cap]).pooled.data
            if dsaa.prepare(cap).spans:
                assert not np.array_equal(a, b)
            else:
                np.testing.assert_array_equal(a, b)

    def test_prefix_rows_lead(self, small_world):
        p = small_world.pipeline(perturbed_dsaa(small_world))
        enc = p.forward(["a red wooden chair", "a dog"])
        assert enc.rows == [(2, 4), (0, 2)]
        assert enc.has_attr.tolist() == [True, False]

    def test_embed_texts_matches_forward(self, small_world):
        p = small_world.pipeline(perturbed_dsaa(small_world))
        caps = ["a red chair", "a dog", "a blue metal car"]
        got = p.embed_texts(caps)
        for c, g in zip(caps, got):
            np.testing.assert_allclose(g, p.forward([c]).pooled.data[0], atol=1e-12)

    def test_trainable_respects_flags(self, small_world):
        dsaa = perturbed_dsaa(small_world)
        assert len(small_world.pipeline(dsaa, PipelineFlags(use_modulator=False)).trainable()) == 4
        assert len(small_world.pipeline(dsaa).trainable()) == 8
        assert small_world.pipeline().trainable() == []

    def test_training_grads_stay_in_adapters(self, small_world):
        dsaa = perturbed_dsaa(small_world)
        p = small_world.pipeline(dsaa)
        ad.zero_grad(p.trainable())
        ad.backward(ad.tsum(p.forward(["a red wooden chair", "a dog"]).pooled))
        assert all(t.grad is not None for t in p.trainable())
        assert all(t.grad is None for t in small_world.encoder.named().values())
