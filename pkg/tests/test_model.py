"""Model assembly, montage invariance, parameter count and channel sampling."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustsleepnet.dsp import PreprocessConfig
from robustsleepnet.gradcheck import REDUCED_CONFIG
from robustsleepnet.layers import cross_entropy
from robustsleepnet.model import (
    ModelConfig,
    RobustSleepNet,
    channel_count_probabilities,
    channel_recombine,
    count_parameters,
    epoch_encode,
    load_checkpoint,
    model_forward,
    parameter_breakdown,
    sample_channel_count,
    save_checkpoint,
    select_channels,
)
from robustsleepnet.tensor import ContractError, ShapeError, Tensor, gradient_check, no_grad, precision

PUBLISHED_COUNT = 180_343


@pytest.fixture(scope="module")
def model():
    return RobustSleepNet(seed=0)


@pytest.fixture(scope="module")
def small():
    cfg = ModelConfig(T=5, f_red=8, n_heads=2, k1=6, h1=8, p=10, k2=5, h2=6)
    return RobustSleepNet(cfg, seed=3)


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.T, cfg.L, cfg.f_red, cfg.n_heads, cfg.k1, cfg.h1, cfg.p, cfg.k2, cfg.h2) == (
            21, 1800, 32, 4, 30, 64, 50, 25, 50)
        assert (cfg.p1, cfg.p2, cfg.f_fft, cfg.l_fft, cfg.q) == (0.5, 0.5, 65, 27, 100)

    @pytest.mark.parametrize("kw", [{"T": 0}, {"h1": -1}, {"n_classes": 4}, {"p1": 1.0}, {"L": 100}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    def test_unknown_keys(self):
        with pytest.raises(ValueError):
            ModelConfig.from_dict({"T": 21, "heads": 3})
        assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()


class TestParameterCount:
    def test_breakdown_matches_arithmetic_oracle(self, model, frozen):
        assert parameter_breakdown(model) == frozen["parameter_counts"]

    def test_total_within_three_percent(self, model):
        n = count_parameters(model)
        assert n == 180_143
        assert abs(n - PUBLISHED_COUNT) / PUBLISHED_COUNT < 0.03

    def test_classifier_and_reduction(self, model):
        assert model.classifier.count_parameters() == 505
        assert model.freq_reduction.count_parameters() == 32 * 65 + 32 == 2112


class TestChannelRecombine:
    def test_single_channel_passes_through(self, model, rng):
        x = rng.standard_normal((1, 32, 27)).astype(np.float32)
        out = channel_recombine(model, x).data
        assert out.shape == (4, 32, 27)
        for h in range(4):
            np.testing.assert_allclose(out[h], x[0], rtol=1e-6)

    def test_identical_channels(self, model, rng):
        ch = rng.standard_normal((32, 27)).astype(np.float32)
        out = channel_recombine(model, np.stack([ch] * 5)).data
        np.testing.assert_allclose(out, np.broadcast_to(ch, (4, 32, 27)), rtol=1e-5, atol=1e-6)

    def test_permutation(self, model, rng):
        with precision("float64"):
            m = RobustSleepNet(seed=1)
            x = rng.standard_normal((4, 32, 27))
            a = channel_recombine(m, x).data
            b = channel_recombine(m, x[[2, 0, 3, 1]]).data
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_zero_channels(self, model):
        with pytest.raises(ContractError):
            channel_recombine(model, np.zeros((0, 32, 27)))

    def test_one_weight_per_channel_per_head(self, model, rng):
        x = Tensor(rng.standard_normal((2, 3, 27, 32)))
        _, w = model.recombine(x)
        assert w.shape == (2, 3, 4)
        np.testing.assert_allclose(w.data.sum(axis=1), 1, rtol=1e-6)


class TestEpochEncode:
    @pytest.mark.parametrize("c", [1, 2, 5, 8])
    def test_output_length(self, model, rng, c):
        with no_grad():
            out = epoch_encode(model, rng.standard_normal((c, 65, 27)))
        assert out.shape == (50,)

    def test_shape_error(self, model):
        with pytest.raises(ShapeError):
            epoch_encode(model, np.zeros((2, 64, 27)))

    def test_tiny_encoder_gradient(self, rng):
        cfg = ModelConfig(T=2, L=64, n_fft=16, n_stride=8, f_red=4, n_heads=2, k1=3, h1=3, p=5, k2=3, h2=2)
        with precision("float64"):
            m = RobustSleepNet(cfg, seed=2)
            x = rng.standard_normal((3, cfg.f_fft, cfg.l_fft))
            w = Tensor(rng.standard_normal(5))
            rep = gradient_check(lambda *p: (epoch_encode(m, x) * w).sum(), m.parameters(), eps=1e-4)
        assert rep.passed, rep


class TestModelForward:
    @pytest.mark.parametrize("c", [1, 3, 8])
    def test_columns_are_distributions(self, small, rng, c):
        with no_grad():
            out = model_forward(small, rng.standard_normal((c, 1800, 5))).data
        assert out.shape == (5, 5)
        np.testing.assert_allclose(out.sum(axis=0), 1, atol=1e-6)
        assert np.all((out > 0) & (out < 1))

    def test_permutation_and_duplication(self, small, rng):
        z = rng.standard_normal((4, 1800, 5))
        with no_grad():
            base = model_forward(small, z).data
            perm = model_forward(small, z[[3, 1, 0, 2]]).data
            dup = model_forward(small, np.concatenate([z, z])).data
            dup_uneven = model_forward(small, z[[0, 0, 1, 1, 2, 2, 3, 3]]).data
        np.testing.assert_allclose(perm, base, atol=1e-6)
        np.testing.assert_allclose(dup, base, atol=1e-6)
        np.testing.assert_allclose(dup_uneven, base, atol=1e-6)

    def test_gain_invariance(self, small, rng):
        # per-channel positive gains leave the normalised spectrogram unchanged
        z = rng.standard_normal((3, 1800, 5))
        gains = np.array([0.5, 3.0, 1.7])[:, None, None]
        with no_grad():
            np.testing.assert_allclose(model_forward(small, z * gains).data, model_forward(small, z).data,
                                       atol=1e-5)

    def test_deterministic(self, rng):
        z = rng.standard_normal((2, 1800, 3))
        cfg = ModelConfig(T=3)
        with no_grad():
            a = model_forward(RobustSleepNet(cfg, seed=5), z).data
            b = model_forward(RobustSleepNet(cfg, seed=5), z).data
        assert a.tobytes() == b.tobytes()

    def test_training_requires_full_context(self, small, rng):
        x = Tensor(rng.standard_normal((1, 4, 2, 27, 65)))
        with pytest.raises(ContractError):
            small.forward(x, train=True, rng=rng)
        with pytest.raises(ContractError):
            small.forward(Tensor(rng.standard_normal((1, 5, 2, 27, 65))), train=True)
        with no_grad():
            assert small.forward(x).shape == (1, 4, 5)  # shorter windows allowed at inference

    def test_dropout_changes_training_output_only(self, small, rng):
        x = Tensor(rng.standard_normal((2, 5, 2, 27, 65)))
        with no_grad():
            a = small.forward(x).data
            b = small.forward(x, train=True, rng=np.random.default_rng(0)).data
            c = small.forward(x).data
        assert not np.allclose(a, b)
        np.testing.assert_array_equal(a, c)

    def test_first_loss_near_ln5(self, rng):
        m = RobustSleepNet(seed=11)
        x = Tensor(rng.standard_normal((4, 21, 2, 27, 65)))
        labels = rng.integers(0, 5, size=(4, 21))
        with no_grad():
            loss = cross_entropy(m.forward(x, train=True, rng=rng), labels).item()
        assert abs(loss - np.log(5)) < 0.15

    def test_full_reduced_model_gradient(self, rng):
        cfg = REDUCED_CONFIG
        with precision("float64"):
            m = RobustSleepNet(cfg, seed=4)
            x = Tensor(rng.standard_normal((2, cfg.T, 2, cfg.l_fft, cfg.f_fft)))
            y = rng.integers(0, 5, size=(2, cfg.T))
            rep = gradient_check(lambda *p: cross_entropy(m.forward(x), y), m.parameters(), eps=1e-4,
                                 max_coords=25, rng=rng)
        assert rep.passed, rep


class TestChannelSampling:
    @pytest.mark.parametrize("c_max", [1, 2, 4, 8])
    def test_closed_form(self, frozen, c_max):
        expect = [float(Fraction(a, b)) for a, b in frozen["channel_count"][str(c_max)]]
        np.testing.assert_allclose(channel_count_probabilities(c_max), expect, rtol=1e-12)

    def test_c_max_one_always_one(self, rng):
        assert {sample_channel_count(1, rng) for _ in range(50)} == {1}

    def test_invalid_c_max(self, rng):
        with pytest.raises(ContractError):
            sample_channel_count(0, rng)

    def test_empirical_frequencies(self):
        r = np.random.default_rng(0)
        draws = np.array([sample_channel_count(4, r) for _ in range(100_000)])
        freq = np.bincount(draws, minlength=5)[1:] / len(draws)
        np.testing.assert_allclose(freq, [12 / 25, 6 / 25, 4 / 25, 3 / 25], atol=0.005)

    def test_select_all_channels(self, rng):
        idx = select_channels(5, 5, rng)
        assert sorted(idx) == [0, 1, 2, 3, 4]

    def test_with_replacement_when_needed(self, rng):
        for _ in range(20):
            idx = select_channels(2, 3, rng)
            assert len(idx) == 3 and set(idx) <= {0, 1}
        seen_dup = any(len(set(select_channels(2, 3, rng))) < 3 for _ in range(5))
        assert seen_dup  # three draws from two channels always repeat

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_no_duplicates_when_possible(self, c_d, c_b, seed):
        idx = select_channels(c_d, c_b, np.random.default_rng(seed))
        assert len(idx) == c_b and idx.min() >= 0 and idx.max() < c_d
        if c_b <= c_d:
            assert len(set(idx)) == c_b

    def test_uniform_marginal_inclusion(self):
        r = np.random.default_rng(1)
        counts = np.zeros(6)
        n = 100_000
        for _ in range(n):
            counts[select_channels(6, 2, r)] += 1
        np.testing.assert_allclose(counts / n, 2 / 6, atol=0.01)


class TestCheckpoint:
    def test_round_trip(self, small, tmp_path, rng):
        pcfg = PreprocessConfig()
        save_checkpoint(small, tmp_path / "ck", pcfg, {"note": "x"})
        loaded, pcfg2 = load_checkpoint(tmp_path / "ck")
        assert loaded.config == small.config and pcfg2 == pcfg
        x = Tensor(rng.standard_normal((1, 5, 2, 27, 65)))
        with no_grad():
            np.testing.assert_array_equal(loaded.forward(x).data, small.forward(x).data)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nothing")
