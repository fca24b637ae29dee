import numpy as np
import pytest

from taskcodec.autodiff import Dense, NetSpec, Reshape, init_params
from taskcodec.entropy import (SIGMA_MIN, FactorizedPrior, GaussianParams,
                               TemporalModel, bin_mass_grad, factorized_params,
                               gu_bits, gu_pmf, hyper_path, sigma_from_raw,
                               softplus_inv, temporal_params)
from taskcodec.models import BundleConfig, build_bundle
from taskcodec.quantize import round_half_away

# frozen against a 50-digit normal-CDF evaluation
GU_0_0_1 = 0.38292492254802620728
GU_3_3_HALF = 0.68268949213708589717
GU_0_0_011 = 0.99999451831734730992


class TestGuPmf:
    def test_reference_values(self):
        assert gu_pmf(0, 0.0, 1.0) == pytest.approx(GU_0_0_1, abs=1e-12)
        assert gu_pmf(3, 3.0, 0.5) == pytest.approx(GU_3_3_HALF, abs=1e-12)
        assert gu_pmf(0, 0.0, 0.11) == pytest.approx(GU_0_0_011, abs=1e-12)

    def test_symmetry_about_mean(self):
        assert gu_pmf(1, 0.0, 1.0) == pytest.approx(gu_pmf(-1, 0.0, 1.0), rel=1e-14)
        assert gu_pmf(5, 2.0, 0.7) == pytest.approx(gu_pmf(-1, 2.0, 0.7), rel=1e-13)

    def test_sigma_floor_enforced(self):
        with pytest.raises(ValueError, match="floor"):
            gu_pmf(0, 0.0, 0.05)

    def test_total_probability_tail(self):
        # symbols beyond ceil(|mu|) + 16 sigma carry < 2^-20 of the mass
        for mu, sigma in [(0.0, 0.11), (0.3, 1.0), (-2.7, 4.0), (5.0, 32.0)]:
            k_max = int(np.ceil(abs(mu)) + np.ceil(16 * sigma))
            ks = np.arange(-k_max, k_max + 1)
            total = float(np.sum([gu_pmf(int(k), mu, sigma) for k in ks]))
            assert 1.0 - total < 2.0 ** -20

    def test_mode_at_nearest_integer(self):
        for mu, sigma in [(0.3, 0.5), (-1.8, 2.0), (4.49, 0.11)]:
            ks = np.arange(int(mu) - 20, int(mu) + 21)
            probs = [gu_pmf(int(k), mu, sigma) for k in ks]
            mode = ks[int(np.argmax(probs))]
            assert mode == int(round_half_away(np.array([mu]))[0])

    def test_gradients_match_finite_differences(self):
        x, mu, sigma = 1.3, 0.4, 0.9
        _, dx, dmu, dsig = bin_mass_grad(x, mu, sigma)
        eps = 1e-6
        from taskcodec.entropy import bin_mass
        fd_x = (bin_mass(x + eps, mu, sigma) - bin_mass(x - eps, mu, sigma)) / (2 * eps)
        fd_mu = (bin_mass(x, mu + eps, sigma) - bin_mass(x, mu - eps, sigma)) / (2 * eps)
        fd_sig = (bin_mass(x, mu, sigma + eps) - bin_mass(x, mu, sigma - eps)) / (2 * eps)
        assert float(dx) == pytest.approx(float(fd_x), rel=1e-6)
        assert float(dmu) == pytest.approx(float(fd_mu), rel=1e-6)
        assert float(dsig) == pytest.approx(float(fd_sig), rel=1e-6)


class TestGuBits:
    def test_empty_is_zero(self):
        params = GaussianParams(mu=np.zeros((0,)), sigma=np.zeros((0,)))
        assert gu_bits(np.zeros((0,), dtype=np.int64), params) == 0.0

    def test_single_element(self):
        params = GaussianParams(mu=np.zeros(1), sigma=np.ones(1))
        expected = -np.log2(GU_0_0_1)
        assert gu_bits(np.zeros(1, dtype=np.int64), params) == pytest.approx(
            expected, abs=1e-10)

    def test_additive_over_concatenation(self):
        rng = np.random.default_rng(0)
        mu = rng.normal(size=10)
        sigma = np.maximum(np.abs(rng.normal(size=10)) + 0.2, SIGMA_MIN)
        z = round_half_away(mu + sigma * rng.standard_normal(10))
        full = gu_bits(z, GaussianParams(mu=mu, sigma=sigma))
        part = (gu_bits(z[:4], GaussianParams(mu=mu[:4], sigma=sigma[:4]))
                + gu_bits(z[4:], GaussianParams(mu=mu[4:], sigma=sigma[4:])))
        assert full == pytest.approx(part, rel=1e-12)

    def test_shape_mismatch(self):
        params = GaussianParams(mu=np.zeros(3), sigma=np.ones(3))
        with pytest.raises(ValueError, match="shape"):
            gu_bits(np.zeros(4, dtype=np.int64), params)


class TestFactorizedPrior:
    def test_broadcast_constant_within_channel(self):
        prior = FactorizedPrior(mu=np.array([0.5, -1.0]),
                                raw_sigma=np.array([0.0, 1.0]))
        params = factorized_params(prior, (2, 4, 4))
        for ch in range(2):
            assert np.all(params.mu[ch] == params.mu[ch, 0, 0])
            assert np.all(params.sigma[ch] == params.sigma[ch, 0, 0])

    def test_sigma_clamped_at_floor(self):
        prior = FactorizedPrior(mu=np.zeros(1), raw_sigma=np.array([-40.0]))
        params = factorized_params(prior, (1, 2, 2))
        assert np.all(params.sigma == SIGMA_MIN)

    def test_channel_mismatch(self):
        prior = FactorizedPrior(mu=np.zeros(2), raw_sigma=np.zeros(2))
        with pytest.raises(ValueError, match="channel"):
            factorized_params(prior, (3, 4, 4))

    def test_bits_match_scalar_recomputation(self):
        rng = np.random.default_rng(1)
        prior = FactorizedPrior(mu=rng.normal(size=2),
                                raw_sigma=rng.normal(size=2))
        params = factorized_params(prior, (2, 3, 3))
        v = round_half_away(params.mu + params.sigma * rng.standard_normal((2, 3, 3)))
        got = gu_bits(v, params)
        expected = 0.0
        for c in range(2):
            sigma_c = max(float(np.logaddexp(0.0, prior.raw_sigma[c])), SIGMA_MIN)
            for val in v[c].reshape(-1):
                expected -= np.log2(gu_pmf(int(val), float(prior.mu[c]), sigma_c))
        assert got == pytest.approx(expected, rel=1e-12)


class TestHyperPath:
    def setup_method(self):
        self.bundle = build_bundle(BundleConfig(), seed=0)
        self.hyper = self.bundle.hyper(0)

    def test_initialized_head_gives_unit_gaussian(self):
        # zeroed decoder head with sigma bias at softplus^-1(1)
        z = np.random.default_rng(0).normal(size=(8, 12, 12))
        _, _, params = hyper_path(z, self.hyper, mode="infer")
        np.testing.assert_allclose(params.mu, 0.0, atol=1e-12)
        np.testing.assert_allclose(params.sigma, 1.0, atol=1e-12)

    def test_infer_mode_rounds_latent(self):
        z = np.random.default_rng(1).normal(size=(8, 12, 12))
        _, v_coded, _ = hyper_path(z, self.hyper, mode="infer")
        assert np.issubdtype(v_coded.dtype, np.integer)

    def test_train_mode_noise_within_half(self):
        z = np.random.default_rng(2).normal(size=(8, 12, 12))
        v, v_coded, _ = hyper_path(z, self.hyper, mode="train",
                                   rng=np.random.default_rng(3))
        assert np.max(np.abs(v_coded - v)) < 0.5

    def test_latent_spatial_downsampling(self):
        z = np.zeros((8, 12, 12))
        v, _, params = hyper_path(z, self.hyper, mode="infer")
        assert v.shape == (4, 6, 6)
        assert params.shape == z.shape


class TestTemporalParams:
    def test_initialized_head_gives_unit_gaussian(self):
        bundle = build_bundle(BundleConfig(), seed=0)
        temporal = bundle.temporal(0)
        hist = [np.ones((8, 12, 12), dtype=np.int64)]
        params = temporal_params(hist, temporal)
        np.testing.assert_allclose(params.mu, 0.0, atol=1e-12)
        np.testing.assert_allclose(params.sigma, 1.0, atol=1e-12)
        assert params.shape == (8, 12, 12)

    def test_wrong_history_length(self):
        bundle = build_bundle(BundleConfig(), seed=0)
        temporal = bundle.temporal(0)
        with pytest.raises(ValueError, match="previous features"):
            temporal_params([], temporal)

    def test_output_shape_for_order_two(self):
        bundle = build_bundle(BundleConfig(tau2=2), seed=0)
        temporal = bundle.temporal(0)
        hist = [np.zeros((8, 12, 12), dtype=np.int64)] * 2
        assert temporal_params(hist, temporal).shape == (8, 12, 12)


def _ar1_sequence(rng, n, coeff=0.9):
    z = np.zeros(n, dtype=np.int64)
    x = 0
    for t in range(n):
        x = int(round_half_away(np.array([coeff * x + rng.standard_normal()]))[0])
        z[t] = x
    return z


@pytest.mark.slow
class TestTemporalBeatsStatic:
    def test_trained_temporal_model_beats_best_static_model(self):
        # integer AR(1): the conditional coder must undercut any per-symbol
        # static model; the empirical-entropy oracle is computed by counting
        from taskcodec.autodiff import OptState, adam_step
        from taskcodec.training import loss_L2

        rng = np.random.default_rng(5)
        seq = _ar1_sequence(rng, 12000)
        train, test = seq[:10000], seq[10000 - 1:]

        spec = NetSpec((1, 1, 1), (Reshape((1,)), Dense(1, 2), Reshape((2, 1, 1))))
        params = init_params(spec, np.random.default_rng(0))
        params["1.w"] = np.zeros_like(params["1.w"])
        params["1.b"] = np.array([0.0, softplus_inv(1.0)])
        temporal = TemporalModel(spec=spec, params=params, order=1)

        opt = OptState.for_params(params, lr=5e-3)
        for step in range(800):
            idx = rng.integers(1, len(train), size=64)
            hist = train[idx - 1].astype(np.float64).reshape(-1, 1, 1, 1)
            cur = train[idx].reshape(-1, 1, 1, 1)
            _, grads = loss_L2(hist, cur, temporal)
            params, opt = adam_step(params, grads, opt)
            temporal.params = params

        # model bits on held-out steps
        bits_temporal = 0.0
        n_test = len(test) - 1
        for i in range(1, len(test)):
            p = temporal_params([np.array([[[test[i - 1]]]])], temporal)
            bits_temporal += gu_bits(np.array([[[test[i]]]]), p)
        bits_temporal /= n_test

        # best static gaussian-uniform model, fit exhaustively on the test set
        best_static = np.inf
        values = test[1:]
        for mu in np.linspace(values.mean() - 1, values.mean() + 1, 21):
            for sigma in np.linspace(max(values.std() * 0.5, SIGMA_MIN),
                                     values.std() * 2 + 0.5, 30):
                p = GaussianParams(mu=np.full(values.shape, mu),
                                   sigma=np.full(values.shape, max(sigma, SIGMA_MIN)))
                best_static = min(best_static, gu_bits(values, p) / n_test)
        assert bits_temporal < best_static

        # within 5% of the counting-based conditional entropy
        pairs = {}
        for a, b in zip(test[:-1], test[1:]):
            pairs.setdefault(int(a), []).append(int(b))
        cond_entropy = 0.0
        for a, succ in pairs.items():
            counts = np.bincount(np.array(succ) - min(succ))
            probs = counts[counts > 0] / len(succ)
            cond_entropy += len(succ) / n_test * float(-np.sum(probs * np.log2(probs)))
        assert cond_entropy * 0.95 <= bits_temporal <= cond_entropy * 1.05


class TestSigmaFromRaw:
    def test_matches_softplus_above_floor(self):
        raw = np.array([0.5, 2.0, softplus_inv(1.0)])
        np.testing.assert_allclose(sigma_from_raw(raw), np.logaddexp(0, raw))

    def test_clamps_below_floor(self):
        assert sigma_from_raw(np.array([-50.0]))[0] == SIGMA_MIN

    def test_params_never_below_floor(self):
        # any bundle-produced params respect the floor
        bundle = build_bundle(BundleConfig(), seed=3)
        rng = np.random.default_rng(0)
        z = rng.normal(size=(8, 12, 12)) * 5
        _, _, params = hyper_path(z, bundle.hyper(1), mode="infer")
        assert params.sigma.min() >= SIGMA_MIN
