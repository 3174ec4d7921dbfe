import math

import numpy as np
import pytest
from scipy.integrate import quad

from mimoloc.geometry import partition_sliding, ula_topology
from mimoloc.linkmetrics import (
    EffectiveSnr,
    effective_snr,
    effective_snr_per_subarray,
    q_function,
    q_inverse,
)


def q_oracle(x):
    """Gaussian tail by direct quadrature of the standard normal density."""
    val, _ = quad(lambda t: math.exp(-t * t / 2) / math.sqrt(2 * math.pi),
                  x, math.inf)
    return val


class TestQFunction:
    def test_against_quadrature(self):
        for x in (-3.0, -1.0, 0.0, 0.5, 1.0, 2.0, 3.0, 5.0):
            assert q_function(x) == pytest.approx(q_oracle(x), rel=1e-10)

    def test_reference_point(self):
        assert q_function(3.0) == pytest.approx(1.3499e-3, rel=1e-4)

    def test_symmetry(self):
        xs = np.linspace(-6, 6, 25)
        assert np.allclose(q_function(xs) + q_function(-xs), 1.0, atol=1e-14)

    def test_round_trip(self):
        xs = np.linspace(-6.0, 6.0, 241)
        back = q_inverse(q_function(xs))
        assert np.max(np.abs(back - xs)) < 1e-9

    def test_inverse_endpoints(self):
        assert q_inverse(0.0) == math.inf
        assert q_inverse(1.0) == -math.inf
        assert q_inverse(0.5) == pytest.approx(0.0, abs=1e-15)

    def test_inverse_domain(self):
        with pytest.raises(ValueError):
            q_inverse(-0.1)
        with pytest.raises(ValueError):
            q_inverse(1.5)


class TestEffectiveSnr:
    def test_flat_channel_equals_combined_gain(self):
        # equal per-antenna power g on every subcarrier: gamma_eff is exactly
        # the MRC sum N*g/noise
        rng = np.random.default_rng(0)
        for _ in range(10):
            g = rng.uniform(0.01, 2.0)
            n_ant = rng.integers(1, 65)
            phases = rng.uniform(-np.pi, np.pi, size=(n_ant, 100))
            csi = math.sqrt(g) * np.exp(1j * phases)
            res = effective_snr(csi, noise_variance=1.0)
            assert res.gamma == pytest.approx(n_ant * g, rel=1e-9)
            assert not res.saturated

    def test_64_antenna_flat_identity(self):
        csi = np.full((64, 100), 0.5 + 0.0j)
        res = effective_snr(csi)
        assert res.gamma == pytest.approx(64 * 0.25, rel=1e-9)

    def test_noise_variance_scaling(self):
        rng = np.random.default_rng(1)
        csi = rng.normal(size=(8, 100)) + 1j * rng.normal(size=(8, 100))
        a = effective_snr(csi, noise_variance=1.0)
        b = effective_snr(csi, noise_variance=4.0)
        # frequency-selective, so no exact proportionality, but ordering holds
        assert b.gamma < a.gamma

    def test_never_exceeds_mean_subcarrier_snr(self):
        # Q(sqrt(gamma)) is convex in gamma, so frequency selectivity can
        # only cost effective SNR
        rng = np.random.default_rng(2)
        for _ in range(20):
            csi = (rng.normal(size=(8, 100))
                   + 1j * rng.normal(size=(8, 100))) * rng.uniform(0.05, 0.5)
            res = effective_snr(csi)
            mean_gamma = float(np.mean(np.sum(np.abs(csi) ** 2, axis=0)))
            assert res.gamma <= mean_gamma * (1 + 1e-12)

    def test_matches_direct_computation_in_normal_range(self):
        rng = np.random.default_rng(3)
        csi = (rng.normal(size=(4, 50)) + 1j * rng.normal(size=(4, 50))) * 0.7
        res = effective_snr(csi)
        gamma_k = np.sum(np.abs(csi) ** 2, axis=0)
        p = np.array([q_oracle(math.sqrt(g)) for g in gamma_k])
        expected = q_inverse(p.mean()) ** 2
        assert res.gamma == pytest.approx(expected, rel=1e-8)
        assert res.mean_bit_error == pytest.approx(p.mean(), rel=1e-8)

    def test_deep_snr_does_not_underflow(self):
        # per-subcarrier BER underflows float64 here, but the log-space mean
        # keeps the result finite and consistent with the flat identity
        csi = np.full((64, 100), 100.0 + 0.0j)
        res = effective_snr(csi)
        assert not res.saturated
        assert res.gamma == pytest.approx(64 * 1e4, rel=1e-9)

    def test_saturation_flag(self):
        res = effective_snr(np.full((1, 4), 1e200 + 0.0j))
        assert res.saturated
        assert res.gamma == math.inf

    def test_zero_channel(self):
        res = effective_snr(np.zeros((4, 10), dtype=complex))
        assert res.mean_bit_error == pytest.approx(0.5)
        assert res.gamma == pytest.approx(0.0, abs=1e-12)

    def test_antenna_subset(self):
        rng = np.random.default_rng(4)
        csi = rng.normal(size=(16, 100)) + 1j * rng.normal(size=(16, 100))
        idx = np.arange(4, 12)
        a = effective_snr(csi, antennas=idx)
        b = effective_snr(csi[4:12])
        assert a.gamma == pytest.approx(b.gamma, rel=1e-12)

    def test_per_subarray(self):
        rng = np.random.default_rng(5)
        csi = rng.normal(size=(16, 100)) + 1j * rng.normal(size=(16, 100))
        topo = ula_topology(n=16)
        subs = partition_sliding(topo, 8, 1)
        results = effective_snr_per_subarray(csi, subs)
        assert len(results) == 9
        assert all(isinstance(r, EffectiveSnr) for r in results)
        direct = effective_snr(csi[0:8])
        assert results[0].gamma == pytest.approx(direct.gamma, rel=1e-12)

    def test_input_validation(self):
        with pytest.raises(ValueError):
            effective_snr(np.ones((2, 4)), noise_variance=0.0)
        with pytest.raises(ValueError):
            effective_snr(np.ones(4))
