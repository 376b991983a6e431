"""Steering conventions, cascaded-parameter composition, and synthesis oracles."""

import json
from pathlib import Path

import numpy as np
import pytest

from dsmdt.channel import (
    BsRisPaths,
    CascadedParams,
    ChannelScenario,
    UeRisPaths,
    channel_factors,
    delay_seconds,
    expand_phi,
    flatten_paths,
    map_cascaded,
    measurement_factors,
    normalized_delay,
    scenario_from_json,
    scenario_to_json,
    steer_ula,
    steer_upa,
    synth_channel,
    synth_measurement,
    ula_matrix,
    upa_matrix,
)

DATA = Path(__file__).parent / "data"


def random_links(rng, l1=2, l2=3):
    bs = BsRisPaths(
        gains=rng.normal(size=l1) + 1j * rng.normal(size=l1),
        delays=rng.uniform(0, 1, l1),
        phi=rng.uniform(0, 1, l1),
        omega=rng.uniform(0, 1, l1),
        psi=rng.uniform(0, 1, l1),
    )
    ue = UeRisPaths(
        gains=rng.normal(size=l2) + 1j * rng.normal(size=l2),
        delays=rng.uniform(0, 1, l2),
        omega=rng.uniform(0, 1, l2),
        psi=rng.uniform(0, 1, l2),
    )
    return bs, ue


class TestSteering:
    def test_ula_elementwise(self):
        v = steer_ula(5, 0.3)
        for i in range(5):
            assert v[i] == pytest.approx(np.exp(-1j * np.pi * i * 0.3) / 5)

    def test_ula_period_two(self):
        assert np.allclose(steer_ula(8, 0.37), steer_ula(8, 2.37))

    def test_ula_matrix_columns(self):
        xs = [0.1, 0.9, 1.5]
        mat = ula_matrix(6, xs)
        for j, x in enumerate(xs):
            assert np.allclose(mat[:, j], steer_ula(6, x))

    def test_upa_elementwise(self):
        n1, n2, w, s = 3, 4, 0.25, 0.7
        v = steer_upa(n1, n2, w, s)
        for i1 in range(n1):
            for i2 in range(n2):
                want = np.exp(-1j * np.pi * (i1 * w + i2 * s)) / (n1 * n2)
                assert v[i1 * n2 + i2] == pytest.approx(want)

    def test_upa_matrix_columns(self):
        ws, ss = [0.1, 0.6], [0.2, 0.9]
        mat = upa_matrix(3, 4, ws, ss)
        for j in range(2):
            assert np.allclose(mat[:, j], steer_upa(3, 4, ws[j], ss[j]))

    def test_hadamard_sum_rule(self):
        # elementwise product of two steering vectors is the steering vector
        # of the summed coordinate, divided by the aperture size
        a = steer_ula(7, 0.4) * steer_ula(7, 0.9)
        assert np.allclose(a, steer_ula(7, 1.3) / 7)
        b = steer_upa(3, 4, 0.2, 0.5) * steer_upa(3, 4, 0.3, 0.4)
        assert np.allclose(b, steer_upa(3, 4, 0.5, 0.9) / 12)

    def test_delay_normalization_inverse(self):
        df = 120e3
        kappa = 1.7e-6
        tau = normalized_delay(kappa, df)
        assert delay_seconds(tau, df) == pytest.approx(kappa)

    def test_delay_phase_matches_subcarrier_profile(self):
        # exp(-2j*pi*p*df*kappa) must equal the steering phase at the
        # normalized delay, which is what lets delays reuse the ULA machinery
        df, kappa, p = 120e3, 0.9e-6, 13
        tau = normalized_delay(kappa, df)
        assert np.exp(-2j * np.pi * p * df * kappa) == pytest.approx(
            np.exp(-1j * np.pi * p * tau)
        )


class TestPathValidation:
    def test_rejects_out_of_range_delay(self):
        with pytest.raises(ValueError):
            UeRisPaths(gains=[1.0], delays=[2.0], omega=[0.1], psi=[0.1])

    def test_rejects_out_of_range_angle(self):
        with pytest.raises(ValueError):
            BsRisPaths(
                gains=[1.0], delays=[0.5], phi=[1.0], omega=[0.1], psi=[0.1]
            )

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            UeRisPaths(gains=[1.0, 2.0], delays=[0.1], omega=[0.1, 0.2], psi=[0.1, 0.2])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            UeRisPaths(gains=[], delays=[], omega=[], psi=[])
        with pytest.raises(ValueError):
            ChannelScenario(
                bs=BsRisPaths([1.0], [0.1], [0.1], [0.1], [0.1]), ues=[]
            )


class TestCascadedComposition:
    def test_parameter_sums_and_products(self):
        rng = np.random.default_rng(10)
        bs, ue = random_links(rng)
        casc = map_cascaded(bs, ue)
        assert casc.shape == (2, 3)
        for i in range(2):
            for j in range(3):
                assert casc.beta[i, j] == pytest.approx(bs.gains[i] * ue.gains[j])
                assert casc.tau[i, j] == pytest.approx(bs.delays[i] + ue.delays[j])
                assert casc.omega[i, j] == pytest.approx(bs.omega[i] + ue.omega[j])
                assert casc.psi[i, j] == pytest.approx(bs.psi[i] + ue.psi[j])
        assert np.array_equal(casc.phi, bs.phi)

    def test_row_offsets_are_column_constant(self):
        # the additive structure: within a column, row differences depend only
        # on the BS-side link, so they are identical across columns
        rng = np.random.default_rng(11)
        bs, ue = random_links(rng, l1=3, l2=4)
        casc = map_cascaded(bs, ue)
        for f in (casc.tau, casc.omega, casc.psi):
            d = f - f[0]
            assert np.allclose(d, d[:, :1])
        ratio = casc.beta / casc.beta[0]
        assert np.allclose(ratio, ratio[:, :1])

    def test_flatten_order(self):
        mat = np.arange(6).reshape(2, 3)
        flat = flatten_paths(mat)
        l1 = 2
        for u in range(6):
            assert flat[u] == mat[u % l1, u // l1]

    def test_expand_phi(self):
        phi = np.array([0.1, 0.2, 0.3])
        e = expand_phi(phi, 2)
        assert np.allclose(e, [0.1, 0.2, 0.3, 0.1, 0.2, 0.3])

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            CascadedParams(
                beta=np.ones((2, 2)),
                tau=np.zeros((2, 3)),
                omega=np.zeros((2, 2)),
                psi=np.zeros((2, 2)),
                phi=np.zeros(2),
            )


def bs_channel_at(bs, m, n1, n2, pi):
    """Per-subcarrier BS-side matrix, built path by path from first principles."""
    g = np.zeros((m, n1 * n2), dtype=complex)
    for ell in range(bs.n_paths):
        phase = np.exp(-1j * np.pi * pi * bs.delays[ell])
        g += bs.gains[ell] * phase * np.outer(
            steer_ula(m, bs.phi[ell]), steer_upa(n1, n2, bs.omega[ell], bs.psi[ell])
        )
    return g


def ue_channel_at(ue, n1, n2, pi):
    """Per-subcarrier UE-side vector, built path by path."""
    h = np.zeros(n1 * n2, dtype=complex)
    for l in range(ue.n_paths):
        phase = np.exp(-1j * np.pi * pi * ue.delays[l])
        h += ue.gains[l] * phase * steer_upa(n1, n2, ue.omega[l], ue.psi[l])
    return h


class TestSynthesisOracles:
    """The one-shot cascaded synthesis must equal the two-stage physical model:
    reflect the UE-side channel off the configured surface into the BS array,
    one subcarrier at a time."""

    M, P, Q, N1, N2 = 4, 5, 3, 2, 3

    def setup_method(self):
        rng = np.random.default_rng(12)
        self.bs, self.ue = random_links(rng)
        self.theta = np.exp(1j * rng.uniform(0, 2 * np.pi, (self.N1 * self.N2, self.Q)))
        self.casc = map_cascaded(self.bs, self.ue)

    def test_measurement_matches_two_stage_model(self):
        y = synth_measurement(self.casc, self.M, self.P, self.theta, self.N1, self.N2)
        assert y.shape == (self.P, self.M, self.Q)
        n = self.N1 * self.N2
        for pi in range(self.P):
            g = bs_channel_at(self.bs, self.M, self.N1, self.N2, pi)
            h = ue_channel_at(self.ue, self.N1, self.N2, pi)
            want = (n / self.P) * g @ (self.theta * h[:, None])
            np.testing.assert_allclose(y[pi], want, rtol=1e-10, atol=1e-14)

    def test_channel_matches_two_stage_model(self):
        t = synth_channel(self.casc, self.M, self.P, self.N1, self.N2)
        assert t.shape == (self.P, self.M, self.N1 * self.N2)
        n = self.N1 * self.N2
        for pi in range(self.P):
            g = bs_channel_at(self.bs, self.M, self.N1, self.N2, pi)
            h = ue_channel_at(self.ue, self.N1, self.N2, pi)
            want = (n / self.P) * g * h[None, :]
            np.testing.assert_allclose(t[pi], want, rtol=1e-10, atol=1e-14)

    def test_measurement_is_channel_times_configs(self):
        # contracting the channel tensor's surface mode with the config matrix
        # must reproduce the measurement tensor
        y = synth_measurement(self.casc, self.M, self.P, self.theta, self.N1, self.N2)
        t = synth_channel(self.casc, self.M, self.P, self.N1, self.N2)
        np.testing.assert_allclose(y, t @ self.theta, rtol=1e-10, atol=1e-14)

    def test_factor_variants_agree(self):
        a, b, r = measurement_factors(
            self.casc, self.M, self.P, self.theta, self.N1, self.N2
        )
        a2, b2, d = channel_factors(self.casc, self.M, self.P, self.N1, self.N2)
        assert np.array_equal(a, a2) and np.array_equal(b, b2)
        np.testing.assert_allclose(r, self.theta.T @ d, rtol=1e-12)


class TestSerialization:
    def test_round_trip_exact(self):
        rng = np.random.default_rng(13)
        bs, ue = random_links(rng)
        _, ue2 = random_links(rng, l2=2)
        sc = ChannelScenario(bs=bs, ues=[ue, ue2])
        back = scenario_from_json(scenario_to_json(sc))
        assert np.array_equal(back.bs.gains, sc.bs.gains)
        assert np.array_equal(back.bs.phi, sc.bs.phi)
        assert back.n_users == 2
        for k in range(2):
            for f in ("gains", "delays", "omega", "psi"):
                assert np.array_equal(getattr(back.ues[k], f), getattr(sc.ues[k], f))

    def test_rejects_unknown_format(self):
        with pytest.raises(ValueError):
            scenario_from_json(json.dumps({"format": "bogus"}))

    def test_golden_file_stable(self):
        text = (DATA / "scenario_seed7.json").read_text()
        assert scenario_to_json(scenario_from_json(text)) == text
