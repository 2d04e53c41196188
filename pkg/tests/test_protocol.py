"""Tests for pilot transmission, decorrelation and the two-phase session."""

import numpy as np
import pytest

from bdris.physics import (
    ChannelPair,
    ScatteringMatrix,
    SystemConfig,
    assemble_cascaded,
    build_mapping,
    random_susceptance,
    scattering_list_from_susceptance,
    training_matrix_from_susceptance,
)
from bdris.protocol import (
    build_pilot_book,
    check_scattering_list,
    complex_noise,
    decorrelate,
    observe_stacked,
    run_phase,
    transmit_subframe,
    two_phase_session,
)

DESK = SystemConfig(N=4, M=8, group_size=4, K=2, U=2)


def random_channel(cfg, rng):
    return ChannelPair(complex_noise(rng, (cfg.N, cfg.M), 1.0), complex_noise(rng, (cfg.M, cfg.KU), 1.0))


def identity_scattering(cfg):
    return ScatteringMatrix(np.broadcast_to(np.eye(cfg.group_size), (cfg.G,) + (cfg.group_size,) * 2).astype(complex))


class TestPilotBook:
    def test_single(self):
        np.testing.assert_array_equal(build_pilot_book(1, 1).X, [[1]])

    def test_two(self):
        X = build_pilot_book(2, 1).X
        np.testing.assert_allclose(X, [[1, 1], [1, -1]], atol=1e-15)
        np.testing.assert_allclose(X @ X.conj().T, 2 * np.eye(2), atol=1e-14)

    @pytest.mark.parametrize("K, U", [(1, 1), (2, 2), (3, 2), (4, 1), (2, 4)])
    def test_orthogonality_law(self, K, U):
        book = build_pilot_book(K, U)
        assert np.allclose(np.abs(book.X), 1.0, atol=1e-15)
        for k1 in range(K):
            for k2 in range(K):
                prod = book.user(k1) @ book.user(k2).conj().T
                expected = K * U * np.eye(U) if k1 == k2 else np.zeros((U, U))
                assert np.max(np.abs(prod - expected)) < 1e-12


class TestSubframe:
    def test_noiseless_identity_single_user(self):
        cfg = SystemConfig(N=3, M=2, group_size=1, K=1, U=1)
        rng = np.random.default_rng(0)
        ch = random_channel(cfg, rng)
        y = transmit_subframe(ch, identity_scattering(cfg), build_pilot_book(1, 1), cfg.pu, cfg.noise_power, None)
        np.testing.assert_allclose(y, np.sqrt(cfg.pu) * ch.h_it @ ch.h_ri, atol=1e-15)

    def test_noise_variance(self):
        cfg = SystemConfig(N=4, M=2, group_size=1, K=1, U=1, noise_power=0.3)
        ch = ChannelPair(np.zeros((4, 2), complex), np.zeros((2, 1), complex))
        rng = np.random.default_rng(1)
        y = np.concatenate([transmit_subframe(ch, identity_scattering(cfg), build_pilot_book(1, 1), cfg.pu,
                                              cfg.noise_power, rng).ravel() for _ in range(250_000)])
        assert np.mean(np.abs(y) ** 2) == pytest.approx(0.3, rel=0.02)

    def test_linearity(self):
        rng = np.random.default_rng(2)
        ch = random_channel(DESK, rng)
        phi = identity_scattering(DESK)
        book = build_pilot_book(DESK.K, DESK.U)
        y1 = transmit_subframe(ch, phi, book, 1.0, DESK.noise_power, None)
        y4 = transmit_subframe(ch, phi, book, 4.0, DESK.noise_power, None)
        np.testing.assert_allclose(y4, 2 * y1, atol=1e-13)


class TestDecorrelate:
    def test_noiseless_exact(self):
        rng = np.random.default_rng(3)
        ch = random_channel(DESK, rng)
        phi = scattering_list_from_susceptance(random_susceptance(DESK, rng, 1), DESK)[0]
        book = build_pilot_book(DESK.K, DESK.U)
        y = transmit_subframe(ch, phi, book, DESK.pu, DESK.noise_power, None)
        for k in range(DESK.K):
            ref = np.sqrt(DESK.pu) * ch.h_it @ phi.full() @ ch.user(k, DESK.U)
            assert np.linalg.norm(decorrelate(y, book.user(k), DESK.KU) - ref) < 1e-12 * np.linalg.norm(ref)

    def test_no_cross_user_leakage(self):
        rng = np.random.default_rng(4)
        ch = random_channel(DESK, rng)
        ch.h_ri[:, 2:] = 0  # user 1 silent
        phi = scattering_list_from_susceptance(random_susceptance(DESK, rng, 1), DESK)[0]
        book = build_pilot_book(DESK.K, DESK.U)
        y = transmit_subframe(ch, phi, book, DESK.pu, DESK.noise_power, None)
        assert np.max(np.abs(decorrelate(y, book.user(1), DESK.KU))) < 1e-12

    def test_noise_variance(self):
        rng = np.random.default_rng(5)
        book = build_pilot_book(DESK.K, DESK.U)
        noise = complex_noise(rng, (62_500, DESK.N, DESK.KU), DESK.noise_power)
        dec = np.concatenate([decorrelate(noise, book.user(k), DESK.KU) for k in range(DESK.K)], axis=-1)
        assert dec.size >= 1_000_000
        assert np.mean(np.abs(dec) ** 2) == pytest.approx(DESK.noise_power / DESK.KU, rel=0.02)


class TestRunPhase:
    def test_matches_stacked_model(self):
        rng = np.random.default_rng(6)
        mapping = build_mapping(DESK.group_size)
        for _ in range(10):
            ch = random_channel(DESK, rng)
            b = random_susceptance(DESK, rng, 8)
            obs = run_phase(ch, scattering_list_from_susceptance(b, DESK), build_pilot_book(2, 2), DESK, None)
            q = assemble_cascaded(ch, mapping, DESK)
            ref = observe_stacked(q[None], training_matrix_from_susceptance(b, DESK), DESK.pu,
                                  DESK.noise_power, DESK.KU, None)[0]
            assert np.linalg.norm(obs.y - ref) < 1e-12 * np.linalg.norm(ref)

    def test_single_subframe(self):
        rng = np.random.default_rng(7)
        ch = random_channel(DESK, rng)
        phi = scattering_list_from_susceptance(random_susceptance(DESK, rng, 1), DESK)
        book = build_pilot_book(2, 2)
        obs = run_phase(ch, phi, book, DESK, None)
        assert obs.y.shape == (8, 2, 1)
        y = transmit_subframe(ch, phi[0], book, DESK.pu, DESK.noise_power, None)
        np.testing.assert_allclose(obs.y[:, 1, 0], decorrelate(y, book.user(1), 4).T.ravel(), atol=1e-15)

    def test_subframe_permutation(self):
        rng = np.random.default_rng(8)
        ch = random_channel(DESK, rng)
        phis = scattering_list_from_susceptance(random_susceptance(DESK, rng, 4), DESK)
        book = build_pilot_book(2, 2)
        order = [2, 0, 3, 1]
        a = run_phase(ch, phis, book, DESK, None)
        b = run_phase(ch, [phis[i] for i in order], book, DESK, None)
        np.testing.assert_array_equal(b.y, a.y[..., order])

    def test_training_matrix(self):
        rng = np.random.default_rng(9)
        b = random_susceptance(DESK, rng, 3)
        obs = run_phase(random_channel(DESK, rng), scattering_list_from_susceptance(b, DESK),
                        build_pilot_book(2, 2), DESK, None)
        np.testing.assert_allclose(obs.training_matrix(), training_matrix_from_susceptance(b, DESK), atol=1e-14)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            run_phase(random_channel(DESK, np.random.default_rng(0)), [], build_pilot_book(2, 2), DESK, None)


class TestSession:
    def test_zero_callback_gives_identity(self):
        rng = np.random.default_rng(10)
        ch = random_channel(DESK, rng)
        zero = lambda obs, pu: np.zeros((DESK.half_total, DESK.tau2))  # noqa: E731
        first, second = two_phase_session(ch, random_susceptance(DESK, rng, 1), zero, DESK)
        assert first.tau == 1 and second.tau == DESK.tau2
        for phi in second.scattering:
            np.testing.assert_allclose(phi.full(), np.eye(DESK.M), atol=1e-15)
        assert second.meta["pilot_slots"] == DESK.KU * (1 + DESK.tau2)
        assert second.meta["t_ctrl"] == 0

    def test_random_callback_feasible(self):
        rng = np.random.default_rng(11)
        ch = random_channel(DESK, rng)
        wild = lambda obs, pu: rng.standard_normal((DESK.half_total, DESK.tau2))  # noqa: E731
        _, second = two_phase_session(ch, random_susceptance(DESK, rng, 1), wild, DESK, seed=3)
        assert check_scattering_list(second.scattering)

    def test_callback_sees_phase_one(self):
        rng = np.random.default_rng(12)
        ch = random_channel(DESK, rng)
        seen = {}

        def cb(obs, pu_dbm):
            seen["shape"], seen["pu"] = obs.y.shape, pu_dbm
            return np.zeros((DESK.half_total, DESK.tau2))

        two_phase_session(ch, random_susceptance(DESK, rng, 1), cb, DESK, seed=1)
        assert seen == {"shape": (DESK.NU, DESK.K, 1), "pu": pytest.approx(DESK.pu_dbm)}

    def test_wrong_width_rejected(self):
        rng = np.random.default_rng(13)
        bad = lambda obs, pu: np.zeros((DESK.half_total, DESK.tau2 - 1))  # noqa: E731
        with pytest.raises(ValueError):
            two_phase_session(random_channel(DESK, rng), random_susceptance(DESK, rng, 1), bad, DESK)

    def test_seeded_noise_reproducible(self):
        rng = np.random.default_rng(14)
        ch = random_channel(DESK, rng)
        b1 = random_susceptance(DESK, rng, 1)
        zero = lambda obs, pu: np.zeros((DESK.half_total, DESK.tau2))  # noqa: E731
        a = two_phase_session(ch, b1, zero, DESK, seed=5)
        b = two_phase_session(ch, b1, zero, DESK, seed=5)
        assert np.array_equal(a[1].y, b[1].y)
        assert not np.array_equal(a[1].y, two_phase_session(ch, b1, zero, DESK, seed=6)[1].y)
