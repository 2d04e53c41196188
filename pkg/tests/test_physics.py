"""Tests for the group-connected scattering algebra and the cascaded channel."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bdris import autodiff as ad
from bdris.physics import (
    ChannelPair,
    ScatteringMatrix,
    SystemConfig,
    assemble_cascaded,
    assemble_cascaded_batch,
    build_mapping,
    dbm_to_watts,
    effective_channel,
    expand_half,
    extract_half,
    feasibility_errors,
    random_feasible_scattering,
    random_susceptance,
    susceptance_blocks,
    susceptance_to_scattering,
    training_matrix_from_susceptance,
    watts_to_dbm,
)

DESK = SystemConfig(N=4, M=8, group_size=4, K=2, U=2)


def crandn(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def brute_force_mapping(m):
    """P built by enumerating (i, j) pairs directly."""
    pairs = [(i, j) for j in range(m) for i in range(j + 1)]  # column-major, i <= j
    P = np.zeros((m * m, len(pairs)), dtype=int)
    for j in range(m):
        for i in range(m):
            P[i + m * j, pairs.index((min(i, j), max(i, j)))] = 1
    return P


class TestSystemConfig:
    def test_derived_sizes(self):
        assert (DESK.G, DESK.half_group, DESK.half_total, DESK.NU, DESK.KU) == (2, 10, 20, 8, 4)
        assert DESK.n_real_coefficients == 8 * 2 * 8 * 5

    @pytest.mark.parametrize("kwargs", [dict(M=7), dict(K=0), dict(pu=0.0), dict(noise_power=-1.0)])
    def test_invalid(self, kwargs):
        base = dict(N=4, M=8, group_size=4, K=2, U=2)
        with pytest.raises(ValueError):
            SystemConfig(**{**base, **kwargs})

    def test_dbm_round_trip(self):
        assert dbm_to_watts(30.0) == pytest.approx(1.0)
        assert watts_to_dbm(dbm_to_watts(13.8)) == pytest.approx(13.8)


class TestMapping:
    def test_size_one(self):
        np.testing.assert_array_equal(build_mapping(1).matrix(), [[1]])

    def test_size_two_rows(self):
        # vec order (1,1),(2,1),(1,2),(2,2) -> half indices 1,2,2,3 (zero-based here)
        np.testing.assert_array_equal(build_mapping(2).rows, [0, 1, 1, 2])

    def test_size_three_multiplicities(self):
        P = build_mapping(3)
        assert P.matrix().shape == (9, 6)
        np.testing.assert_array_equal(P.column_multiplicity(), [1, 2, 1, 2, 2, 1])

    @pytest.mark.parametrize("m", [1, 2, 3, 4, 5, 8])
    def test_matches_brute_force(self, m):
        np.testing.assert_array_equal(build_mapping(m).matrix(), brute_force_mapping(m))

    @pytest.mark.parametrize("m", [2, 4, 8])
    def test_one_nonzero_per_row(self, m):
        assert np.all(build_mapping(m).matrix().sum(axis=1) == 1)


class TestHalfVectors:
    def test_expand_two(self):
        out = expand_half(np.array([1.0, 2.0, 3.0]), build_mapping(2))
        np.testing.assert_array_equal(out, [[1.0, 2.0], [2.0, 3.0]])

    def test_expand_matches_P(self):
        P = build_mapping(3)
        x = np.arange(1.0, 7.0)
        np.testing.assert_array_equal(expand_half(x, P).reshape(-1, order="F"), P.matrix() @ x)

    def test_random_symmetric(self):
        x = np.random.default_rng(0).standard_normal(10)
        full = expand_half(x, build_mapping(4))
        assert np.array_equal(full, full.T)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            expand_half(np.ones(4), build_mapping(2))

    @settings(max_examples=30, deadline=None)
    @given(m=st.integers(1, 6), seed=st.integers(0, 2**16))
    def test_round_trip_property(self, m, seed):
        P = build_mapping(m)
        x = np.random.default_rng(seed).standard_normal(m * (m + 1) // 2)
        assert np.array_equal(extract_half(expand_half(x, P), P), x)


class TestSusceptanceToScattering:
    def test_zero_gives_identity(self):
        phi = susceptance_to_scattering(np.zeros((3, 3))).numpy()
        np.testing.assert_allclose(phi, np.eye(3), atol=1e-15)

    def test_scalar_case(self):
        phi = susceptance_to_scattering(np.array([[1 / 50.0]]), 50.0).numpy()
        assert phi[0, 0] == pytest.approx(-1j, abs=1e-14)

    def test_thousand_random_draws(self):
        rng = np.random.default_rng(1)
        b = rng.standard_normal((1000, 4, 4)) / 50.0
        b = 0.5 * (b + np.swapaxes(b, -1, -2))
        unit, sym = feasibility_errors(susceptance_to_scattering(b, 50.0).numpy())
        assert unit < 1e-9 and sym < 1e-12

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(2)
        b = rng.standard_normal((4, 4)) / 50.0
        b = b + b.T
        ref = np.linalg.solve(np.eye(4) + 50j * b, np.eye(4) - 50j * b)
        np.testing.assert_allclose(susceptance_to_scattering(b, 50.0).numpy(), ref, atol=1e-13)

    def test_gradcheck_frobenius_norm(self):
        """``||Φ||_F² = M̄`` is flat on the unitary set, so test a non-trivial weighted norm."""
        rng = np.random.default_rng(3)
        b = rng.standard_normal((3, 3)) / 50.0
        b = ad.parameter(0.5 * (b + b.T))
        w = rng.standard_normal((3, 3))

        def loss():
            phi = susceptance_to_scattering(b, 50.0)
            return ad.sum(ad.add(ad.square(ad.mul(phi.re, w)), ad.square(phi.im)))

        loss().backward()
        for idx in np.ndindex(3, 3):
            num = ad.numerical_grad(lambda: float(loss().value), b.value, idx, 1e-8)
            assert ad.relative_error(b.grad[idx], num) < 1e-5


class TestScatteringMatrix:
    def test_random_is_feasible(self):
        for seed in range(20):
            random_feasible_scattering(DESK, seed).validate()

    def test_deterministic(self):
        a = random_feasible_scattering(DESK, 7).blocks
        assert np.array_equal(a, random_feasible_scattering(DESK, 7).blocks)

    def test_seeds_differ(self):
        a = random_feasible_scattering(DESK, 1).blocks
        assert np.linalg.norm(a - random_feasible_scattering(DESK, 2).blocks) > 0

    def test_validate_rejects(self):
        with pytest.raises(ValueError):
            ScatteringMatrix(2 * np.eye(2)[None].astype(complex)).validate()

    def test_full_is_block_diagonal(self):
        phi = random_feasible_scattering(DESK, 3)
        full = phi.full()
        assert np.all(full[:4, 4:] == 0) and np.all(full[4:, :4] == 0)
        np.testing.assert_array_equal(full[4:, 4:], phi.blocks[1])

    def test_training_matrix_columns(self):
        rng = np.random.default_rng(4)
        b = random_susceptance(DESK, rng, 3)
        phi = training_matrix_from_susceptance(b, DESK)
        for t in range(3):
            blocks = susceptance_to_scattering(susceptance_blocks(b[:, t], DESK), DESK.z0).numpy()
            np.testing.assert_allclose(phi[:, t], ScatteringMatrix(blocks).half(), atol=1e-14)


class TestCascaded:
    def test_scalar_case(self):
        cfg = SystemConfig(N=1, M=1, group_size=1, K=1, U=1)
        ch = ChannelPair(np.array([[2.0 + 1j]]), np.array([[0.5 - 1j]]))
        q = assemble_cascaded(ch, build_mapping(1), cfg)
        assert q.shape == (1, 1, 1)
        assert q[0, 0, 0] == pytest.approx((2.0 + 1j) * (0.5 - 1j))

    def test_identity(self):
        rng = np.random.default_rng(5)
        mapping = build_mapping(DESK.group_size)
        for i in range(100):
            ch = ChannelPair(crandn(rng, (DESK.N, DESK.M)), crandn(rng, (DESK.M, DESK.KU)))
            phi = random_feasible_scattering(DESK, [5, i])
            q = assemble_cascaded(ch, mapping, DESK)
            for k in range(DESK.K):
                ref = ch.h_it @ phi.full() @ ch.user(k, DESK.U)
                got = effective_channel(q[:, k], phi.half(), DESK)
                assert np.linalg.norm(got - ref) / np.linalg.norm(ref) < 1e-12

    def test_off_diagonal_column_is_sum_of_kronecker_columns(self):
        cfg = SystemConfig(N=2, M=2, group_size=2, K=1, U=1)
        rng = np.random.default_rng(6)
        ch = ChannelPair(crandn(rng, (2, 2)), crandn(rng, (2, 1)))
        kron = np.kron(ch.h_ri[:, 0].T, ch.h_it)  # columns in vec order (1,1),(2,1),(1,2),(2,2)
        q = assemble_cascaded(ch, build_mapping(2), cfg)[:, 0, :]
        np.testing.assert_allclose(q[:, 0], kron[:, 0], atol=1e-15)
        np.testing.assert_allclose(q[:, 1], kron[:, 1] + kron[:, 2], atol=1e-15)
        np.testing.assert_allclose(q[:, 2], kron[:, 3], atol=1e-15)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(7)
        h_it = crandn(rng, (3, DESK.N, DESK.M))
        h_ri = crandn(rng, (3, DESK.M, DESK.KU))
        batch = assemble_cascaded_batch(h_it, h_ri, DESK)
        for s in range(3):
            single = assemble_cascaded(ChannelPair(h_it[s], h_ri[s]), build_mapping(4), DESK)
            np.testing.assert_allclose(batch[s], single, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ChannelPair(np.ones((3, 8)), np.ones((8, 4))).check(DESK)

    @settings(max_examples=20, deadline=None)
    @given(
        N=st.integers(1, 3), G=st.integers(1, 3), m=st.integers(1, 3),
        K=st.integers(1, 2), U=st.integers(1, 2), seed=st.integers(0, 2**16),
    )
    def test_identity_property(self, N, G, m, K, U, seed):
        cfg = SystemConfig(N=N, M=G * m, group_size=m, K=K, U=U)
        rng = np.random.default_rng(seed)
        ch = ChannelPair(crandn(rng, (N, cfg.M)), crandn(rng, (cfg.M, cfg.KU)))
        phi = random_feasible_scattering(cfg, seed)
        q = assemble_cascaded(ch, build_mapping(m), cfg)
        for k in range(K):
            ref = ch.h_it @ phi.full() @ ch.user(k, U)
            got = effective_channel(q[:, k], phi.half(), cfg)
            assert np.linalg.norm(got - ref) <= 1e-12 * max(np.linalg.norm(ref), 1e-300)


def test_half_index_enumeration_is_column_major():
    P = build_mapping(4)
    expected = [(i, j) for j in range(4) for i in range(j + 1)]
    got = sorted(itertools.product(range(4), range(4)), key=lambda ij: P.full_index()[ij])
    got = [ij for ij in got if ij[0] <= ij[1]]
    assert got == expected
