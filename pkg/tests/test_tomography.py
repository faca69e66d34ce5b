"""Tests for the simulated 36-basis tomography and the maximum-likelihood reconstruction."""

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from qdqkd.quantum_math import (
    PHI_PLUS,
    FssModelParams,
    check_density_matrix,
    concurrence,
    fss_time_averaged_rho,
    pure_density,
    qber_from_rho,
    random_density_matrix,
    state_fidelity,
)
from qdqkd.source_model import SourceParams, multiphoton_prob_for_g2
from qdqkd.stream_analysis import DetectorParams
from qdqkd.tomography import (
    ALL_BASES,
    TomographyCounts,
    TomographyError,
    TomographySettings,
    _nll_and_grad,
    _projectors,
    counts_qber,
    ideal_counts,
    log_likelihood,
    mle_reconstruct,
    mle_reconstruct_full,
    sample_counts,
    simulate_tomography_run,
    window_sensitivity,
)

PHI = pure_density(PHI_PLUS)
SMALL = TomographySettings(counts_target=1000)


def source_20k(**kw):
    base = dict(slow_channel_fraction=0.09, slow_channel_lifetime=1500.0,
                multiphoton_prob_xx=multiphoton_prob_for_g2(0.034, 0.87),
                multiphoton_prob_x=multiphoton_prob_for_g2(0.020, 0.87))
    base.update(kw)
    return SourceParams(**base)


@pytest.fixture(scope="module")
def ideal_run():
    return simulate_tomography_run(SourceParams(fss_S=0.0), DetectorParams(), SMALL, seed=1)


@pytest.fixture(scope="module")
def run_20k():
    return simulate_tomography_run(source_20k(), DetectorParams(), SMALL, seed=2)


class TestSettingsAndCounts:
    def test_default_bases(self):
        s = TomographySettings()
        assert len(s.bases) == 36 and len(set(s.bases)) == 36
        assert s.window == 2000

    def test_invalid_settings(self):
        with pytest.raises(ValueError, match="36"):
            TomographySettings(bases=ALL_BASES[:35])
        with pytest.raises(ValueError, match="36"):
            TomographySettings(bases=ALL_BASES[:35] + (ALL_BASES[0],))
        with pytest.raises(ValueError, match="window"):
            TomographySettings(window=0)

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            TomographyCounts(list(ALL_BASES), -np.ones(36), np.ones(36))
        with pytest.raises(ValueError):
            TomographyCounts(list(ALL_BASES), np.ones(36), np.zeros(36))
        with pytest.raises(ValueError):
            TomographyCounts(list(ALL_BASES), np.ones(35), np.ones(36))

    def test_csv_round_trip(self):
        c = sample_counts(PHI, 10_000, np.random.default_rng(0))
        c.normalization = np.random.default_rng(1).uniform(0.5, 2.0, 36)
        back = TomographyCounts.from_csv(c.to_csv())
        assert back.bases == c.bases
        np.testing.assert_array_equal(back.counts, c.counts)
        np.testing.assert_array_equal(back.normalization, c.normalization)
        assert c.to_csv().splitlines()[0] == "basis_a,basis_b,counts,normalization"

    def test_csv_errors(self):
        with pytest.raises(ValueError, match="header"):
            TomographyCounts.from_csv("a,b\n")
        with pytest.raises(ValueError, match="line 2"):
            TomographyCounts.from_csv("basis_a,basis_b,counts,normalization\nH,H,x,1.0\n")

    def test_counts_qber_matches_state(self):
        rho = fss_time_averaged_rho(FssModelParams(0.96, 230))
        q, err = counts_qber(ideal_counts(rho))
        assert q == pytest.approx(qber_from_rho(rho), abs=1e-8)
        assert err < 1e-4


class TestSimulatedMeasurement:
    def test_ideal_source_cross_polarized_counts_vanish(self, ideal_run):
        c = dict(zip(ideal_run.bases, ideal_run.counts().counts))
        assert c[("H", "H")] > 1000
        # only accidentals remain in HV; the ratio to HH diverges
        assert c[("H", "V")] <= 0.01 * c[("H", "H")]
        assert c[("D", "A")] <= 0.01 * c[("D", "D")]
        assert c[("R", "R")] <= 0.01 * c[("R", "L")]

    def test_ideal_source_diagonal_basis_holds_half_the_pairs(self, ideal_run):
        c = dict(zip(ideal_run.bases, ideal_run.counts().counts))
        # P(DD) = 1/2 against P(DH) = 1/4
        ratio = c[("D", "D")] / c[("D", "H")]
        err = ratio * np.sqrt(1 / c[("D", "D")] + 1 / c[("D", "H")])
        assert ratio == pytest.approx(2.0, abs=4 * err)

    def test_ideal_source_reconstructs_phi_plus(self, ideal_run):
        rho = mle_reconstruct(ideal_run.counts())
        assert state_fidelity(rho, PHI) > 0.99
        assert counts_qber(ideal_run.counts())[0] < 0.01

    def test_20k_concurrence_below_noise_free_model(self, run_20k):
        rho = mle_reconstruct(run_20k.counts())
        model = concurrence(fss_time_averaged_rho(FssModelParams(0.96, 252.0, 0.0)))
        assert concurrence(rho) < model

    def test_excluding_the_tail_does_not_raise_qber(self, run_20k):
        q0 = counts_qber(run_20k.counts(0))[0]
        qm = counts_qber(run_20k.counts(-1000))[0]
        assert qm <= q0

    def test_flat_window_curve_without_slow_channel(self):
        run = simulate_tomography_run(source_20k(slow_channel_fraction=0.0, fss_S=0.0), DetectorParams(),
                                      SMALL, seed=3)
        q0, e0 = counts_qber(run.counts(0))
        for off in (-1000, -500, 500, 1000):
            q, e = counts_qber(run.counts(off))
            assert abs(q - q0) <= 3 * np.hypot(e, e0)

    def test_window_sensitivity_curve(self, run_20k):
        curve = window_sensitivity(run_20k, offsets=(-500, 0, 500))
        assert [o for o, _ in curve] == [-500.0, 0.0, 500.0]
        assert all(0 <= q <= 0.5 for _, q in curve)

    def test_deterministic_and_worker_independent(self):
        s = TomographySettings(counts_target=200)
        a = simulate_tomography_run(source_20k(), DetectorParams(), s, seed=4)
        b = simulate_tomography_run(source_20k(), DetectorParams(), s, seed=4, workers=3)
        assert a.center == b.center
        for ha, hb in zip(a.histograms, b.histograms):
            np.testing.assert_array_equal(ha.counts, hb.counts)


class TestMle:
    def test_noiseless_phi_plus(self):
        rec = mle_reconstruct_full(ideal_counts(PHI))
        assert state_fidelity(rec.rho, PHI) > 0.999
        assert rec.converged_restarts >= 1
        assert "concurrence=" in rec.report()

    def test_random_states_at_one_million_events(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            rho = random_density_matrix(rng)
            c = sample_counts(rho, 1_000_000, rng)
            rho_hat = mle_reconstruct(c)
            assert state_fidelity(rho_hat, rho) > 0.99
            assert log_likelihood(rho_hat, c) >= log_likelihood(rho, c)

    def test_fidelity_improves_with_counts(self):
        infid = []
        for n in (10_000, 100_000, 1_000_000):
            rng = np.random.default_rng(8)
            vals = []
            for _ in range(6):
                rho = random_density_matrix(rng)
                vals.append(1 - state_fidelity(mle_reconstruct(sample_counts(rho, n, rng)), rho))
            infid.append(np.mean(vals))
        assert infid[0] > infid[1] > infid[2]

    def test_permutation_invariance(self):
        rng = np.random.default_rng(9)
        rho = random_density_matrix(rng)
        c = sample_counts(rho, 200_000, rng)
        perm = rng.permutation(36)
        cp = TomographyCounts([c.bases[i] for i in perm], c.counts[perm], c.normalization[perm])
        np.testing.assert_allclose(mle_reconstruct(cp), mle_reconstruct(c), atol=1e-6)

    def test_normalization_scales_out(self):
        rng = np.random.default_rng(10)
        rho = random_density_matrix(rng)
        c = sample_counts(rho, 200_000, rng)
        scaled = TomographyCounts(c.bases, c.counts, 7.5 * c.normalization)
        np.testing.assert_allclose(mle_reconstruct(scaled), mle_reconstruct(c), atol=1e-6)

    def test_analytic_gradient_against_finite_differences(self):
        rng = np.random.default_rng(11)
        c = sample_counts(random_density_matrix(rng), 100_000, rng)
        proj = _projectors(c.bases)
        n = c.counts / c.counts.sum()
        w = c.normalization / c.counts.sum()
        for _ in range(5):
            t = rng.normal(0, 0.5, 16)
            _, g = _nll_and_grad(t, proj, n, w)
            fd = np.empty(16)
            for k in range(16):
                e = np.zeros(16)
                e[k] = 1e-6
                fd[k] = (_nll_and_grad(t + e, proj, n, w)[0] - _nll_and_grad(t - e, proj, n, w)[0]) / 2e-6
            assert np.max(np.abs(g - fd)) <= 1e-5 * np.max(np.abs(g))

    def test_gradient_vanishes_at_optimum(self):
        # full-rank truth, so the optimum is interior and every traceless
        # Hermitian direction is a stationary direction of the likelihood
        rng = np.random.default_rng(12)
        c = sample_counts(random_density_matrix(rng), 1_000_000, rng)
        rho = mle_reconstruct(c)
        assert np.min(np.linalg.eigvalsh(rho)) > 1e-3
        dirs = []
        for i in range(4):
            for j in range(i + 1, 4):
                e = np.zeros((4, 4), complex)
                e[i, j] = e[j, i] = 1
                dirs.append(e)
                e = np.zeros((4, 4), complex)
                e[i, j], e[j, i] = -1j, 1j
                dirs.append(e)
        for k in range(3):
            d = np.zeros(4)
            d[k], d[k + 1] = 1, -1
            dirs.append(np.diag(d).astype(complex))

        def fd_grad(r, h=1e-6):
            return np.array([(log_likelihood(r + h * g, c) - log_likelihood(r - h * g, c)) / (2 * h)
                             for g in dirs])

        g_opt = fd_grad(rho)
        g_ref = fd_grad(np.eye(4, dtype=complex) / 4)
        assert np.max(np.abs(g_opt)) <= 1e-5 * np.max(np.abs(g_ref))

    def test_non_convergence_raises_with_best_iterate(self):
        rng = np.random.default_rng(13)
        c = sample_counts(random_density_matrix(rng), 100_000, rng)
        with pytest.raises(TomographyError) as info:
            mle_reconstruct_full(c, max_iter=1, restarts=2)
        check_density_matrix(info.value.best_rho)
        assert "grad_norm" in info.value.diagnostics

    def test_rejects_empty_or_incomplete(self):
        with pytest.raises(ValueError, match="zero"):
            mle_reconstruct(TomographyCounts(list(ALL_BASES), np.zeros(36), np.ones(36)))
        c = ideal_counts(PHI)
        with pytest.raises(ValueError, match="16"):
            mle_reconstruct(TomographyCounts(c.bases[:10], c.counts[:10], c.normalization[:10]))

    @settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
    @given(counts=st.lists(st.one_of(st.just(0), st.integers(0, 5000)), min_size=36, max_size=36),
           norms=st.lists(st.floats(0.5, 2.0), min_size=36, max_size=36))
    def test_output_is_always_a_density_matrix(self, counts, norms):
        if sum(counts) == 0:
            counts[0] = 1
        rho = mle_reconstruct(TomographyCounts(list(ALL_BASES), counts, norms))
        check_density_matrix(rho)
        assert np.min(np.linalg.eigvalsh(rho)) >= -1e-9
