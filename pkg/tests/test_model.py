import math

import numpy as np
import pytest
from scipy import stats as sps

from synthcal.kinetics import FactorPoint, batch_log_amounts
from synthcal.model import (
    ExperimentData,
    KineticsMu,
    ParameterState,
    Priors,
    REPLICA_DISCREPANCY,
    REPLICA_NOISE,
    REPLICA_THETA_TRUE,
    build_S,
    build_T,
    build_t_blocks,
    replica_runs,
    simulate_experiment,
    tempered_log_posterior,
)
from synthcal.stats import SpdMatrix, substream

X0 = FactorPoint(30.0, 91.5, 26.45, 30.0, 31.5)


def tiny_data(times=(100.0,), censor=False):
    n = len(times)
    mask = np.zeros((n, 3), dtype=bool)
    if censor:
        mask[0, 2] = True
    y = np.full((n, 3), 0.5)
    return ExperimentData(runs=[(X0, np.array(times))], y=y, censor_mask=mask, chi=0.01)


def make_state(data, rng=None):
    rng = rng or substream(5, 1)
    m = data.m
    return ParameterState(
        theta=np.array([-13.0, -13.0, -13.0, 10.0, 10.0]),
        d_star=rng.normal(size=(m, 3)),
        omega=np.diag([0.3, 0.4, 0.5]),
        sigma=np.diag([0.2, 0.3, 0.4]),
        rho=0.8,
        psi=np.array([0.5, 0.2]),
        y_cens=np.full(data.n_censored, math.log(0.01) - 0.5),
    )


class TestBuildT:
    def test_rho_to_zero_gives_ones_blocks(self):
        runs = [(X0, np.array([1.0, 50.0, 400.0]))]
        t = build_T(1e-14, runs).dense()
        assert np.allclose(t, np.ones((3, 3)), atol=1e-8)

    def test_unit_offdiagonal_value(self):
        t = build_T(1.0, [(X0, np.array([0.0, 1.0]))]).dense()
        assert t[0, 1] == pytest.approx(math.exp(-1.0), rel=1e-14)

    def test_unit_diagonal_and_symmetry(self):
        runs = replica_runs()
        t = build_T(3.7e-4, runs).dense()
        assert np.allclose(np.diag(t), 1.0)
        assert np.allclose(t, t.T)

    def test_cross_run_entries_zero(self):
        runs = [(X0, np.array([0.0, 10.0])), (X0, np.array([5.0]))]
        t = build_T(0.01, runs).dense()
        assert t.shape == (3, 3)
        assert t[2, 0] == 0.0 and t[0, 2] == 0.0 and t[1, 2] == 0.0

    def test_blocks_match_full(self):
        runs = [(X0, np.array([0.0, 10.0])), (X0, np.array([5.0, 6.0]))]
        blocks = build_t_blocks(0.01, runs)
        t = build_T(0.01, runs).dense()
        assert np.allclose(t[:2, :2], blocks[0])
        assert np.allclose(t[2:, 2:], blocks[1])

    def test_positive_semidefinite(self):
        t = build_T(1e-3, replica_runs()).dense()
        assert np.linalg.eigvalsh(t).min() > -1e-8

    def test_rejects_nonpositive_rho(self):
        with pytest.raises(ValueError):
            build_T(0.0, replica_runs())


class TestBuildS:
    def test_identical_points_entry_one(self):
        design = [(X0, 100.0), (X0, 100.0)]
        s = build_S([0.7, 0.3], design).dense()
        assert s[0, 1] == pytest.approx(1.0, abs=1e-14)

    def test_psi_to_zero_all_ones(self):
        design = [(X0, 1.0), (FactorPoint(40.0, 91.4, 26.42, 25.0, 32.0), 2000.0)]
        s = build_S([1e-14, 1e-14], design).dense()
        assert np.allclose(s, 1.0, atol=1e-6)

    def test_time_only_difference(self):
        s = build_S([0.9, 1.0], [(X0, 10.0), (X0, 11.0)]).dense()
        assert s[0, 1] == pytest.approx(math.exp(-1.0), rel=1e-14)

    def test_factor_scaling_uses_design_ranges(self):
        # A0 22.5 vs 40.0 spans its whole range, so the scaled gap is 1
        a = FactorPoint(22.5, 91.5, 26.45, 30.0, 31.5)
        b = FactorPoint(40.0, 91.5, 26.45, 30.0, 31.5)
        s = build_S([1.0, 1.0], [(a, 5.0), (b, 5.0)]).dense()
        assert s[0, 1] == pytest.approx(math.exp(-1.0), rel=1e-12)

    def test_point_outside_bounds_still_scaled(self):
        a = FactorPoint(22.5, 91.5, 26.45, 30.0, 31.5)
        b = FactorPoint(45.0, 91.5, 26.45, 30.0, 31.5)  # above the A0 range
        s = build_S([1.0, 1.0], [(a, 5.0), (b, 5.0)]).dense()
        gap = (45.0 - 22.5) / (40.0 - 22.5)
        assert s[0, 1] == pytest.approx(math.exp(-(gap**2)), rel=1e-12)

    def test_unit_diagonal_symmetric_psd(self):
        data = ExperimentData(
            runs=replica_runs(),
            y=np.zeros((109, 3)),
            censor_mask=np.zeros((109, 3), dtype=bool),
            chi=0.0,
        )
        s = build_S([0.5, 1e-5], data.unique_design()).dense()
        assert np.allclose(np.diag(s), 1.0)
        assert np.allclose(s, s.T)
        assert np.linalg.eigvalsh(s).min() > -1e-8

    def test_rejects_bad_psi(self):
        with pytest.raises(ValueError):
            build_S([1.0], [(X0, 1.0)])
        with pytest.raises(ValueError):
            build_S([1.0, -0.1], [(X0, 1.0)])


class TestExperimentData:
    def test_replica_shapes(self):
        data = ExperimentData(
            runs=replica_runs(),
            y=np.zeros((109, 3)),
            censor_mask=np.zeros((109, 3), dtype=bool),
            chi=0.0,
        )
        assert data.n == 109
        assert data.m == 93
        assert len(data.runs) == 6
        assert len(data.treatments) == 5
        sizes = [t.size for _, t in data.runs]
        assert sizes == [17, 18, 18, 20, 18, 18]
        assert all(17 <= s <= 20 for s in sizes)

    def test_replica_time_ranges_and_shared_grid(self):
        runs = replica_runs()
        all_times = np.concatenate([t for _, t in runs])
        assert all_times.min() == 0.5 and all_times.max() == 2902.0
        t5, t6 = runs[4][1], runs[5][1]
        assert np.array_equal(t5[:16], t6[:16])
        assert t5[16:].tolist() == [1620.0, 1825.0]
        assert t6[16:].tolist() == [1624.0, 1829.0]
        assert runs[4][0] == runs[5][0]

    def test_incidence_matrix(self):
        data = ExperimentData(
            runs=replica_runs(),
            y=np.zeros((109, 3)),
            censor_mask=np.zeros((109, 3), dtype=bool),
            chi=0.0,
        )
        g = data.incidence_matrix()
        assert g.shape == (109, 93)
        assert np.all(g.sum(axis=1) == 1.0)
        assert np.all(g.sum(axis=0) >= 1.0)
        # replicate-run rows reuse unique rows: column sums exceed n/m on shared times
        assert g.sum() == 109

    def test_censored_entries_pinned_to_log_chi(self):
        mask = np.zeros((2, 3), dtype=bool)
        mask[0, 2] = True
        data = ExperimentData(
            runs=[(X0, np.array([1.0, 2.0]))],
            y=np.array([[0.1, 0.2, 9.9], [0.4, 0.5, 0.6]]),
            censor_mask=mask,
            chi=0.01,
        )
        assert data.y[0, 2] == math.log(0.01)
        assert data.y[1, 2] == 0.6

    def test_assemble_y_fills_column_major(self):
        mask = np.zeros((3, 3), dtype=bool)
        mask[2, 1] = True
        mask[0, 2] = True
        data = ExperimentData(
            runs=[(X0, np.array([1.0, 2.0, 3.0]))],
            y=np.zeros((3, 3)),
            censor_mask=mask,
            chi=0.01,
        )
        assert data.censored_cells() == [(2, 1), (0, 2)]
        y = data.assemble_y([-7.0, -8.0])
        assert y[2, 1] == -7.0 and y[0, 2] == -8.0
        assert data.y[2, 1] == math.log(0.01)  # container untouched

    def test_assemble_y_length_check(self):
        data = tiny_data(censor=True)
        with pytest.raises(ValueError):
            data.assemble_y([-7.0, -8.0])

    def test_csv_round_trip(self, tmp_path):
        rng = substream(11, 0)
        data = simulate_experiment(
            REPLICA_THETA_TRUE, REPLICA_DISCREPANCY, REPLICA_NOISE, replica_runs(), 0.01, rng
        )
        path = tmp_path / "obs.csv"
        data.to_csv(path, header_lines=["synthetic", "seed 11"])
        back = ExperimentData.from_csv(path)
        assert back.n == data.n and back.m == data.m
        assert np.array_equal(back.censor_mask, data.censor_mask)
        assert np.allclose(back.y, data.y, rtol=0, atol=1e-12)
        for (xa, ta), (xb, tb) in zip(data.runs, back.runs):
            assert np.array_equal(ta, tb)
            assert np.allclose(xa.as_array(), xb.as_array())

    def test_csv_censored_cells_carry_threshold(self, tmp_path):
        rng = substream(11, 0)
        data = simulate_experiment(
            REPLICA_THETA_TRUE, REPLICA_DISCREPANCY, REPLICA_NOISE, replica_runs(), 0.01, rng
        )
        path = tmp_path / "obs.csv"
        data.to_csv(path)
        rows = [l for l in path.read_text().splitlines() if not l.startswith("#")]
        header, body = rows[0], rows[1:]
        assert header == "run,time_s,E_mols,F_mols,H_mols,cens_E,cens_F,cens_H"
        n_flagged = 0
        for line in body:
            parts = line.split(",")
            for amount, flag in zip(parts[2:5], parts[5:8]):
                if flag == "1":
                    n_flagged += 1
                    assert float(amount) == 0.01
                else:
                    assert float(amount) > 0.0
        assert n_flagged == data.n_censored

    def test_from_csv_rejects_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("run,time_s,E,F,H\n1,1.0,1,1,1\n")
        with pytest.raises(ValueError):
            ExperimentData.from_csv(path)

    def test_from_csv_rejects_nonpositive_amounts(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(
            "run,time_s,E_mols,F_mols,H_mols,cens_E,cens_F,cens_H\n"
            "1,1.0,25.0,0.0,0.02,0,0,0\n"
        )
        with pytest.raises(ValueError):
            ExperimentData.from_csv(path)


class TestPriors:
    def test_default_values(self):
        pr = Priors.default()
        assert pr.theta_mean.tolist() == [-13.0, -13.0, -13.0, 10.0, 10.0]
        assert pr.theta_var.tolist() == [2.0, 2.0, 2.0, 3.0, 3.0]
        assert pr.iw_dof == 4.0
        assert pr.corr_rate == 1.0
        assert np.array_equal(pr.scale_matrix(3), np.eye(3))

    def test_theta_density_matches_scipy(self):
        pr = Priors.default()
        theta = np.array([-12.0, -13.5, -11.0, 9.0, 10.7])
        want = sps.norm.logpdf(theta, pr.theta_mean, np.sqrt(pr.theta_var)).sum()
        assert pr.log_theta_density(theta) == pytest.approx(want, rel=1e-12)

    def test_log_density_rejects_negative_rates(self):
        data = tiny_data()
        state = make_state(data)
        state.rho = -0.5
        assert Priors.default().log_density(state) == -math.inf

    def test_validation(self):
        with pytest.raises(ValueError):
            Priors(theta_mean=np.zeros(5), theta_var=np.array([1.0, 1.0, -1.0, 1.0, 1.0]))


class TestTemperedLogPosterior:
    def test_scalar_density_oracle(self):
        # single run, single time: every matrix level collapses to scalars
        data = tiny_data()
        pr = Priors.default()
        state = ParameterState(
            theta=np.array([-12.0, -13.0, -14.0, 9.5, 10.5]),
            d_star=np.array([[0.3, -0.2, 0.9]]),
            omega=np.eye(3),
            sigma=np.eye(3),
            rho=0.8,
            psi=np.array([0.5, 0.2]),
            y_cens=np.zeros(0),
        )
        mu_val = np.array([[0.1, -0.4, 1.2]])
        got = tempered_log_posterior(state, data, pr, 1.0, None, mu_value=mu_val)
        want = 0.0
        for k in range(3):
            want += sps.norm.logpdf(data.y[0, k], state.d_star[0, k], 1.0)
            want += sps.norm.logpdf(state.d_star[0, k], mu_val[0, k], 1.0)
        want += sps.norm.logpdf(state.theta, pr.theta_mean, np.sqrt(pr.theta_var)).sum()
        want += 2.0 * sps.invwishart.logpdf(np.eye(3), 4, np.eye(3))
        want += sum(sps.expon.logpdf(v) for v in (0.8, 0.5, 0.2))
        assert got == pytest.approx(want, rel=1e-10)

    def test_infinite_temperature_flattens(self):
        data = tiny_data()
        state = make_state(data)
        val = tempered_log_posterior(state, data, Priors.default(), math.inf, None,
                                     mu_value=np.zeros((1, 3)))
        assert val == 0.0

    def test_doubling_temperature_halves(self):
        data = tiny_data(times=(10.0, 50.0, 400.0), censor=True)
        state = make_state(data)
        mu_val = np.zeros((data.m, 3))
        v1 = tempered_log_posterior(state, data, Priors.default(), 1.0, None, mu_value=mu_val)
        v2 = tempered_log_posterior(state, data, Priors.default(), 2.0, None, mu_value=mu_val)
        assert v2 == pytest.approx(v1 / 2.0, rel=1e-12)

    def test_temperature_below_one_rejected(self):
        data = tiny_data()
        with pytest.raises(ValueError):
            tempered_log_posterior(make_state(data), data, Priors.default(), 0.5, None,
                                   mu_value=np.zeros((1, 3)))

    def test_mu_provider_called_when_no_value(self):
        data = tiny_data()
        state = make_state(data)
        calls = []

        def provider(theta):
            calls.append(theta.copy())
            return np.zeros((data.m, 3))

        tempered_log_posterior(state, data, Priors.default(), 1.0, provider)
        assert len(calls) == 1

    def test_latent_censored_values_enter_density(self):
        data = tiny_data(times=(10.0, 50.0), censor=True)
        state = make_state(data)
        mu_val = np.zeros((data.m, 3))
        v1 = tempered_log_posterior(state, data, Priors.default(), 1.0, None, mu_value=mu_val)
        state.y_cens = state.y_cens - 1.0
        v2 = tempered_log_posterior(state, data, Priors.default(), 1.0, None, mu_value=mu_val)
        assert v1 != v2

    def test_run_reordering_invariance(self):
        rng = substream(23, 0)
        data = simulate_experiment(
            REPLICA_THETA_TRUE, REPLICA_DISCREPANCY, REPLICA_NOISE, replica_runs(), 0.01, rng
        )
        state = make_state(data, substream(23, 1))
        mu_val = substream(23, 2).normal(size=(data.m, 3))
        v1 = tempered_log_posterior(state, data, Priors.default(), 1.0, None, mu_value=mu_val)

        order = [3, 5, 0, 4, 2, 1]
        runs2 = [data.runs[i] for i in order]
        sl = data.run_slices()
        y2 = np.vstack([np.exp(data.y[sl[i]]) for i in order])
        mask2 = np.vstack([data.censor_mask[sl[i]] for i in order])
        data2 = ExperimentData(runs=runs2, y=np.log(y2), censor_mask=mask2, chi=0.01)
        assert data2.m == data.m

        # map unique rows of the original layout into the permuted layout
        idx = {}
        for j, (x, t) in enumerate(data.unique_design()):
            idx[(tuple(x.as_array()), t)] = j
        perm = np.array([idx[(tuple(x.as_array()), t)] for x, t in data2.unique_design()])
        state2 = state.copy()
        state2.d_star = state.d_star[perm]
        # censored latents follow their cells into the new column-major order
        cells = data.censored_cells()
        val_by_cell = {}
        row_of = np.concatenate([np.arange(sl[i].start, sl[i].stop) for i in order])
        for v, (i, k) in zip(state.y_cens, cells):
            val_by_cell[(i, k)] = v
        y_cens2 = [val_by_cell[(int(row_of[i2]), k2)] for i2, k2 in data2.censored_cells()]
        state2.y_cens = np.array(y_cens2)

        v2 = tempered_log_posterior(state2, data2, Priors.default(), 1.0, None,
                                    mu_value=mu_val[perm])
        assert v2 == pytest.approx(v1, rel=1e-10)


class TestSimulate:
    def test_noiseless_limit_reproduces_ode_outputs(self):
        rng = substream(3, 0)
        tiny = {"sigma": 1e-30 * np.eye(3), "psi": np.array([0.5, 0.2])}
        quiet = {"omega": 1e-30 * np.eye(3), "rho": 1e-3}
        runs = replica_runs()[:2]
        data = simulate_experiment(REPLICA_THETA_TRUE, tiny, quiet, runs, 0.0, rng)
        m = batch_log_amounts(REPLICA_THETA_TRUE, data.design_entries())
        assert np.allclose(data.y, m[data.obs_to_unique], atol=1e-10)

    def test_chi_zero_disables_censoring(self):
        rng = substream(3, 1)
        data = simulate_experiment(
            REPLICA_THETA_TRUE, REPLICA_DISCREPANCY, REPLICA_NOISE, replica_runs(), 0.0, rng
        )
        assert data.n_censored == 0

    def test_replica_censor_pattern(self):
        rng = substream(1729, "sim")
        data = simulate_experiment(
            REPLICA_THETA_TRUE, REPLICA_DISCREPANCY, REPLICA_NOISE, replica_runs(), 0.01, rng
        )
        assert tuple(data.censor_mask.sum(axis=0)) == (0, 5, 45)
        assert data.n == 109 and data.m == 93

    def test_noise_covariance_structure(self):
        # one treatment, three times: empirical covariance of vec(Y) over
        # replications should match Omega (x) T
        times = np.array([10.0, 40.0, 90.0])
        runs = [(X0, times)]
        omega = np.array([[0.04, 0.01, 0.0], [0.01, 0.05, -0.012], [0.0, -0.012, 0.06]])
        rho = 3e-4
        tiny = {"sigma": 1e-30 * np.eye(3), "psi": np.array([0.5, 0.2])}
        draws = []
        rng = substream(37, 0)
        for _ in range(1500):
            data = simulate_experiment(
                REPLICA_THETA_TRUE, tiny, {"omega": omega, "rho": rho}, runs, 0.0, rng
            )
            draws.append(data.y.flatten(order="F"))
        draws = np.array(draws)
        emp = np.cov(draws.T)
        t_block = build_T(rho, runs).dense()
        want = np.kron(omega, t_block)
        rel = np.linalg.norm(emp - want) / np.linalg.norm(want)
        assert rel < 0.12


class TestKineticsMu:
    def test_matches_batch_and_counts(self):
        data = ExperimentData(
            runs=replica_runs()[:2],
            y=np.zeros((35, 3)),
            censor_mask=np.zeros((35, 3), dtype=bool),
            chi=0.0,
        )
        mu = KineticsMu(data)
        theta = REPLICA_THETA_TRUE
        out = mu(theta)
        assert out.shape == (data.m, 3)
        assert np.allclose(out, batch_log_amounts(theta, data.design_entries()))
        mu(theta)
        assert mu.eval_count == 2


class TestParameterState:
    def test_copy_is_deep(self):
        data = tiny_data(censor=True)
        state = make_state(data)
        dup = state.copy()
        dup.theta[0] = 99.0
        dup.d_star[0, 0] = 99.0
        dup.omega[0, 0] = 99.0
        dup.y_cens[0] = 99.0
        assert state.theta[0] == -13.0
        assert state.omega[0, 0] == 0.3
        assert state.y_cens[0] == math.log(0.01) - 0.5
