import json
import math
import shutil
import tempfile
import warnings
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np
from django.test import SimpleTestCase, override_settings

from ridgeapp import reports
from ridgeapp.bounds import BoundParams, clamp_probability, radius, success_probability
from ridgeapp.choices import DistKind, Experiment, LinkKind, LossKind, NoiseKind, Regime
from ridgeapp.exceptions import ConfigError, DomainError, InsufficientTrialsError
from ridgeapp.lab import (
    GENERALIZATION_COLUMNS,
    RECORD_COLUMNS,
    REGULARITY_GRID,
    CalibrationReport,
    ExperimentConfig,
    calibrate,
    campaign_bound_params,
    cell_delta,
    rate_slope,
    run_coupon,
    run_experiment,
    run_generalization,
    run_rmt,
    run_sweep,
    summarize_calibration,
    summarize_rmt,
    summarize_sweep,
)
from ridgeapp.links import check_regularity, make_loss, make_ridge_function


class ScratchDirMixin:
    def setUp(self):
        """Set up a scratch output directory."""
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        """Clean up the scratch output directory."""
        shutil.rmtree(self.tmp, ignore_errors=True)


class ExperimentConfigTest(SimpleTestCase):
    def test_defaults(self):
        """Test the default campaign."""
        cfg = ExperimentConfig()
        self.assertEqual(cfg.experiment, Experiment.SWEEP)
        self.assertEqual(cfg.p_grid, [20, 180, 220, 800, 1600])
        self.assertEqual(cfg.bp, BoundParams())

    def test_invalid_values(self):
        """Test that empty, unsorted and degenerate grids are refused."""
        with self.assertRaises(ConfigError):
            ExperimentConfig(trials=0)
        with self.assertRaises(ConfigError):
            ExperimentConfig(p_grid=[])
        with self.assertRaises(ConfigError):
            ExperimentConfig(p_grid=[50, 10])
        with self.assertRaises(ConfigError):
            ExperimentConfig(threads=0)

    @override_settings(LAB_OUTPUT_ROOT='/tmp/lab-runs')
    def test_default_output_dir(self):
        """Test that the output directory is named after the experiment and seed."""
        cfg = ExperimentConfig(experiment=Experiment.RMT, master_seed=7)
        self.assertEqual(cfg.out_dir, Path('/tmp/lab-runs') / 'rmt-7')

    def test_campaign_constants(self):
        """Test that the link, loss and noise fix their bound constants."""
        cfg = ExperimentConfig(ridge_kind=LinkKind.TANH_TILT, ridge_param=0.5, noise_scale=0.3)
        bp = campaign_bound_params(cfg)
        self.assertEqual(bp.c_fprime, 1.5)
        self.assertEqual(bp.k_eps, 0.3)
        noiseless = campaign_bound_params(ExperimentConfig(noise_kind=NoiseKind.ZERO))
        self.assertEqual(noiseless.k_eps, 1.0)


class SweepTest(SimpleTestCase):
    def test_noiseless_least_squares(self):
        """Test that a noiseless 8 x 2 design recovers theta_star."""
        cfg = ExperimentConfig(
            n=8, p_grid=[2], trials=3, dist_kind=DistKind.SPHERE_UNIFORM,
            noise_kind=NoiseKind.ZERO, noise_scale=0.0, warm_start=False, step=1.0,
            risk_samples=0,
        )
        records = run_sweep(cfg)
        self.assertEqual([(r.p, r.trial) for r in records], [(2, 0), (2, 1), (2, 2)])
        for record in records:
            self.assertEqual(record.regime, 'under')
            self.assertLessEqual(record.est_error, 1e-8)
            self.assertTrue(record.converged)
            self.assertLessEqual(record.iterations, 2)
            # 2 = C_KX**2 p is not below (1 - alpha)**2 n = 2
            self.assertFalse(record.regime_ok)
            self.assertTrue(math.isnan(record.r_theory))
            self.assertFalse(record.inside_ball)

    def test_double_descent(self):
        """Test the error peak at the interpolation threshold p = n."""
        cfg = ExperimentConfig(n=200, p_grid=[20, 180, 220, 1600], trials=50, risk_samples=0)
        summary = summarize_sweep(run_sweep(cfg), cfg, campaign_bound_params(cfg))
        median = dict(zip(summary['p'], summary['median_est_error']))
        self.assertLess(median[20], 0.3)
        self.assertLess(median[1600], 0.3)
        self.assertGreater(median[180], 4 * median[20])
        self.assertGreater(median[220], 4 * median[1600])
        self.assertEqual(list(summary['regime']), ['under', 'under', 'over', 'over'])
        self.assertTrue((summary['converged_frac'] == 1.0).all())

    def test_underparametrised_rate(self):
        """Test a log-log slope of about 1/2 against p / n."""
        cfg = ExperimentConfig(n=512, p_grid=[4, 8, 16, 32], trials=50, risk_samples=0)
        summary = summarize_sweep(run_sweep(cfg), cfg, campaign_bound_params(cfg))
        self.assertLessEqual(abs(rate_slope(summary, Regime.UNDER) - 0.5), 0.15)

    def test_overparametrised_rate(self):
        """Test a log-log slope of about 1/2 against n / p."""
        cfg = ExperimentConfig(n=16, p_grid=[128, 256, 512, 1024], trials=50, risk_samples=0)
        summary = summarize_sweep(run_sweep(cfg), cfg, campaign_bound_params(cfg))
        self.assertLessEqual(abs(rate_slope(summary, Regime.OVER) - 0.5), 0.15)

    def test_rate_slope_needs_two_cells(self):
        """Test that one cell of a regime is not enough for a slope."""
        cfg = ExperimentConfig(n=20, p_grid=[5, 40], trials=2, risk_samples=0)
        summary = summarize_sweep(run_sweep(cfg), cfg, campaign_bound_params(cfg))
        with self.assertRaises(DomainError):
            rate_slope(summary, Regime.UNDER)

    def test_overparametrised_interpolation(self):
        """Test that overparametrised fits interpolate the data."""
        for ridge_kind, ridge_param in ((LinkKind.LINEAR, 0.0), (LinkKind.TANH_TILT, 0.5)):
            cfg = ExperimentConfig(
                n=20, p_grid=[400], trials=10, ridge_kind=ridge_kind, ridge_param=ridge_param,
                risk_samples=0,
            )
            for record in run_sweep(cfg):
                self.assertTrue(record.converged)
                self.assertLessEqual(record.interp_residual, 1e-8)

    def test_risk_gap(self):
        """Test that the fitted parameter has a finite excess risk."""
        cfg = ExperimentConfig(n=40, p_grid=[10], trials=3, risk_samples=500)
        for record in run_sweep(cfg):
            self.assertTrue(math.isfinite(record.risk_gap))
            self.assertTrue(math.isfinite(record.pred_error))

    def test_summary_without_risk_samples(self):
        """Test that a sweep without risk samples summarises without warnings."""
        cfg = ExperimentConfig(n=20, p_grid=[5, 40], trials=3, risk_samples=0)
        records = run_sweep(cfg)
        with warnings.catch_warnings():
            warnings.simplefilter('error', RuntimeWarning)
            summary = summarize_sweep(records, cfg, campaign_bound_params(cfg))
        self.assertTrue(summary['median_risk_gap'].isna().all())
        self.assertTrue(np.isfinite(summary['median_est_error']).all())

    def test_quadratic_delta(self):
        """Test that a linear link with quadratic loss keeps delta = 1."""
        cfg = ExperimentConfig(n=20, p_grid=[5, 40], trials=3, risk_samples=0)
        bp = campaign_bound_params(cfg)
        for record in run_sweep(cfg):
            self.assertEqual(record.delta, 1.0)
            if record.regime_ok:
                self.assertEqual(record.r_theory, radius(Regime(record.regime), bp, 20, record.p))

    def test_delta_from_cell_data(self):
        """Test that the radius uses the Hessian weight measured on the cell's residuals."""
        cfg = ExperimentConfig(
            n=40, p_grid=[4, 400], trials=3, loss_kind=LossKind.PSEUDO_HUBER, loss_param=0.5,
            risk_samples=0,
        )
        bp = campaign_bound_params(cfg)
        records = run_sweep(cfg)
        self.assertTrue(any(record.regime_ok for record in records))
        for record in records:
            # loss'' < 1 at any nonzero residual
            self.assertTrue(0.0 < record.delta < 1.0)
            if record.regime_ok:
                regime = Regime(record.regime)
                expected = radius(regime, replace(bp, delta=record.delta), 40, record.p)
                self.assertAlmostEqual(record.r_theory, expected, delta=1e-12 * expected)
                self.assertGreater(record.r_theory, radius(regime, bp, 40, record.p))
        summary = summarize_sweep(records, cfg, bp)
        self.assertTrue((summary['min_delta'] < 1.0).all())

    def test_tilted_link_delta(self):
        """Test the Hessian weight of a tilted link over z in [-3, 3] and residuals in [-2, 2]."""
        ridge = make_ridge_function(LinkKind.TANH_TILT, 0.5)
        loss = make_loss(LossKind.QUADRATIC)
        x = np.array([[3.0], [-3.0]])
        theta_star = np.array([1.0])
        y = ridge.value(x @ theta_star) + np.array([2.0, -2.0])
        fit = SimpleNamespace(dataset=SimpleNamespace(x=x, y=y, theta_star=theta_star), point=None)

        grid = check_regularity(ridge, loss, (-3.0, 3.0), (-2.0, 2.0), REGULARITY_GRID)
        delta = cell_delta(fit, ridge, loss, BoundParams())
        self.assertAlmostEqual(delta, grid.delta_hat, delta=1e-12)
        self.assertLess(delta, 0.9)
        self.assertEqual(cell_delta(fit, ridge, loss, BoundParams(delta=0.5)), 0.5)


class RmtTest(SimpleTestCase):
    def test_tall_design(self):
        """Test s_min above the bound for 400 x 4 designs."""
        cfg = ExperimentConfig(experiment=Experiment.RMT, n=400, p_grid=[4], trials=200, alpha_grid=[0.1])
        frame = run_rmt(cfg)
        self.assertEqual(list(frame.columns), ['n', 'p', 'trial', 's_min', 's_max'])
        self.assertEqual(len(frame), 200)
        summary = summarize_rmt(frame, cfg, campaign_bound_params(cfg))
        row = summary.iloc[0]
        self.assertEqual(row['orientation'], 'rows')
        self.assertAlmostEqual(row['smin_bound'], 16.0, delta=1e-12)
        self.assertGreaterEqual(row['coverage'], 0.99)
        self.assertTrue((frame['s_min'] <= frame['s_max']).all())
        self.assertGreaterEqual(frame['s_min'].min(), math.sqrt(400) - 3 * math.sqrt(4))

    def test_wide_design(self):
        """Test s_min above the bound for 4 x 400 designs."""
        cfg = ExperimentConfig(experiment=Experiment.RMT, n=4, p_grid=[400], trials=200, alpha_grid=[0.1])
        frame = run_rmt(cfg)
        summary = summarize_rmt(frame, cfg, campaign_bound_params(cfg))
        row = summary.iloc[0]
        self.assertEqual(row['orientation'], 'columns')
        self.assertGreaterEqual(row['coverage'], 0.99)
        self.assertGreaterEqual(frame['s_min'].min(), math.sqrt(400) - 3 * math.sqrt(4))

    def test_scalar_design(self):
        """Test that a 1 x 1 rademacher design has singular value 1."""
        cfg = ExperimentConfig(experiment=Experiment.RMT, n=1, p_grid=[1], trials=5)
        frame = run_rmt(cfg)
        np.testing.assert_array_equal(frame['s_min'], np.ones(5))


class CouponCampaignTest(SimpleTestCase):
    def setUp(self):
        """Set up the default coupon vectors with 100000 runs."""
        self.cfg = ExperimentConfig(experiment=Experiment.COUPON, coupon_runs=100_000, master_seed=3)

    def test_moments_match(self):
        """Test simulated moments within 1% and the Chebyshev exceedance."""
        frame = run_coupon(self.cfg)
        self.assertEqual(len(frame), 4)
        self.assertTrue((frame['mean_rel_err'] <= 0.01).all())
        self.assertTrue((frame['second_rel_err'] <= 0.01).all())
        self.assertTrue((frame['exceed_freq'] <= 0.26).all())
        self.assertTrue((frame['chebyshev_limit'] == 0.25).all())

    def test_single_coupon(self):
        """Test that one coupon is always collected in one draw."""
        frame = run_coupon(self.cfg)
        row = frame.iloc[0]
        self.assertEqual(row['k'], 1)
        self.assertEqual(row['mc_mean'], 1.0)
        self.assertEqual(row['mc_second_moment'], 1.0)
        self.assertEqual(row['exact_mean'], 1.0)


class GeneralizationTest(SimpleTestCase):
    def test_seen_rows_are_predicted(self):
        """Test zero prediction error on rows already in a noiseless atomic design."""
        cfg = ExperimentConfig(
            experiment=Experiment.GENERALIZATION, n=40, p_grid=[60], trials=10,
            dist_kind=DistKind.ATOMIC, n_atoms=4, noise_kind=NoiseKind.ZERO, noise_scale=0.0,
        )
        frame = run_generalization(cfg)
        self.assertEqual(list(frame.columns), GENERALIZATION_COLUMNS)
        seen = frame[frame['seen']]
        self.assertGreater(len(seen), 0)
        self.assertTrue((seen['pred_error'] <= 1e-6).all())
        self.assertTrue((frame['n_cover'] <= 4).all())

    def test_null_parameter(self):
        """Test zero prediction error when theta_star = 0 without noise."""
        cfg = ExperimentConfig(
            experiment=Experiment.GENERALIZATION, n=10, p_grid=[30], trials=5,
            theta_star_norm=0.0, noise_kind=NoiseKind.ZERO, noise_scale=0.0,
        )
        frame = run_generalization(cfg)
        self.assertTrue((frame['pred_error'] == 0.0).all())

    def test_bound_and_feasibility(self):
        """Test a finite bound and an infeasible sample-size threshold."""
        cfg = ExperimentConfig(experiment=Experiment.GENERALIZATION, n=16, p_grid=[1024], trials=5)
        frame = run_generalization(cfg)
        self.assertTrue(frame['regime_ok'].all())
        self.assertTrue(np.isfinite(frame['bound']).all())
        # every rademacher row is far from the others, so each needs its own ball
        self.assertTrue((frame['n_cover'] == 16).all())
        self.assertFalse(frame['feasible'].any())

    def test_underparametrised_cells_flagged(self):
        """Test that p <= n cells carry no bound."""
        cfg = ExperimentConfig(experiment=Experiment.GENERALIZATION, n=30, p_grid=[10], trials=2)
        frame = run_generalization(cfg)
        self.assertFalse(frame['regime_ok'].any())
        self.assertTrue(frame['bound'].isna().all())
        self.assertFalse(frame['within'].any())


class CalibrationTest(ScratchDirMixin, SimpleTestCase):
    def test_too_few_trials(self):
        """Test that fewer than 200 trials are refused."""
        cfg = ExperimentConfig(experiment=Experiment.CALIBRATE, trials=199)
        with self.assertRaises(InsufficientTrialsError):
            calibrate(cfg)

    def test_noiseless_prefactor(self):
        """Test a vanishing prefactor when every fit is exact."""
        cfg = ExperimentConfig(
            experiment=Experiment.CALIBRATE, n=50, p_grid=[2, 200], trials=200,
            noise_kind=NoiseKind.ZERO, noise_scale=0.0,
        )
        report, frame = calibrate(cfg)
        self.assertEqual(len(frame), 400)
        self.assertLessEqual(abs(report.prefactor), 1e-12)
        self.assertEqual(report.envelope, 0.0)
        self.assertGreater(report.c_abs, 0.0)

    def test_bootstrap_intervals(self):
        """Test seeded bootstrap intervals and their absence without resamples."""
        base = dict(
            experiment=Experiment.CALIBRATE, n=50, p_grid=[2, 200], trials=200,
            noise_kind=NoiseKind.ZERO, noise_scale=0.0,
        )
        report, _ = calibrate(ExperimentConfig(bootstrap_samples=50, **base))
        again, _ = calibrate(ExperimentConfig(bootstrap_samples=50, **base))
        self.assertEqual(report.c_kx_ci, again.c_kx_ci)
        low, high = report.c_kx_small_ci
        self.assertTrue(0.0 < low <= high)
        low, high = report.c_kx_ci
        self.assertTrue(0.0 < low <= high)

        bare, _ = calibrate(ExperimentConfig(bootstrap_samples=0, **base))
        self.assertEqual(bare.c_kx, report.c_kx)
        self.assertTrue(all(math.isnan(bound) for bound in bare.c_abs_ci))
        summary = summarize_calibration(bare).set_index('constant')
        self.assertTrue(math.isnan(summary.loc['c_kx', 'ci_low']))
        self.assertEqual(summary.loc['prefactor', 'value'], bare.prefactor)

    def test_calibrated_coverage(self):
        """Test that calibrated radii cover fresh trials at their stated probability."""
        base = dict(n=100, p_grid=[4, 8, 400, 800], trials=200, risk_samples=0,
                    bp=BoundParams(alpha=0.2))
        cfg = ExperimentConfig(experiment=Experiment.CALIBRATE, output_path=str(self.tmp), **base)
        outcome = run_experiment(cfg)
        self.assertEqual(outcome.records, 800)

        report = CalibrationReport.from_file(self.tmp / reports.CONSTANTS_FILE)
        self.assertTrue(0.0 < report.c_kx < 4.0)
        self.assertGreater(report.c_kx_small, 0.0)
        self.assertGreaterEqual(report.c_kx, max(report.c_kx_rows, report.c_kx_columns))
        low, high = report.prefactor_ci
        self.assertLessEqual(low, report.prefactor)
        self.assertLessEqual(report.prefactor, high)
        self.assertTrue(0.0 <= report.r_squared <= 1.0)
        self.assertEqual(report.cells, 4)
        self.assertEqual(report.trials, 200)
        for name in ('c_kx_ci', 'c_kx_small_ci', 'c_abs_ci'):
            ci = getattr(report, name)
            self.assertIsInstance(ci, tuple)
            self.assertTrue(np.isfinite(ci).all(), name)
            self.assertLessEqual(ci[0], ci[1], name)
        self.assertGreater(report.c_kx_ci[0], 0.0)
        self.assertGreater(report.c_abs_ci[0], 0.0)

        constants = outcome.summary.set_index('constant')
        self.assertEqual(constants.loc['c_kx', 'ci_low'], report.c_kx_ci[0])
        self.assertEqual(constants.loc['c_abs', 'ci_high'], report.c_abs_ci[1])
        self.assertTrue(math.isnan(constants.loc['r_squared', 'ci_low']))

        sweep = ExperimentConfig(master_seed=99, **base)
        bp = report.bound_params(campaign_bound_params(sweep))
        summary = summarize_sweep(run_sweep(sweep, bp), sweep, bp)
        checked = summary[summary['regime_ok']]
        self.assertGreater(len(checked), 0)
        for _, row in checked.iterrows():
            q = row['success_prob']
            slack = 3 * math.sqrt(q * (1 - q) / row['trials'])
            self.assertGreaterEqual(row['coverage'], q - slack, row['p'])

    def test_missing_constants(self):
        """Test that a constants file without every field is refused."""
        path = self.tmp / 'constants.json'
        path.write_text(json.dumps({'c_kx': 1.0}))
        with self.assertRaises(ConfigError):
            CalibrationReport.from_file(path)


class RunExperimentTest(ScratchDirMixin, SimpleTestCase):
    def sweep_config(self, out, **kwargs):
        return ExperimentConfig(
            n=20, p_grid=[5, 40], trials=4, risk_samples=20, master_seed=11,
            output_path=str(out), **kwargs,
        )

    def test_sweep_outputs(self):
        """Test the files, header and row count of a sweep."""
        outcome = run_experiment(self.sweep_config(self.tmp, export_traces=True))
        self.assertEqual(outcome.records, 8)

        lines = (self.tmp / reports.RECORDS_FILE).read_text().splitlines()
        self.assertEqual(lines[0], ','.join(RECORD_COLUMNS))
        self.assertEqual(len(lines), 9)
        self.assertEqual(len((self.tmp / reports.SUMMARY_FILE).read_text().splitlines()), 3)
        self.assertTrue((self.tmp / 'bounds.csv').is_file())
        self.assertTrue((self.tmp / reports.TRACES_DIR / 'p40_t3.csv').is_file())

        meta = json.loads((self.tmp / reports.META_FILE).read_text())
        self.assertEqual(meta['config']['master_seed'], 11)
        self.assertEqual(set(meta['cell_wall_ms']), {'5', '40'})
        self.assertIn('git_hash', meta)
        self.assertGreaterEqual(meta['wall_seconds'], 0.0)

    def test_records_are_deterministic(self):
        """Test byte-identical records for equal seeds, whatever the thread count."""
        run_experiment(self.sweep_config(self.tmp / 'a'))
        run_experiment(self.sweep_config(self.tmp / 'b'))
        run_experiment(self.sweep_config(self.tmp / 'c', threads=2))
        first = (self.tmp / 'a' / reports.RECORDS_FILE).read_bytes()
        self.assertEqual(first, (self.tmp / 'b' / reports.RECORDS_FILE).read_bytes())
        self.assertEqual(first, (self.tmp / 'c' / reports.RECORDS_FILE).read_bytes())
        self.assertEqual(
            (self.tmp / 'a' / reports.SUMMARY_FILE).read_bytes(),
            (self.tmp / 'c' / reports.SUMMARY_FILE).read_bytes(),
        )

    def test_seed_changes_records(self):
        """Test that another seed gives other records."""
        run_experiment(self.sweep_config(self.tmp / 'a'))
        cfg = self.sweep_config(self.tmp / 'b')
        cfg.master_seed = 12
        run_experiment(cfg)
        self.assertNotEqual(
            (self.tmp / 'a' / reports.RECORDS_FILE).read_bytes(),
            (self.tmp / 'b' / reports.RECORDS_FILE).read_bytes(),
        )

    def test_bounds_table(self):
        """Test the bounds campaign with the regime-condition sides."""
        cfg = ExperimentConfig(
            experiment=Experiment.BOUNDS, n=400, p_grid=[4, 100, 4000],
            noise_kind=NoiseKind.ZERO, bp=BoundParams(alpha=0.5), output_path=str(self.tmp),
        )
        outcome = run_experiment(cfg)
        self.assertEqual(outcome.records, 3)
        summary = outcome.summary
        self.assertEqual(list(summary['regime_ok']), [True, False, True])
        self.assertAlmostEqual(summary['r'].iloc[0], 1.5, delta=1e-12)
        self.assertTrue(math.isnan(summary['r'].iloc[1]))

    def test_coupon_outputs(self):
        """Test the coupon campaign writes one record per vector."""
        cfg = ExperimentConfig(
            experiment=Experiment.COUPON, coupon_runs=2000, output_path=str(self.tmp),
        )
        outcome = run_experiment(cfg)
        self.assertEqual(outcome.records, 4)
        self.assertIn('exceed_freq', outcome.summary.columns)

    def test_summary_probability(self):
        """Test that the sweep summary reports the clamped success probability."""
        cfg = self.sweep_config(self.tmp)
        outcome = run_experiment(cfg)
        bp = outcome.extra['bound_params']
        expected = clamp_probability(success_probability(Regime.OVER, bp, 20, 40))
        self.assertEqual(outcome.summary['success_prob'].iloc[1], expected)
