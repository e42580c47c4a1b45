"""
Seeded Monte Carlo campaigns.

Each campaign walks the (p, trial) grid of an :class:`ExperimentConfig`. Every
cell draws from its own Philox stream, keyed by ``cell_seed(master_seed, p,
trial)``, so cells can run on any number of threads and any subset can be
re-run on its own. Results are merged back in (p, trial) order before anything
is written.
"""

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.stats
from django.conf import settings

from . import reports
from .bounds import (
    BoundParams,
    bound_table,
    clamp_probability,
    coupon_moments,
    coupon_sample_threshold,
    epsilon_cover,
    extreme_singulars,
    generalization_bound,
    generalization_probability,
    radius,
    regime_condition,
    smin_bound,
    success_probability,
)
from .choices import DistKind, Experiment, LinkKind, LossKind, NoiseKind, Orientation, Regime
from .datagen import (
    cell_seed,
    derive_seed,
    draw_rows,
    make_rng,
    noise_proxy,
    sample_atomic_design,
    sample_atoms,
    sample_design,
    sample_theta_star,
    synthesize,
)
from .exceptions import (
    CapExceededError,
    ConfigError,
    DomainError,
    FactorizationError,
    InsufficientTrialsError,
    SingularSystemError,
)
from .links import check_regularity, make_loss, make_ridge_function
from .risk import RiskContext, estimate_theoretical_risk
from .solver import FlowOptions, min_norm_projection, newton_flow, regime_for, svd_factors

logger = logging.getLogger(__name__)

# Sub-streams of a cell seed.
DESIGN_STREAM, THETA_STREAM, NOISE_STREAM, FRESH_STREAM, RISK_STREAM = range(1, 6)

# Stream of the coupon simulations, kept apart from every cell index (p >= 1).
COUPON_STREAM = 0

MIN_CALIBRATION_TRIALS = 200

# Stream of the calibration bootstrap; cell indices start at 1 << 32.
BOOTSTRAP_STREAM = (1 << 32) - 1

# Points per axis of the per-cell Hessian weight lattice.
REGULARITY_GRID = 201

# Two-sided 95% normal quantile for the regression confidence interval.
Z_95 = 1.959963984540054


def _default_coupon_probs():
    return [[1.0], [0.5, 0.5], [1 / 3] * 3, [0.2] * 5]


@dataclass
class ExperimentConfig:
    """
    Everything a campaign needs; loaded from JSON by ``forms.load_config``.

    ``bp`` holds the bound constants. Its link and loss constants and, for
    noisy data, its noise proxy are implied by the configured model and set by
    :func:`campaign_bound_params`; ``forms.build_config`` refuses them in a
    payload. ``bp.delta`` is an upper bound, lowered per cell to the Hessian
    weight measured on that cell's data.
    """
    experiment: str = Experiment.SWEEP
    n: int = 200
    p_grid: list = field(default_factory=lambda: [20, 180, 220, 800, 1600])
    trials: int = 50
    ridge_kind: str = LinkKind.LINEAR
    ridge_param: float = 0.0
    loss_kind: str = LossKind.QUADRATIC
    loss_param: float = 1.0
    dist_kind: str = DistKind.RADEMACHER
    noise_kind: str = NoiseKind.GAUSSIAN
    noise_scale: float = 0.5
    theta_star_norm: float = 1.0
    bp: BoundParams = field(default_factory=BoundParams)
    master_seed: int = 0
    output_path: str = ''
    threads: int = 1
    warm_start: bool = True
    step: float = 0.5
    max_iter: int = 200
    alpha_grid: list = field(default_factory=lambda: [0.1, 0.25, 0.5])
    coupon_probs: list = field(default_factory=_default_coupon_probs)
    coupon_t: float = 2.0
    coupon_runs: int = 100_000
    cover_eps: float = 0.1
    n_atoms: int = 8
    generalization_t: float = 2.0
    risk_samples: int = 2000
    bootstrap_samples: int = 200
    export_traces: bool = False

    def __post_init__(self):
        self.experiment = Experiment(self.experiment)
        if self.trials < 1:
            raise ConfigError(f'trials must be at least 1, got {self.trials}')
        if not self.p_grid:
            raise ConfigError('p_grid must not be empty')
        if list(self.p_grid) != sorted(self.p_grid):
            raise ConfigError(f'p_grid must be sorted, got {self.p_grid}')
        if self.n < 1 or min(self.p_grid) < 1:
            raise ConfigError('n and every p must be at least 1')
        if self.threads < 1:
            raise ConfigError(f'threads must be at least 1, got {self.threads}')

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    @property
    def out_dir(self):
        if self.output_path:
            return Path(self.output_path)
        return Path(settings.LAB_OUTPUT_ROOT) / f'{self.experiment.value}-{self.master_seed}'

    def ridge(self):
        return make_ridge_function(self.ridge_kind, self.ridge_param)

    def loss(self):
        return make_loss(self.loss_kind, self.loss_param)

    def flow_options(self):
        return FlowOptions(step=self.step, max_iter=self.max_iter)


@dataclass
class TrialRecord:
    """
    Outcome of one (p, trial) cell of a sweep.

    ``inside_ball`` is ``est_error <= r_theory``; it is False where the regime
    condition fails and ``r_theory`` is NaN. ``delta`` is the Hessian weight
    bound the radius was computed with.
    """
    p: int
    trial: int
    regime: str
    regime_ok: bool
    est_error: float
    pred_error: float
    pred_error_raw: float
    risk_gap: float
    r_theory: float
    delta: float
    inside_ball: bool
    s_min: float
    s_max: float
    converged: bool
    iterations: int
    interp_residual: float
    wall_ms: float = 0.0
    trace: list = field(default_factory=list, repr=False)


# wall_ms and trace stay out of records.csv so its bytes depend on the seed only.
RECORD_COLUMNS = [f.name for f in fields(TrialRecord) if f.name not in ('wall_ms', 'trace')]


@dataclass
class CalibrationReport:
    """
    Constants fitted from simulated designs and fits.

    Attributes:
        c_kx_rows (float): 99th percentile of ``(sqrt(n) - s_min) / sqrt(p)`` over p < n cells.
        c_kx_columns (float): Same for ``(sqrt(p) - s_min) / sqrt(n)`` over p > n cells.
        c_kx (float): The larger of the two, the C_KX used by the radius.
        c_kx_small (float): Largest exponent constant consistent with the
            observed lower-tail frequencies at ``alpha``.
        prefactor (float): Regression slope of est_error on the radius shape.
        prefactor_ci (tuple): 95% confidence interval of the slope.
        r_squared (float): Coefficient of determination of the regression.
        envelope (float): ``max(est_error / shape)``, the prefactor covering every trial.
        c_abs (float): Absolute constant C implied by the envelope.
        c_kx_ci, c_kx_small_ci, c_abs_ci (tuple): 95% percentile bootstrap
            intervals, trials resampled within each cell; NaN without
            bootstrap samples.
    """
    c_kx_rows: float
    c_kx_columns: float
    c_kx: float
    c_kx_small: float
    alpha: float
    prefactor: float
    prefactor_ci: tuple
    intercept: float
    r_squared: float
    envelope: float
    c_abs: float
    cells: int
    trials: int
    c_kx_ci: tuple = (math.nan, math.nan)
    c_kx_small_ci: tuple = (math.nan, math.nan)
    c_abs_ci: tuple = (math.nan, math.nan)

    def bound_params(self, base):
        """``base`` with the calibrated C, C_KX and c_KX."""
        return replace(base, c_abs=self.c_abs, c_kx=self.c_kx, c_kx_small=self.c_kx_small)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_file(cls, path):
        payload = json.loads(Path(path).read_text())
        names = {f.name for f in fields(cls)}
        missing = names - payload.keys()
        if missing:
            raise ConfigError(f'calibration file {path} lacks {sorted(missing)}')
        payload = {key: value for key, value in payload.items() if key in names}
        for name in ('prefactor_ci', 'c_kx_ci', 'c_kx_small_ci', 'c_abs_ci'):
            payload[name] = tuple(payload[name])
        return cls(**payload)


@dataclass
class RunOutcome:
    experiment: str
    out_dir: Path
    records: int
    summary: pd.DataFrame
    wall_seconds: float
    extra: dict = field(default_factory=dict)


@dataclass
class _Fit:
    p: int
    trial: int
    regime: Regime
    dataset: object
    svd: object
    point: object
    theta_sharp: np.ndarray
    est_error: float
    x_new: np.ndarray
    atoms: np.ndarray


def campaign_bound_params(cfg):
    """
    Bound constants for the configured model.

    ``c_fprime`` and ``c_lsecond`` come from the link and loss; ``k_eps`` is the
    noise proxy unless the data are noiseless, where the configured value stays.
    """
    k_eps = noise_proxy(cfg.noise_kind, cfg.noise_scale) or cfg.bp.k_eps
    return replace(
        cfg.bp,
        c_fprime=cfg.ridge().c_fprime,
        c_lsecond=cfg.loss().c_lsecond,
        k_eps=k_eps,
    )


def cell_delta(fit, ridge, loss, bp):
    """
    ``bp.delta`` capped by the grid minimum of the Hessian weight over the
    cell's link arguments and residuals, at ``theta_star`` and at the fit.
    """
    x, y = fit.dataset.x, fit.dataset.y
    thetas = [fit.dataset.theta_star]
    if fit.point is not None and np.all(np.isfinite(fit.point.theta_hat)):
        thetas.append(fit.point.theta_hat)
    z = np.concatenate([x @ theta for theta in thetas])
    w = np.concatenate([y - ridge.value(x @ theta) for theta in thetas])
    report = check_regularity(
        ridge, loss, (z.min(), z.max()), (w.min(), w.max()), REGULARITY_GRID)
    return min(bp.delta, report.delta_hat)


def _cell_radius(regime, bp, delta, n, p):
    if not delta > 0:
        logger.warning('hessian weight vanishes on the cell data p=%d; no radius', p)
        return math.nan
    return radius(regime, replace(bp, delta=delta), n, p)


def _map_cells(func, tasks, threads):
    """Apply ``func`` to every task, keeping task order whatever the thread count."""
    if threads <= 1:
        return [func(task) for task in tasks]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(func, tasks))


def _grid(cfg):
    return [(p, trial) for p in cfg.p_grid for trial in range(cfg.trials)]


def _atoms_for(cfg, p):
    if DistKind(cfg.dist_kind) != DistKind.ATOMIC:
        return None
    return sample_atoms(cfg.n_atoms, p, derive_seed(cfg.master_seed, p))


def _draw_design(cfg, p, seed, atoms):
    if atoms is not None:
        return sample_atomic_design(cfg.n, atoms, seed)
    return sample_design(cfg.n, p, cfg.dist_kind, seed)


def _fit_cell(cfg, ridge, loss, p, trial, atoms=None):
    """Synthesize one cell's data and run the Newton flow on it."""
    base = cell_seed(cfg.master_seed, p, trial)
    design = _draw_design(cfg, p, derive_seed(base, DESIGN_STREAM), atoms)
    theta_star = sample_theta_star(p, cfg.theta_star_norm, derive_seed(base, THETA_STREAM))
    dataset = synthesize(
        design, theta_star, ridge,
        noise_kind=cfg.noise_kind,
        noise_scale=cfg.noise_scale,
        seed=derive_seed(base, NOISE_STREAM),
    )
    x_new = draw_rows(make_rng(derive_seed(base, FRESH_STREAM)), 1, p, cfg.dist_kind, atoms=atoms)[0]
    regime = regime_for(cfg.n, p)
    ctx = RiskContext(dataset=dataset, loss=loss)
    theta_init = theta_star if cfg.warm_start else np.zeros(p)

    svd = point = None
    theta_sharp = np.full(p, np.nan)
    est_error = math.nan
    try:
        svd = svd_factors(dataset.x)
        point = newton_flow(ctx, theta_init, cfg.flow_options(), regime=regime, svd=svd)
        theta_sharp = point.theta_hat
        if regime == Regime.OVER:
            theta_sharp = min_norm_projection(dataset.x, point.theta_hat)
        est_error = float(np.linalg.norm(point.theta_hat - theta_star))
    except (SingularSystemError, FactorizationError) as exc:
        logger.warning('cell failed p=%d trial=%d error=%s', p, trial, exc)
    return _Fit(
        p=p, trial=trial, regime=regime, dataset=dataset, svd=svd, point=point,
        theta_sharp=theta_sharp, est_error=est_error, x_new=x_new, atoms=atoms,
    )


def _prediction_errors(fit):
    gap = float(abs(fit.x_new @ (fit.theta_sharp - fit.dataset.theta_star)))
    return gap / math.sqrt(fit.p), gap


def _sweep_record(cfg, ridge, loss, bp, p, trial, atoms):
    started = time.perf_counter()
    fit = _fit_cell(cfg, ridge, loss, p, trial, atoms)
    n = cfg.n

    holds, _, _ = regime_condition(fit.regime, bp, n, p)
    delta = cell_delta(fit, ridge, loss, bp)
    r_theory = _cell_radius(fit.regime, bp, delta, n, p) if holds else math.nan
    pred_error, pred_error_raw = _prediction_errors(fit)

    risk_gap = math.nan
    if cfg.risk_samples > 0 and fit.point is not None:
        risk_seed = derive_seed(cell_seed(cfg.master_seed, p, trial), RISK_STREAM)
        common = dict(
            dist_kind=cfg.dist_kind, noise_kind=cfg.noise_kind, noise_scale=cfg.noise_scale,
            m=cfg.risk_samples, seed=risk_seed, atoms=atoms,
        )
        theta_star = fit.dataset.theta_star
        fitted = estimate_theoretical_risk(ridge, loss, fit.theta_sharp, theta_star, **common)
        oracle = estimate_theoretical_risk(ridge, loss, theta_star, theta_star, **common)
        risk_gap = fitted.mean - oracle.mean

    if fit.point is not None:
        s_min, s_max = float(fit.svd.sigma[-1]), float(fit.svd.sigma[0])
        residual = fit.dataset.y - ridge.value(fit.dataset.x @ fit.point.theta_hat)
        interp_residual = float(np.max(np.abs(residual)))
    else:
        s_min, s_max = extreme_singulars(fit.dataset.x)
        interp_residual = math.nan

    return TrialRecord(
        p=p,
        trial=trial,
        regime=fit.regime.value,
        regime_ok=bool(holds),
        est_error=fit.est_error,
        pred_error=pred_error,
        pred_error_raw=pred_error_raw,
        risk_gap=risk_gap,
        r_theory=r_theory,
        delta=delta,
        inside_ball=bool(fit.est_error <= r_theory),
        s_min=s_min,
        s_max=s_max,
        converged=bool(fit.point is not None and fit.point.converged),
        iterations=fit.point.iterations if fit.point is not None else 0,
        interp_residual=interp_residual,
        wall_ms=1000.0 * (time.perf_counter() - started),
        trace=fit.point.trace if fit.point is not None else [],
    )


def run_sweep(cfg, bp=None):
    """
    Double-descent sweep over ``cfg.p_grid``.

    Underparametrised cells report the flow's stationary point; overparametrised
    cells start the flow at ``theta_star`` (or zero without ``warm_start``) and
    project the result onto the row space for prediction.

    Returns:
        list: TrialRecord in (p, trial) order.
    """
    ridge, loss = cfg.ridge(), cfg.loss()
    bp = bp or campaign_bound_params(cfg)
    atoms = {p: _atoms_for(cfg, p) for p in cfg.p_grid}

    def task(cell):
        p, trial = cell
        return _sweep_record(cfg, ridge, loss, bp, p, trial, atoms[p])

    records = _map_cells(task, _grid(cfg), cfg.threads)
    for p in cfg.p_grid:
        cell = [record for record in records if record.p == p]
        logger.info(
            'sweep cell done p=%d regime=%s median_est_error=%.4g coverage=%.3f',
            p, cell[0].regime,
            float(np.nanmedian([record.est_error for record in cell])),
            float(np.mean([record.inside_ball for record in cell])),
        )
    return records


def records_frame(records):
    return pd.DataFrame(
        [{name: getattr(record, name) for name in RECORD_COLUMNS} for record in records],
        columns=RECORD_COLUMNS,
    )


def _median(column):
    return column.median() if column.notna().any() else math.nan


def summarize_sweep(records, cfg, bp):
    """Per-p medians, quantiles, coverage, the median radius and the smallest delta."""
    frame = records_frame(records)
    rows = []
    for p, cell in frame.groupby('p', sort=True):
        regime = regime_for(cfg.n, p)
        rows.append({
            'p': int(p),
            'n': cfg.n,
            'regime': regime.value,
            'regime_ok': bool(cell['regime_ok'].iloc[0]),
            'trials': len(cell),
            'median_est_error': cell['est_error'].median(),
            'q10_est_error': cell['est_error'].quantile(0.1),
            'q90_est_error': cell['est_error'].quantile(0.9),
            'median_pred_error': cell['pred_error'].median(),
            'median_risk_gap': _median(cell['risk_gap']),
            'r_theory': _median(cell['r_theory']),
            'min_delta': cell['delta'].min(),
            'success_prob': clamp_probability(success_probability(regime, bp, cfg.n, p)),
            'coverage': cell['inside_ball'].mean(),
            'converged_frac': cell['converged'].mean(),
            'median_s_min': cell['s_min'].median(),
            'median_s_max': cell['s_max'].median(),
            'max_interp_residual': cell['interp_residual'].max(),
        })
    return pd.DataFrame(rows)


def rate_slope(summary, regime):
    """
    Log-log slope of the median estimation error against the dimension ratio.

    ``under`` regresses on ``log(p / n)``, ``over`` on ``log(n / p)``; both
    rates predict a slope of 1/2.
    """
    regime = Regime(regime)
    rows = summary[summary['regime'] == regime.value]
    if len(rows) < 2:
        raise DomainError(f'rate slope needs at least two {regime.value} cells, got {len(rows)}')
    ratio = rows['p'] / rows['n'] if regime == Regime.UNDER else rows['n'] / rows['p']
    fit = scipy.stats.linregress(np.log(ratio.to_numpy(float)),
                                 np.log(rows['median_est_error'].to_numpy(float)))
    return float(fit.slope)


def _rmt_task(cfg, atoms):
    def task(cell):
        p, trial = cell
        design = _draw_design(cfg, p, cell_seed(cfg.master_seed, p, trial), atoms[p])
        s_min, s_max = extreme_singulars(design.x)
        return {'n': cfg.n, 'p': p, 'trial': trial, 's_min': s_min, 's_max': s_max}
    return task


def run_rmt(cfg):
    """
    Extreme singular values of sampled designs.

    Returns:
        pandas.DataFrame: Columns ``(n, p, trial, s_min, s_max)``.
    """
    atoms = {p: _atoms_for(cfg, p) for p in cfg.p_grid}
    rows = _map_cells(_rmt_task(cfg, atoms), _grid(cfg), cfg.threads)
    return pd.DataFrame(rows, columns=['n', 'p', 'trial', 's_min', 's_max'])


def summarize_rmt(frame, cfg, bp):
    """
    Empirical singular value quantiles against ``smin_bound`` over ``alpha_grid``.

    One row per (p, alpha); ``coverage`` is the share of trials at or above the bound.
    """
    rows = []
    for p, cell in frame.groupby('p', sort=True):
        n = cfg.n
        orientation = Orientation.ROWS if p < n else Orientation.COLUMNS
        small, large = (p, n) if orientation == Orientation.ROWS else (n, p)
        s_min = cell['s_min']
        for alpha in cfg.alpha_grid:
            bound = smin_bound(orientation, alpha, bp.c_kx, n, p)
            rows.append({
                'n': n,
                'p': int(p),
                'orientation': orientation.value,
                'alpha': alpha,
                'smin_bound': bound,
                'coverage': float((s_min >= bound).mean()),
                'prob': clamp_probability(
                    1.0 - 2.0 * math.exp(-bp.c_kx_small * alpha ** 2 * large)),
                's_min_min': s_min.min(),
                's_min_q01': s_min.quantile(0.01),
                's_min_median': s_min.median(),
                's_max_median': cell['s_max'].median(),
                's_max_max': cell['s_max'].max(),
                'sqrt_small': math.sqrt(small),
                'sqrt_large': math.sqrt(large),
            })
    return pd.DataFrame(rows)


def simulate_coupon(probs, runs, rng):
    """
    Draw counts ``N`` until every coupon has been seen, ``runs`` times.

    All unfinished runs advance together, one draw per pass.
    """
    probs = np.asarray(probs, dtype=float)
    k = probs.size
    cdf = np.cumsum(probs)
    counts = np.zeros(runs, dtype=np.int64)
    seen = np.zeros((runs, k), dtype=bool)
    active = np.arange(runs)
    while active.size:
        draws = np.minimum(np.searchsorted(cdf, rng.random(active.size), side='right'), k - 1)
        seen[active, draws] = True
        counts[active] += 1
        active = active[~seen[active].all(axis=1)]
    return counts


def run_coupon(cfg):
    """
    Exact coupon moments against simulation, one row per probability vector.

    ``exceed_freq`` is the share of runs needing more draws than the
    Chebyshev threshold at ``coupon_t``; it should stay below ``1 / t**2``.
    """
    rng = make_rng(derive_seed(cfg.master_seed, COUPON_STREAM))
    rows = []
    for index, probs in enumerate(cfg.coupon_probs):
        exact = coupon_moments(probs)
        probs = np.asarray(probs, dtype=float)
        counts = simulate_coupon(probs, cfg.coupon_runs, rng).astype(float)
        threshold = coupon_sample_threshold(probs.size, float(probs.min()), cfg.coupon_t)
        mc_mean = float(counts.mean())
        mc_second = float(np.mean(counts * counts))
        row = {
            'vector': index,
            'k': probs.size,
            'p_min': float(probs.min()),
            'exact_mean': exact.mean,
            'mc_mean': mc_mean,
            'mean_rel_err': abs(mc_mean - exact.mean) / exact.mean,
            'exact_second_moment': exact.second_moment,
            'exact_second_moment_discrete': exact.second_moment_discrete,
            'mc_second_moment': mc_second,
            'second_rel_err': abs(mc_second - exact.second_moment_discrete)
            / exact.second_moment_discrete,
            'mean_bound': exact.mean_bound,
            'second_moment_bound': exact.second_moment_bound,
            't': cfg.coupon_t,
            'threshold': threshold,
            'exceed_freq': float(np.mean(counts > threshold)),
            'chebyshev_limit': 1.0 / cfg.coupon_t ** 2 if cfg.coupon_t > 0 else 1.0,
        }
        logger.info(
            'coupon vector=%d k=%d exact_mean=%.6g mc_mean=%.6g exceed_freq=%.4f',
            index, row['k'], row['exact_mean'], mc_mean, row['exceed_freq'],
        )
        rows.append(row)
    return pd.DataFrame(rows)


def _generalization_record(cfg, ridge, loss, bp, p, trial, atoms):
    fit = _fit_cell(cfg, ridge, loss, p, trial, atoms)
    n = cfg.n
    holds = p > n and regime_condition(Regime.OVER, bp, n, p)[0]
    bound = math.nan
    delta = cell_delta(fit, ridge, loss, bp)
    if holds and delta > 0:
        bound = generalization_bound(replace(bp, delta=delta), n, p, cfg.cover_eps,
                                     float(np.linalg.norm(fit.dataset.theta_star)))
    pred_error, pred_error_raw = _prediction_errors(fit)

    support = atoms if atoms is not None else fit.dataset.x
    cover = epsilon_cover(support, cfg.cover_eps)
    try:
        threshold = coupon_sample_threshold(cover.n_cover, cover.p_min_hat, cfg.generalization_t)
    except CapExceededError:
        threshold = math.inf
    seen = bool(np.any(np.all(fit.dataset.x == fit.x_new, axis=1)))

    return {
        'p': p,
        'trial': trial,
        'pred_error': pred_error,
        'bound': bound,
        'within': bool(pred_error <= bound),
        'pred_error_raw': pred_error_raw,
        'regime_ok': bool(holds),
        'converged': bool(fit.point is not None and fit.point.converged),
        'n_cover': cover.n_cover,
        'p_min_hat': cover.p_min_hat,
        'threshold': threshold,
        'feasible': bool(n >= threshold),
        'seen': seen,
    }


GENERALIZATION_COLUMNS = [
    'p', 'trial', 'pred_error', 'bound', 'within', 'pred_error_raw', 'regime_ok',
    'converged', 'n_cover', 'p_min_hat', 'threshold', 'feasible', 'seen',
]


def run_generalization(cfg, bp=None):
    """
    Prediction error of the minimum-norm stationary point on a fresh row.

    Cells with ``p <= n`` or a failed regime condition are flagged through
    ``regime_ok`` and carry a NaN bound.
    """
    ridge, loss = cfg.ridge(), cfg.loss()
    bp = bp or campaign_bound_params(cfg)
    atoms = {p: _atoms_for(cfg, p) for p in cfg.p_grid}
    under = [p for p in cfg.p_grid if p <= cfg.n]
    if under:
        logger.warning('generalization cells without overparametrisation p=%s n=%d', under, cfg.n)

    def task(cell):
        p, trial = cell
        return _generalization_record(cfg, ridge, loss, bp, p, trial, atoms[p])

    rows = _map_cells(task, _grid(cfg), cfg.threads)
    return pd.DataFrame(rows, columns=GENERALIZATION_COLUMNS)


def summarize_generalization(frame, cfg, bp):
    rows = []
    for p, cell in frame.groupby('p', sort=True):
        prob = math.nan
        if cell['regime_ok'].iloc[0]:
            prob = clamp_probability(generalization_probability(bp, cfg.n, p, cfg.generalization_t))
        rows.append({
            'p': int(p),
            'n': cfg.n,
            'regime_ok': bool(cell['regime_ok'].iloc[0]),
            'trials': len(cell),
            'within_frac': cell['within'].mean(),
            'prob': prob,
            'median_pred_error': cell['pred_error'].median(),
            'bound': cell['bound'].iloc[0],
            'median_n_cover': cell['n_cover'].median(),
            'feasible_frac': cell['feasible'].mean(),
            'seen_frac': cell['seen'].mean(),
        })
    return pd.DataFrame(rows)


CALIBRATION_COLUMNS = ['p', 'trial', 'orientation', 's_min', 's_max', 'kx_ratio', 'est_error']


def _calibration_row(cfg, ridge, loss, p, trial, atoms):
    fit = _fit_cell(cfg, ridge, loss, p, trial, atoms)
    n = cfg.n
    if fit.svd is not None:
        s_min, s_max = float(fit.svd.sigma[-1]), float(fit.svd.sigma[0])
    else:
        s_min, s_max = extreme_singulars(fit.dataset.x)
    if p < n:
        orientation, ratio = Orientation.ROWS, (math.sqrt(n) - s_min) / math.sqrt(p)
    elif p > n:
        orientation, ratio = Orientation.COLUMNS, (math.sqrt(p) - s_min) / math.sqrt(n)
    else:
        orientation, ratio = Orientation.ROWS, math.nan
    return {
        'p': p,
        'trial': trial,
        'orientation': orientation.value,
        's_min': s_min,
        's_max': s_max,
        'kx_ratio': ratio,
        'est_error': fit.est_error,
    }


def _percentile(values, q):
    values = values[np.isfinite(values)]
    return float(np.percentile(values, q)) if values.size else math.nan


def _tail_constant(frame, n, c_kx, alpha, trials):
    """
    Smallest per-cell ``-log(q / 2) / (alpha**2 * large)`` where ``q`` is the
    observed frequency of ``s_min`` below ``(1 - alpha) sqrt(large) - C_KX sqrt(small)``.

    Frequencies are floored at ``1 / (trials + 1)``.
    """
    constants = []
    for p, cell in frame.groupby('p', sort=True):
        if p == n:
            continue
        small, large = (p, n) if p < n else (n, p)
        threshold = (1.0 - alpha) * math.sqrt(large) - c_kx * math.sqrt(small)
        q = max(float((cell['s_min'] < threshold).mean()), 1.0 / (trials + 1))
        constants.append(-math.log(q / 2.0) / (alpha ** 2 * large))
    return min(constants)


@dataclass
class _Constants:
    c_kx_rows: float
    c_kx_columns: float
    c_kx: float
    c_kx_small: float
    shapes: np.ndarray
    errors: np.ndarray
    cells: int
    envelope: float
    c_abs: float


def _fit_constants(frame, n, base, trials):
    """C_KX, c_KX, the radius shapes and the envelope constant C of one record set."""
    rows_ratio = frame.loc[frame['p'] < n, 'kx_ratio'].to_numpy(float)
    cols_ratio = frame.loc[frame['p'] > n, 'kx_ratio'].to_numpy(float)
    c_kx_rows = _percentile(rows_ratio, 99)
    c_kx_columns = _percentile(cols_ratio, 99)
    if math.isnan(c_kx_rows) and math.isnan(c_kx_columns):
        raise ConfigError('calibration needs at least one p different from n')
    # a negative deficit would make the constant meaningless; keep it positive
    c_kx = max(float(np.nanmax([c_kx_rows, c_kx_columns])), np.finfo(float).eps)

    alpha = base.alpha
    c_kx_small = _tail_constant(frame, n, c_kx, alpha, trials)
    calibrated = replace(base, c_kx=c_kx, c_kx_small=c_kx_small)

    shapes, errors = [], []
    cells = 0
    for p, cell in frame.groupby('p', sort=True):
        regime = regime_for(n, p)
        if not regime_condition(regime, calibrated, n, p)[0]:
            logger.debug('calibration skips cell p=%d: regime condition fails', p)
            continue
        small, large = (p, n) if regime == Regime.UNDER else (n, p)
        shape = math.sqrt(small) / ((1.0 - alpha) * math.sqrt(large) - c_kx * math.sqrt(small))
        finite = cell['est_error'].to_numpy(float)
        finite = finite[np.isfinite(finite)]
        shapes.extend([shape] * finite.size)
        errors.extend(finite.tolist())
        cells += 1
    if cells == 0:
        raise ConfigError('no p in p_grid satisfies the regime condition with the fitted C_KX')

    shapes = np.asarray(shapes)
    errors = np.asarray(errors)
    envelope = float(np.max(errors / shapes))
    # prefactor = 6 sqrt(C) C_l'' C_f' K_eps / delta, solved for C at the envelope
    sqrt_c = envelope * base.delta / (6.0 * base.c_lsecond * base.c_fprime * base.k_eps)
    return _Constants(
        c_kx_rows=c_kx_rows,
        c_kx_columns=c_kx_columns,
        c_kx=c_kx,
        c_kx_small=c_kx_small,
        shapes=shapes,
        errors=errors,
        cells=cells,
        envelope=envelope,
        c_abs=max(sqrt_c ** 2, np.finfo(float).tiny),
    )


def _interval(values):
    if not values:
        return (math.nan, math.nan)
    low, high = np.percentile(values, [2.5, 97.5])
    return (float(low), float(high))


def _bootstrap_intervals(frame, n, base, trials, samples, rng):
    """
    Percentile intervals of C_KX, c_KX and C over ``samples`` record sets,
    each resampling the trials of every cell with replacement.

    Resamples where no cell passes the regime condition are dropped.
    """
    names = ('c_kx', 'c_kx_small', 'c_abs')
    draws = {name: [] for name in names}
    cells = [cell.reset_index(drop=True) for _, cell in frame.groupby('p', sort=True)]
    for _ in range(samples):
        resampled = pd.concat(
            [cell.iloc[rng.integers(0, len(cell), len(cell))] for cell in cells],
            ignore_index=True,
        )
        try:
            constants = _fit_constants(resampled, n, base, trials)
        except ConfigError:
            continue
        for name in names:
            draws[name].append(getattr(constants, name))
    kept = len(draws['c_abs'])
    if kept < samples:
        logger.warning('calibration bootstrap kept %d of %d resamples', kept, samples)
    return {name: _interval(values) for name, values in draws.items()}


def calibrate(cfg):
    """
    Fit C_KX, c_KX and the radius prefactor from simulated cells.

    C_KX is the 99th percentile of the normalised singular value deficit. The
    prefactor is fitted by regressing est_error on the radius shape
    ``sqrt(small) / ((1 - alpha) sqrt(large) - C_KX sqrt(small))`` over cells
    that satisfy the regime condition; the envelope ``max(est_error / shape)``
    sets the absolute constant C. C_KX, c_KX and C get percentile intervals
    from ``cfg.bootstrap_samples`` resamples of the trials within each cell.

    Returns:
        tuple: ``(CalibrationReport, records DataFrame)``.

    Raises:
        InsufficientTrialsError: With fewer than 200 trials per cell.
    """
    if cfg.trials < MIN_CALIBRATION_TRIALS:
        raise InsufficientTrialsError(
            f'calibration needs at least {MIN_CALIBRATION_TRIALS} trials, got {cfg.trials}'
        )
    ridge, loss = cfg.ridge(), cfg.loss()
    base = campaign_bound_params(cfg)
    atoms = {p: _atoms_for(cfg, p) for p in cfg.p_grid}

    def task(cell):
        p, trial = cell
        return _calibration_row(cfg, ridge, loss, p, trial, atoms[p])

    frame = pd.DataFrame(_map_cells(task, _grid(cfg), cfg.threads), columns=CALIBRATION_COLUMNS)
    n = cfg.n

    constants = _fit_constants(frame, n, base, cfg.trials)
    shapes, errors = constants.shapes, constants.errors
    if np.unique(shapes).size >= 2:
        fit = scipy.stats.linregress(shapes, errors)
        slope, intercept = float(fit.slope), float(fit.intercept)
        half_width = Z_95 * float(fit.stderr)
        r_squared = float(fit.rvalue ** 2)
    else:
        slope, intercept = float(np.mean(errors / shapes)), 0.0
        half_width, r_squared = math.nan, math.nan

    rng = make_rng(derive_seed(cfg.master_seed, BOOTSTRAP_STREAM))
    intervals = _bootstrap_intervals(frame, n, base, cfg.trials, cfg.bootstrap_samples, rng)

    report = CalibrationReport(
        c_kx_rows=constants.c_kx_rows,
        c_kx_columns=constants.c_kx_columns,
        c_kx=constants.c_kx,
        c_kx_small=constants.c_kx_small,
        alpha=base.alpha,
        prefactor=slope,
        prefactor_ci=(slope - half_width, slope + half_width),
        intercept=intercept,
        r_squared=r_squared,
        envelope=constants.envelope,
        c_abs=constants.c_abs,
        cells=constants.cells,
        trials=cfg.trials,
        c_kx_ci=intervals['c_kx'],
        c_kx_small_ci=intervals['c_kx_small'],
        c_abs_ci=intervals['c_abs'],
    )
    logger.info(
        'calibration done c_kx=%.4g c_kx_small=%.4g prefactor=%.4g r_squared=%.4g c_abs=%.4g',
        report.c_kx, report.c_kx_small, slope, r_squared, report.c_abs,
    )
    return report, frame


def summarize_calibration(report):
    rows = [
        ('c_kx', report.c_kx, report.c_kx_ci),
        ('c_kx_small', report.c_kx_small, report.c_kx_small_ci),
        ('prefactor', report.prefactor, report.prefactor_ci),
        ('r_squared', report.r_squared, (math.nan, math.nan)),
        ('c_abs', report.c_abs, report.c_abs_ci),
    ]
    return pd.DataFrame(
        [{'constant': name, 'value': value, 'ci_low': ci[0], 'ci_high': ci[1]}
         for name, value, ci in rows],
        columns=['constant', 'value', 'ci_low', 'ci_high'],
    )


def run_bounds(cfg, bp=None):
    """Bound table for ``cfg.n`` over ``cfg.p_grid``, with regime-condition sides."""
    bp = bp or campaign_bound_params(cfg)
    rows = bound_table(bp, cfg.n, cfg.p_grid)
    for row in rows:
        holds, lhs, rhs = regime_condition(row['regime'], bp, cfg.n, row['p'])
        row.update(regime_ok=bool(holds), lhs=lhs, rhs=rhs)
    return pd.DataFrame(rows)


def run_experiment(cfg, calibration=None):
    """
    Run the configured campaign and write its outputs under ``cfg.out_dir``.

    Args:
        cfg (ExperimentConfig): The campaign.
        calibration (CalibrationReport, optional): Replaces C, C_KX and c_KX.

    Returns:
        RunOutcome: Output directory, record count, summary and wall time.
    """
    started_at = datetime.now(timezone.utc)
    clock = time.perf_counter()
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    bp = campaign_bound_params(cfg)
    if calibration is not None:
        bp = calibration.bound_params(bp)
    experiment = Experiment(cfg.experiment)
    logger.info('campaign started experiment=%s out=%s seed=%d', experiment, out_dir, cfg.master_seed)

    extra = {'bound_params': bp}
    if experiment == Experiment.SWEEP:
        records = run_sweep(cfg, bp)
        frame = reports.write_frame(records_frame(records), out_dir / reports.RECORDS_FILE)
        summary = summarize_sweep(records, cfg, bp)
        reports.export_bounds(bound_table(bp, cfg.n, cfg.p_grid), out_dir / 'bounds.csv')
        if cfg.export_traces:
            for record in records:
                reports.export_trace(
                    record, out_dir / reports.TRACES_DIR / f'p{record.p}_t{record.trial}.csv')
        timings = pd.DataFrame({'p': [r.p for r in records], 'wall_ms': [r.wall_ms for r in records]})
        extra['cell_wall_ms'] = {
            int(p): float(ms) for p, ms in timings.groupby('p')['wall_ms'].sum().items()
        }
    elif experiment == Experiment.RMT:
        frame = reports.write_frame(run_rmt(cfg), out_dir / reports.RECORDS_FILE)
        summary = summarize_rmt(frame, cfg, bp)
    elif experiment == Experiment.COUPON:
        frame = reports.write_frame(run_coupon(cfg), out_dir / reports.RECORDS_FILE)
        summary = frame[['vector', 'k', 'mean_rel_err', 'second_rel_err', 'exceed_freq',
                         'chebyshev_limit']]
    elif experiment == Experiment.GENERALIZATION:
        frame = reports.write_frame(run_generalization(cfg, bp), out_dir / reports.RECORDS_FILE)
        summary = summarize_generalization(frame, cfg, bp)
    elif experiment == Experiment.CALIBRATE:
        report, frame = calibrate(cfg)
        reports.write_frame(frame, out_dir / reports.RECORDS_FILE)
        reports.write_json(report.to_dict(), out_dir / reports.CONSTANTS_FILE)
        summary = summarize_calibration(report)
        extra['calibration'] = report.to_dict()
    else:
        frame = reports.write_frame(run_bounds(cfg, bp), out_dir / reports.RECORDS_FILE)
        summary = frame

    reports.write_frame(summary, out_dir / reports.SUMMARY_FILE)
    wall_seconds = time.perf_counter() - clock
    reports.write_meta(out_dir / reports.META_FILE, cfg, started_at, wall_seconds, extra)
    logger.info(
        'campaign finished experiment=%s records=%d wall_seconds=%.2f',
        experiment, len(frame), wall_seconds,
    )
    return RunOutcome(
        experiment=experiment.value,
        out_dir=out_dir,
        records=len(frame),
        summary=summary,
        wall_seconds=wall_seconds,
        extra=extra,
    )
