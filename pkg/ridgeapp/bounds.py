"""
Closed-form error radii, probabilities and sample-size thresholds.

Notation follows the bound constants: ``c_abs`` is the absolute constant C,
``c_kx`` and ``c_kx_small`` the design constants C_KX and c_KX, ``k_eps`` the
noise proxy, ``delta`` the Hessian-weight floor and ``alpha`` the slack in the
extreme singular value bounds.
"""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.linalg
from django.conf import settings
from scipy.special import comb

from .choices import Orientation, Regime
from .exceptions import CapExceededError, DomainError, FactorizationError, RegimeConditionError

logger = logging.getLogger(__name__)

# Subset masses summed per block by coupon_moments.
COUPON_CHUNK = 1 << 20


@dataclass(frozen=True)
class BoundParams:
    """
    Constants entering the error radius and its success probability.

    All constants are strictly positive. ``alpha`` is accepted on [0, 1] so
    the probability formula can be evaluated at its limits; the radius still
    refuses any alpha for which the regime condition fails.
    """
    c_abs: float = 1.0
    c_kx: float = 1.0
    c_kx_small: float = 1.0
    k_x: float = 1.0
    k_eps: float = 1.0
    alpha: float = 0.5
    delta: float = 1.0
    c_lsecond: float = 1.0
    c_fprime: float = 1.0

    def __post_init__(self):
        for name in ('c_abs', 'c_kx', 'c_kx_small', 'k_x', 'k_eps', 'delta',
                     'c_lsecond', 'c_fprime'):
            value = getattr(self, name)
            if not value > 0:
                raise DomainError(f'{name} must be positive, got {value!r}')
        if not 0.0 <= self.alpha <= 1.0:
            raise DomainError(f'alpha must lie in [0, 1], got {self.alpha!r}')

    @property
    def prefactor(self):
        """``6 sqrt(C) C_l'' C_f' K_eps / delta``."""
        return (6.0 * math.sqrt(self.c_abs) * self.c_lsecond * self.c_fprime
                * self.k_eps / self.delta)


def _dimensions(regime, n, p):
    """Return (small, large) dimension for the regime's singular value bound."""
    return (p, n) if Regime(regime) == Regime.UNDER else (n, p)


def regime_condition(regime, bp, n, p):
    """
    Check ``C_KX**2 * small < (1 - alpha)**2 * large``.

    Returns:
        tuple: ``(holds, lhs, rhs)``.
    """
    small, large = _dimensions(regime, n, p)
    lhs = bp.c_kx ** 2 * small
    rhs = (1.0 - bp.alpha) ** 2 * large
    return lhs < rhs, lhs, rhs


def radius(regime, bp, n, p):
    """
    Error radius of the stationary point around ``theta_star``.

    Underparametrised: ``prefactor * sqrt(p) / ((1 - alpha) sqrt(n) - C_KX sqrt(p))``;
    overparametrised swaps n and p.

    Raises:
        RegimeConditionError: If the standing n/p assumption fails.
    """
    regime = Regime(regime)
    holds, lhs, rhs = regime_condition(regime, bp, n, p)
    if not holds:
        raise RegimeConditionError(regime, lhs, rhs)
    small, large = _dimensions(regime, n, p)
    denominator = (1.0 - bp.alpha) * math.sqrt(large) - bp.c_kx * math.sqrt(small)
    return bp.prefactor * math.sqrt(small) / denominator


def success_probability(regime, bp, n, p):
    """
    Probability with which the radius holds.

    Underparametrised: ``1 - 2 exp(-c_KX alpha**2 n) - exp(-p/2)``;
    overparametrised swaps n and p. The value may be negative (vacuous);
    see :func:`clamp_probability`.
    """
    small, large = _dimensions(regime, n, p)
    return (1.0 - 2.0 * math.exp(-bp.c_kx_small * bp.alpha ** 2 * large)
            - math.exp(-small / 2.0))


def clamp_probability(value):
    return min(1.0, max(0.0, value))


def generalization_probability(bp, n, p, t):
    """Probability of the generalization bound, ``1 - 2exp(-c alpha^2 p) - exp(-n/2) - 1/t^2``."""
    if not t > 0:
        raise DomainError(f't must be positive, got {t!r}')
    return success_probability(Regime.OVER, bp, n, p) - 1.0 / t ** 2


def smin_bound(orientation, alpha, c_kx, n, p):
    """
    Lower bound on the smallest singular value.

    ``rows``: ``s_min(X) >= (1 - alpha) sqrt(n) - C_KX sqrt(p)``;
    ``columns``: ``s_min(X^T) >= (1 - alpha) sqrt(p) - C_KX sqrt(n)``.
    A nonpositive value means the bound is vacuous.
    """
    if Orientation(orientation) == Orientation.ROWS:
        value = (1.0 - alpha) * math.sqrt(n) - c_kx * math.sqrt(p)
    else:
        value = (1.0 - alpha) * math.sqrt(p) - c_kx * math.sqrt(n)
    if value <= 0:
        logger.debug('vacuous smin bound orientation=%s n=%d p=%d', orientation, n, p)
    return value


def extreme_singulars(x):
    """Smallest and largest singular values of ``x`` (over its smaller dimension)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if not np.any(x):
        raise DomainError('extreme singular values of a zero matrix are undefined')
    try:
        values = scipy.linalg.svdvals(x)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f'singular values did not converge for a {x.shape} matrix') from exc
    return float(values[-1]), float(values[0])


@dataclass(frozen=True)
class CouponMoments:
    """
    Moments of the number ``N`` of draws completing a coupon collection.

    Attributes:
        mean (float): Exact ``E[N]`` by inclusion-exclusion.
        second_moment (float): ``2 sum_S (-1)^(|S|-1) / P_S**2``, the
            continuous-time (Poissonised) second moment.
        second_moment_discrete (float): Exact ``E[N**2]`` of the draw count,
            ``sum_S (-1)^(|S|-1) (2 / P_S**2 - 1 / P_S)``.
        mean_bound (float): ``p_min^-1 sum_k C(K, k) / k``.
        second_moment_bound (float): ``2 p_min^-2 sum_k C(K, k) / k**2``.
    """
    mean: float
    second_moment: float
    second_moment_discrete: float
    mean_bound: float
    second_moment_bound: float

    @property
    def variance(self):
        return self.second_moment_discrete - self.mean ** 2


def _check_probs(probs):
    probs = np.asarray(probs, dtype=float).reshape(-1)
    if probs.size == 0 or np.any(probs <= 0):
        raise DomainError('coupon probabilities must be positive')
    if abs(probs.sum() - 1.0) > 1e-10:
        raise DomainError(f'coupon probabilities sum to {probs.sum()!r}, not 1')
    return probs


def _binomial_sums(k):
    """Exact ``sum_j C(k, j) / j`` and ``sum_j C(k, j) / j**2``."""
    first = sum(Fraction(comb(k, j, exact=True), j) for j in range(1, k + 1))
    second = sum(Fraction(comb(k, j, exact=True), j * j) for j in range(1, k + 1))
    return first, second


def coupon_moments(probs):
    """
    Exact moments of the coupon collector by inclusion-exclusion.

    The ``2**K - 1`` subset masses are built by doubling: after coupon ``k``
    the array holds the masses of every subset of the first ``k`` coupons.
    Signed sums are taken in blocks as subsets appear, so the last doubling
    is never materialised.

    Raises:
        CapExceededError: Beyond ``settings.LAB_COUPON_EXACT_CAP`` coupons; use
            :func:`coupon_sample_threshold` instead.
    """
    probs = _check_probs(probs)
    k = probs.size
    cap = settings.LAB_COUPON_EXACT_CAP
    if k > cap:
        raise CapExceededError(
            f'exact coupon moments support at most {cap} coupons, got {k}; '
            f'use coupon_sample_threshold for the bound form'
        )

    # new subsets at coupon ``k`` are the old ones plus ``k``; only those are summed
    masses = np.zeros(1)
    odd = np.zeros(1, dtype=bool)
    inverse = inverse_sq = 0.0
    for index, prob in enumerate(probs):
        for start in range(0, masses.size, COUPON_CHUNK):
            grown = masses[start:start + COUPON_CHUNK] + prob
            signs = np.where(odd[start:start + COUPON_CHUNK], -1.0, 1.0)
            inverse += float(np.sum(signs / grown))
            inverse_sq += float(np.sum(signs / (grown * grown)))
        if index < k - 1:
            masses = np.concatenate([masses, masses + prob])
            odd = np.concatenate([odd, ~odd])

    first, second = _binomial_sums(k)
    p_min = float(probs.min())
    return CouponMoments(
        mean=inverse,
        second_moment=2.0 * inverse_sq,
        second_moment_discrete=2.0 * inverse_sq - inverse,
        mean_bound=float(first) / p_min,
        second_moment_bound=2.0 * float(second) / p_min ** 2,
    )


def coupon_sample_threshold(n_cover, p_min, t):
    """
    Sample size after which every covering ball is hit, with probability ``1 - 1/t**2``.

    Evaluates ``p_min^-1 (sum_k C(N, k)/k + t sqrt(2 sum_k C(N, k)/k**2))``
    with exact rational binomial sums.

    Raises:
        CapExceededError: Beyond ``settings.LAB_COUPON_THRESHOLD_CAP`` balls.
    """
    if n_cover < 1:
        raise DomainError(f'n_cover must be at least 1, got {n_cover}')
    if not 0.0 < p_min <= 1.0:
        raise DomainError(f'p_min must lie in (0, 1], got {p_min!r}')
    if t < 0:
        raise DomainError(f't must be nonnegative, got {t!r}')
    cap = settings.LAB_COUPON_THRESHOLD_CAP
    if n_cover > cap:
        raise CapExceededError(
            f'binomial sums overflow beyond {cap} covering balls, got {n_cover}'
        )
    first, second = _binomial_sums(int(n_cover))
    return (float(first) + t * math.sqrt(2.0 * float(second))) / p_min


@dataclass
class CoverReport:
    """
    A greedy epsilon-net of a point cloud.

    Every point lies within ``cover_eps * sqrt(p)`` of its assigned center.
    """
    centers: np.ndarray
    n_cover: int
    cover_eps: float
    p_min_hat: float
    assignments: np.ndarray
    counts: np.ndarray = None


def epsilon_cover(points, radius):
    """
    Cover ``points`` with balls of radius ``radius * sqrt(p)``.

    Farthest-point traversal: start from the first point, keep adding the
    point farthest from the current centers while that distance exceeds the
    ball radius. The center sequence does not depend on ``radius``, so the
    count is non-increasing in it.

    Args:
        points (array-like): m x p array of points.
        radius (float): Ball radius in units of ``sqrt(p)``.

    Returns:
        CoverReport: Centers, nearest-center assignments and the smallest
        empirical ball share ``p_min_hat``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] == 0:
        raise DomainError('cannot cover an empty point set')
    if not radius > 0:
        raise DomainError(f'radius must be positive, got {radius!r}')
    limit = radius * math.sqrt(points.shape[1])

    center_idx = [0]
    nearest = np.linalg.norm(points - points[0], axis=1)
    while True:
        candidate = int(np.argmax(nearest))
        if nearest[candidate] <= limit:
            break
        center_idx.append(candidate)
        nearest = np.minimum(nearest, np.linalg.norm(points - points[candidate], axis=1))

    centers = points[center_idx]
    best = np.full(points.shape[0], np.inf)
    assignments = np.zeros(points.shape[0], dtype=int)
    for j, center in enumerate(centers):
        distance = np.linalg.norm(points - center, axis=1)
        closer = distance < best
        best[closer] = distance[closer]
        assignments[closer] = j
    counts = np.bincount(assignments, minlength=len(center_idx))
    return CoverReport(
        centers=centers,
        n_cover=len(center_idx),
        cover_eps=float(radius),
        p_min_hat=float(counts.min() / points.shape[0]),
        assignments=assignments,
        counts=counts,
    )


def generalization_bound(bp, n, p, cover_eps, theta_star_norm):
    """
    Prediction error bound of the minimum-norm stationary point.

    ``(1 + 4 eps) r_over + 4 eps ||theta_star||`` with ``r_over`` the
    overparametrised radius.
    """
    if cover_eps < 0 or theta_star_norm < 0:
        raise DomainError('cover_eps and theta_star_norm must be nonnegative')
    r = radius(Regime.OVER, bp, n, p)
    return (1.0 + 4.0 * cover_eps) * r + 4.0 * cover_eps * theta_star_norm


def bound_table(bp, n, p_grid):
    """
    Rows ``(regime, n, p, r, prob, smin_bound)`` over a grid of dimensions.

    ``r`` is NaN where the regime condition fails; ``prob`` is clamped to [0, 1].
    """
    rows = []
    for p in p_grid:
        regime = Regime.UNDER if p < n else Regime.OVER
        orientation = Orientation.ROWS if regime == Regime.UNDER else Orientation.COLUMNS
        try:
            r = radius(regime, bp, n, p)
        except RegimeConditionError:
            r = math.nan
        rows.append({
            'regime': regime.value,
            'n': n,
            'p': p,
            'r': r,
            'prob': clamp_probability(success_probability(regime, bp, n, p)),
            'smin_bound': smin_bound(orientation, bp.alpha, bp.c_kx, n, p),
        })
    return rows
