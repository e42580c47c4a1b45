"""
Ridge link functions and loss functions.

A ridge model predicts ``f(x @ theta)`` for an increasing link ``f``; it is
fitted by minimising the mean of ``loss(y - f(x @ theta))``. This module
provides the catalogue of links and losses together with their first two
derivatives and the regularity constants the error bounds depend on.

All evaluators are vectorised over numpy arrays and keep no state.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .choices import LinkKind, LossKind
from .exceptions import DomainError

logger = logging.getLogger(__name__)

# |z (1 + z^2)**-2.5| peaks at z = 1/2
_SOFTSIGN_CURVATURE_PEAK = 0.5


@dataclass(frozen=True)
class RidgeFunction:
    """
    An increasing link function with bounded derivative.

    Attributes:
        kind (LinkKind): Which member of the catalogue this is.
        param (float): Tilt ``a`` in [0, 1); unused for the linear link.
        c_fprime (float): Supremum of ``f'`` over the declared interval.
        c_fsecond (float): Supremum of ``|f''|`` over the declared interval.
        interval (tuple): Declared domain; every catalogue link is valid on the real line.
    """
    kind: LinkKind
    param: float = 0.0
    c_fprime: float = 1.0
    c_fsecond: float = 0.0
    interval: tuple = (-math.inf, math.inf)

    def value(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == LinkKind.LINEAR:
            return z.copy()
        if self.kind == LinkKind.TANH_TILT:
            return z + self.param * np.tanh(z)
        return z + self.param * z / np.sqrt(1.0 + z * z)

    def derivative(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == LinkKind.LINEAR:
            return np.ones_like(z)
        if self.kind == LinkKind.TANH_TILT:
            t = np.tanh(z)
            return 1.0 + self.param * (1.0 - t * t)
        return 1.0 + self.param * (1.0 + z * z) ** -1.5

    def second_derivative(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == LinkKind.LINEAR:
            return np.zeros_like(z)
        if self.kind == LinkKind.TANH_TILT:
            t = np.tanh(z)
            return -2.0 * self.param * t * (1.0 - t * t)
        return -3.0 * self.param * z * (1.0 + z * z) ** -2.5


@dataclass(frozen=True)
class LossSpec:
    """
    A smooth loss with ``loss'(0) = 0`` and bounded second derivative.

    Attributes:
        kind (LossKind): Which member of the catalogue this is.
        param (float): Transition scale ``c`` of the pseudo-Huber loss.
        c_lsecond (float): Upper bound on ``loss''``.
    """
    kind: LossKind
    param: float = 1.0
    c_lsecond: float = 1.0

    def value(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == LossKind.QUADRATIC:
            return 0.5 * z * z
        c = self.param
        return c * c * (np.sqrt(1.0 + (z / c) ** 2) - 1.0)

    def derivative(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == LossKind.QUADRATIC:
            return z.copy()
        return z / np.sqrt(1.0 + (z / self.param) ** 2)

    def second_derivative(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == LossKind.QUADRATIC:
            return np.ones_like(z)
        return (1.0 + (z / self.param) ** 2) ** -1.5


@dataclass(frozen=True)
class RegularityReport:
    """
    Grid estimates of the constants entering the error radius.

    ``delta_hat`` is the minimum over the grid of
    ``|loss''(w) f'(z)**2 - loss'(w) f''(z)|``, the quantity that keeps the
    Hessian weights away from zero.
    """
    c_fprime_hat: float
    c_lsecond_hat: float
    delta_hat: float
    grid_size: int
    z_range: tuple
    w_range: tuple


def make_ridge_function(kind, param=0.0):
    """
    Build a link function from the catalogue.

    Args:
        kind (str): One of ``linear``, ``tanh_tilt`` or ``scaled_softsign``.
        param (float): Tilt ``a``; must lie in [0, 1) for the tilted links.

    Returns:
        RidgeFunction: The link with its analytic derivative bounds.

    Raises:
        DomainError: On an unknown kind or a tilt outside [0, 1).
    """
    try:
        kind = LinkKind(kind)
    except ValueError as exc:
        raise DomainError(f'unknown ridge function kind {kind!r}') from exc

    if kind == LinkKind.LINEAR:
        return RidgeFunction(kind=kind, param=0.0, c_fprime=1.0, c_fsecond=0.0)

    a = float(param)
    if not 0.0 <= a < 1.0:
        raise DomainError(f'{kind.value} needs a parameter in [0, 1), got {a!r}')

    if kind == LinkKind.TANH_TILT:
        # |t (1 - t^2)| peaks at t = 1/sqrt(3)
        c_fsecond = 2.0 * a * 2.0 / (3.0 * math.sqrt(3.0))
    else:
        z = _SOFTSIGN_CURVATURE_PEAK
        c_fsecond = 3.0 * a * z * (1.0 + z * z) ** -2.5
    return RidgeFunction(kind=kind, param=a, c_fprime=1.0 + a, c_fsecond=c_fsecond)


def make_loss(kind, param=1.0):
    """
    Build a loss from the catalogue.

    Args:
        kind (str): ``quadratic`` or ``pseudo_huber``.
        param (float): Scale ``c > 0`` of the pseudo-Huber loss.

    Returns:
        LossSpec: The loss; ``c_lsecond`` is 1 for both kinds.

    Raises:
        DomainError: On an unknown kind or a nonpositive pseudo-Huber scale.
    """
    try:
        kind = LossKind(kind)
    except ValueError as exc:
        raise DomainError(f'unknown loss kind {kind!r}') from exc

    if kind == LossKind.QUADRATIC:
        return LossSpec(kind=kind, param=1.0, c_lsecond=1.0)

    c = float(param)
    if not c > 0.0:
        raise DomainError(f'pseudo_huber needs a positive scale, got {c!r}')
    return LossSpec(kind=kind, param=c, c_lsecond=1.0)


def check_regularity(ridge, loss, z_range, w_range, grid):
    """
    Estimate the regularity constants of a (link, loss) pair on a rectangle.

    The Hessian weight ``loss''(w) f'(z)**2 - loss'(w) f''(z)`` is evaluated
    on a ``grid`` x ``grid`` lattice covering ``z_range`` x ``w_range``.

    Args:
        ridge (RidgeFunction): The link.
        loss (LossSpec): The loss.
        z_range (tuple): Interval of link arguments ``x @ theta``.
        w_range (tuple): Interval of residuals.
        grid (int): Points per axis, at least 2.

    Returns:
        RegularityReport: Grid maxima of ``f'`` and ``loss''`` and grid minimum
        of the absolute Hessian weight.
    """
    if grid < 2:
        raise DomainError(f'grid needs at least 2 points per axis, got {grid}')
    z_lo, z_hi = map(float, z_range)
    w_lo, w_hi = map(float, w_range)
    if not (z_lo <= z_hi and w_lo <= w_hi):
        raise DomainError(f'empty range z={z_range!r} w={w_range!r}')

    z = np.linspace(z_lo, z_hi, grid)
    w = np.linspace(w_lo, w_hi, grid)
    fp = ridge.derivative(z)
    fpp = ridge.second_derivative(z)
    lp = loss.derivative(w)
    lpp = loss.second_derivative(w)

    weight = np.abs(np.outer(lpp, fp * fp) - np.outer(lp, fpp))
    report = RegularityReport(
        c_fprime_hat=float(fp.max()),
        c_lsecond_hat=float(lpp.max()),
        delta_hat=float(weight.min()),
        grid_size=grid,
        z_range=(z_lo, z_hi),
        w_range=(w_lo, w_hi),
    )
    logger.debug(
        'regularity link=%s loss=%s delta_hat=%.6g c_fprime_hat=%.6g',
        ridge.kind, loss.kind, report.delta_hat, report.c_fprime_hat,
    )
    return report
