"""
Empirical risk of the ridge model and its derivatives.

With residuals ``r_i = y_i - f(x_i @ theta)`` the empirical risk is
``mean(loss(r))``, its gradient is ``-(1/n) X^T D(nu) loss'(r)`` with
``nu_i = f'(x_i @ theta)`` and its Hessian is ``(1/n) X^T D(mu) X`` with
``mu_i = loss''(r_i) f'(z_i)**2 - loss'(r_i) f''(z_i)``.
"""

import math
from dataclasses import dataclass

import numpy as np
from django.conf import settings

from .datagen import CHUNK_ROWS, Dataset, draw_rows, make_rng, sample_noise
from .exceptions import DimensionMismatchError, DomainError


@dataclass(frozen=True)
class RiskContext:
    """
    A dataset together with the link and loss the risk is measured with.

    ``ridge`` defaults to the link the dataset was generated with.
    """
    dataset: object
    loss: object
    ridge: object = None

    def __post_init__(self):
        if self.ridge is None:
            if self.dataset.ridge is None:
                raise DomainError('a risk context needs a ridge function')
            object.__setattr__(self, 'ridge', self.dataset.ridge)
        if self.dataset.y.shape != (self.dataset.n,):
            raise DimensionMismatchError(
                f'y has shape {self.dataset.y.shape}, expected ({self.dataset.n},)'
            )

    @property
    def x(self):
        return self.dataset.x

    @property
    def y(self):
        return self.dataset.y

    @property
    def n(self):
        return self.dataset.n

    @property
    def p(self):
        return self.dataset.p

    @classmethod
    def from_arrays(cls, x, y, ridge, loss):
        return cls(dataset=Dataset.from_arrays(x, y, ridge=ridge), loss=loss, ridge=ridge)


@dataclass
class HessianFactors:
    """
    Factored Hessian ``(1/n) X^T D(mu) X`` at one parameter value.

    Attributes:
        mu (numpy.ndarray): Hessian diagonal weights, length n.
        nu (numpy.ndarray): Gradient weights ``f'(x_i @ theta)``, length n.
        h (numpy.ndarray | None): Dense p x p Hessian, None above the dense cap.
        x (numpy.ndarray): The design, kept for matrix-free products.
    """
    mu: np.ndarray
    nu: np.ndarray
    h: np.ndarray
    x: np.ndarray

    def matvec(self, v):
        v = np.asarray(v, dtype=float)
        if self.h is not None:
            return self.h @ v
        return self.x.T @ (self.mu * (self.x @ v)) / self.x.shape[0]


def _check_theta(ctx, theta):
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if theta.shape[0] != ctx.p:
        raise DimensionMismatchError(
            f'theta has length {theta.shape[0]} but the design has p={ctx.p}'
        )
    return theta


def residuals(ctx, theta):
    """Return ``(z, r)`` with ``z = X @ theta`` and ``r = y - f(z)``."""
    theta = _check_theta(ctx, theta)
    z = ctx.x @ theta
    return z, ctx.y - ctx.ridge.value(z)


def weights(ctx, theta):
    """
    Per-observation weights at ``theta``.

    Returns:
        tuple: ``(mu, nu, lprime)`` where ``lprime = loss'(r)``.
    """
    z, r = residuals(ctx, theta)
    fp = ctx.ridge.derivative(z)
    lprime = ctx.loss.derivative(r)
    mu = ctx.loss.second_derivative(r) * fp * fp - lprime * ctx.ridge.second_derivative(z)
    return mu, fp, lprime


def empirical_risk(ctx, theta):
    """Mean loss of the residuals at ``theta``."""
    _, r = residuals(ctx, theta)
    # np.mean reduces contiguous float arrays by pairwise summation
    return float(np.mean(ctx.loss.value(r)))


def gradient(ctx, theta):
    """Gradient ``-(1/n) X^T D(nu) loss'(r)`` of the empirical risk."""
    z, r = residuals(ctx, theta)
    return -(ctx.x.T @ (ctx.ridge.derivative(z) * ctx.loss.derivative(r))) / ctx.n


def hessian(ctx, theta):
    """
    Hessian of the empirical risk in factored form.

    The dense matrix is built only while ``p`` stays within
    ``settings.LAB_DENSE_HESSIAN_CAP``; beyond it use ``HessianFactors.matvec``.
    """
    mu, nu, _ = weights(ctx, theta)
    h = None
    if ctx.p <= settings.LAB_DENSE_HESSIAN_CAP:
        h = ctx.x.T @ (mu[:, None] * ctx.x) / ctx.n
        # symmetric to the last bit
        h = 0.5 * (h + h.T)
    return HessianFactors(mu=mu, nu=nu, h=h, x=ctx.x)


@dataclass(frozen=True)
class RiskEstimate:
    mean: float
    stderr: float
    m: int


def estimate_theoretical_risk(ridge, loss, theta, theta_star, dist_kind, noise_kind,
                              noise_scale=0.0, m=10_000, seed=0, atoms=None):
    """
    Monte Carlo estimate of ``E[loss(Y - f(X @ theta))]`` on fresh draws.

    Rows are drawn from ``dist_kind`` in chunks of at most ``CHUNK_ROWS`` so the
    design-size cap is never exceeded, whatever ``m``.

    Args:
        ridge (RidgeFunction): Link generating and fitting the data.
        loss (LossSpec): Loss the risk is measured with.
        theta (array-like): Parameter whose risk is estimated.
        theta_star (array-like): Ground truth.
        dist_kind (str): Design distribution of the fresh rows.
        noise_kind (str): Noise distribution.
        noise_scale (float): sigma or bound of the noise.
        m (int): Number of fresh observations, at least 1.
        seed (int): Stream seed.
        atoms (numpy.ndarray | None): Support of an atomic design distribution.

    Returns:
        RiskEstimate: Mean, standard error and sample size.
    """
    if m < 1:
        raise DomainError(f'm must be at least 1, got {m}')
    theta = np.asarray(theta, dtype=float).reshape(-1)
    theta_star = np.asarray(theta_star, dtype=float).reshape(-1)
    if theta.shape != theta_star.shape:
        raise DimensionMismatchError(
            f'theta has length {theta.shape[0]}, theta_star {theta_star.shape[0]}'
        )
    p = theta.shape[0]
    rng = make_rng(seed)

    losses = []
    remaining = m
    while remaining > 0:
        rows = min(remaining, CHUNK_ROWS)
        x = draw_rows(rng, rows, p, dist_kind, atoms=atoms)
        y = ridge.value(x @ theta_star) + sample_noise(rows, noise_kind, noise_scale, rng)
        losses.append(loss.value(y - ridge.value(x @ theta)))
        remaining -= rows
    losses = np.concatenate(losses)

    stderr = float(np.std(losses, ddof=1) / math.sqrt(m)) if m > 1 else math.nan
    return RiskEstimate(mean=float(np.mean(losses)), stderr=stderr, m=m)
