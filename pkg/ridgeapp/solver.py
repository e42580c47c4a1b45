"""
Stationary points of the empirical risk by damped Newton flow.

The flow integrates ``theta <- theta + step * d(theta)`` where ``d`` solves
the Newton system ``H(theta) d = -grad(theta)`` through the compact SVD
``X = U S V^T``:

* underparametrised: ``V^T d = S^-1 (U^T D(mu) U)^-1 U^T D(nu) loss'(r)``;
* overparametrised: ``d = V S^-1 U^T D(mu)^-1 D(nu) loss'(r)``, the least-norm
  solution of the interpolation system ``D(mu) X d = D(nu) loss'(r)``.

Every overparametrised direction lies in the row space of ``X``, so the flow
never leaves ``theta_init + rowspace(X)``.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg

from .choices import LinkKind, LossKind, Regime
from .exceptions import DomainError, FactorizationError, SingularSystemError
from .risk import gradient, weights

logger = logging.getLogger(__name__)

# Singular values below this fraction of the largest are dropped from the rank.
RANK_RTOL = 1e-12

# A Hessian weight this small relative to the largest one violates the delta condition.
MU_RTOL = 1e-12


@dataclass
class SvdFactors:
    """
    Compact SVD ``X = U diag(sigma) V^T`` with an effective rank.

    Attributes:
        u (numpy.ndarray): n x k, orthonormal columns.
        sigma (numpy.ndarray): k singular values in descending order.
        v (numpy.ndarray): p x k, orthonormal columns.
        rank (int): Number of singular values above ``RANK_RTOL * sigma[0]``.
    """
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray
    rank: int

    @property
    def k(self):
        return self.sigma.shape[0]

    def truncated(self):
        """Factors restricted to the effective rank."""
        r = self.rank
        return self.u[:, :r], self.sigma[:r], self.v[:, :r]


class TraceRow(NamedTuple):
    iteration: int
    grad_norm: float
    step_norm: float


@dataclass
class FlowOptions:
    """
    Integration settings of the Newton flow.

    ``tol=None`` means ``1e-10 * (1 + max|y|)``.
    """
    step: float = 0.5
    max_iter: int = 200
    tol: float = None

    def __post_init__(self):
        if not 0.0 < self.step <= 1.0:
            raise DomainError(f'step must lie in (0, 1], got {self.step!r}')
        if self.max_iter < 0:
            raise DomainError(f'max_iter must be nonnegative, got {self.max_iter!r}')
        if self.tol is not None and not self.tol > 0:
            raise DomainError(f'tol must be positive, got {self.tol!r}')


@dataclass
class StationaryPoint:
    """
    Result of a Newton flow.

    ``converged`` implies ``grad_norm <= tol``. ``monotone_violations`` counts
    iterations whose gradient norm grew.
    """
    theta_hat: np.ndarray
    grad_norm: float
    iterations: int
    regime: Regime
    converged: bool
    tol: float
    trace: list = field(default_factory=list)
    monotone_violations: int = 0


def regime_for(n, p):
    """``under`` when p < n, ``over`` otherwise."""
    return Regime.UNDER if p < n else Regime.OVER


def svd_factors(x):
    """
    Compact SVD of a nonzero matrix.

    Falls back from LAPACK's divide-and-conquer driver to the QR-iteration
    driver before giving up.

    Raises:
        DomainError: If ``x`` is identically zero.
        FactorizationError: If neither driver converges.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if not np.any(x):
        raise DomainError('cannot factor a zero matrix')
    try:
        u, sigma, vt = scipy.linalg.svd(x, full_matrices=False, lapack_driver='gesdd')
    except np.linalg.LinAlgError:
        logger.warning('svd gesdd failed shape=%s, retrying with gesvd', x.shape)
        try:
            u, sigma, vt = scipy.linalg.svd(x, full_matrices=False, lapack_driver='gesvd')
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(f'svd did not converge for a {x.shape} matrix') from exc
    rank = int(np.count_nonzero(sigma > RANK_RTOL * sigma[0]))
    return SvdFactors(u=u, sigma=sigma, v=vt.T, rank=rank)


def _checked_mu(mu):
    scale = np.max(np.abs(mu))
    small = np.abs(mu) < MU_RTOL * scale if scale > 0 else np.ones(mu.shape, dtype=bool)
    if np.any(small):
        index = int(np.argmax(small))
        raise SingularSystemError(
            f'Hessian weight mu[{index}]={mu[index]!r} vanishes relative to max|mu|={scale!r}',
            index=index,
        )
    return mu


def neuberger_direction(ctx, theta, svd, regime):
    """
    Newton direction ``d`` with ``H(theta) d = -grad(theta)``.

    Args:
        ctx (RiskContext): Data, link and loss.
        theta (array-like): Current parameter.
        svd (SvdFactors): Factors of ``ctx.x``.
        regime (str): ``under`` or ``over``.

    Returns:
        numpy.ndarray: The least-norm direction of length ``p``.

    Raises:
        SingularSystemError: If a Hessian weight vanishes or the reduced
            system ``U^T D(mu) U`` is singular.
    """
    regime = Regime(regime)
    mu, nu, lprime = weights(ctx, theta)
    mu = _checked_mu(mu)
    u, sigma, v = svd.truncated()
    rhs = nu * lprime

    if regime == Regime.OVER:
        return v @ ((u.T @ (rhs / mu)) / sigma)

    reduced = u.T @ (mu[:, None] * u)
    with warnings.catch_warnings():
        warnings.simplefilter('error', scipy.linalg.LinAlgWarning)
        try:
            coeffs = scipy.linalg.solve(reduced, u.T @ rhs)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as exc:
            condition = float(np.linalg.cond(reduced))
            raise SingularSystemError(
                f'reduced Newton system is singular, condition={condition:.3e}',
                condition=condition,
            ) from exc
    return v @ (coeffs / sigma)


def newton_flow(ctx, theta_init, opts=None, regime=None, svd=None):
    """
    Integrate the damped Newton flow until the gradient vanishes.

    Args:
        ctx (RiskContext): Data, link and loss.
        theta_init (array-like): Starting point; ``theta_star`` targets the
            stationary point the error radius localises.
        opts (FlowOptions, optional): Step, iteration budget and tolerance.
        regime (str, optional): Defaults to :func:`regime_for`.
        svd (SvdFactors, optional): Precomputed factors of ``ctx.x``.

    Returns:
        StationaryPoint: Non-convergence is reported through ``converged``.
    """
    opts = opts or FlowOptions()
    regime = Regime(regime) if regime is not None else regime_for(ctx.n, ctx.p)
    svd = svd if svd is not None else svd_factors(ctx.x)
    tol = opts.tol if opts.tol is not None else 1e-10 * (1.0 + float(np.max(np.abs(ctx.y))))

    theta = np.array(theta_init, dtype=float).reshape(-1)
    if not np.all(np.isfinite(theta)):
        raise DomainError('theta_init must be finite')
    grad_norm = float(np.linalg.norm(gradient(ctx, theta)))
    trace = [TraceRow(0, grad_norm, 0.0)]
    violations = 0
    iteration = 0

    while grad_norm > tol and iteration < opts.max_iter:
        d = neuberger_direction(ctx, theta, svd, regime)
        theta = theta + opts.step * d
        iteration += 1
        new_norm = float(np.linalg.norm(gradient(ctx, theta)))
        if new_norm > grad_norm:
            violations += 1
            logger.warning(
                'gradient norm increased iteration=%d before=%.6e after=%.6e',
                iteration, grad_norm, new_norm,
            )
        grad_norm = new_norm
        trace.append(TraceRow(iteration, grad_norm, opts.step * float(np.linalg.norm(d))))
        logger.debug('flow iteration=%d grad_norm=%.6e', iteration, grad_norm)

    converged = grad_norm <= tol
    if not converged:
        logger.info(
            'newton flow stopped without converging iterations=%d grad_norm=%.3e tol=%.3e',
            iteration, grad_norm, tol,
        )
    return StationaryPoint(
        theta_hat=theta,
        grad_norm=grad_norm,
        iterations=iteration,
        regime=regime,
        converged=converged,
        tol=tol,
        trace=trace,
        monotone_violations=violations,
    )


def min_norm_projection(x, theta_hat):
    """
    Orthogonal projection of ``theta_hat`` onto the row space of ``x``.

    This is the minimum-norm parameter producing the same fitted values
    ``x @ theta_hat``.
    """
    theta_hat = np.asarray(theta_hat, dtype=float).reshape(-1)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if not np.any(x):
        return np.zeros_like(theta_hat)
    _, _, v = svd_factors(x).truncated()
    return v @ (v.T @ theta_hat)


def closed_form_linear(ctx):
    """
    Least-squares solution for the linear link with quadratic loss.

    Returns the unique minimiser ``(X^T X)^-1 X^T y`` when ``n > p`` and the
    minimum-norm interpolator ``X^+ y`` otherwise (LAPACK ``gelsd`` gives both).
    """
    if ctx.ridge.kind != LinkKind.LINEAR or ctx.loss.kind != LossKind.QUADRATIC:
        raise DomainError(
            f'closed form needs a linear link and quadratic loss, '
            f'got {ctx.ridge.kind} and {ctx.loss.kind}'
        )
    solution, _, _, _ = scipy.linalg.lstsq(ctx.x, ctx.y, lapack_driver='gelsd')
    return solution
