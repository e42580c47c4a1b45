"""
Synthetic data for the ridge model ``y_i = f(x_i @ theta_star) + eps_i``.

Design rows are isotropic with Euclidean norm exactly ``sqrt(p)``; noise is
centred and sub-Gaussian. All randomness flows through Philox generators
(numpy's counter-based bit generator, 4x64 counter, 2x64 key), so a seed
fully determines a draw on every platform.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from django.conf import settings

from .choices import DistKind, NoiseKind
from .exceptions import DimensionMismatchError, DomainError, SizeCapError
from .links import make_ridge_function

logger = logging.getLogger(__name__)

SEED_MASK = (1 << 64) - 1

# Odd 64-bit multiplier (2**64 / golden ratio) spreading stream indices.
STREAM_MULTIPLIER = 0x9E3779B97F4A7C15

# Sub-Gaussian proxy recorded for every design kind: coordinates (or the
# whole vector after scaling) are bounded.
DESIGN_KX = 1.0

# Rows drawn per chunk when a caller streams a large sample.
CHUNK_ROWS = 10_000


def make_rng(seed):
    """Return a numpy Generator on a Philox stream keyed by ``seed``."""
    return np.random.Generator(np.random.Philox(int(seed) & SEED_MASK))


def derive_seed(master_seed, index):
    """
    Derive the stream seed ``master_seed ^ (index * STREAM_MULTIPLIER)`` modulo 2**64.

    Distinct indices give distinct, reproducible streams, so trials can be
    generated in any order or in parallel.
    """
    return (int(master_seed) ^ ((int(index) * STREAM_MULTIPLIER) & SEED_MASK)) & SEED_MASK


def cell_seed(master_seed, p, trial):
    """Seed of trial ``trial`` in the grid cell of dimension ``p``."""
    return derive_seed(master_seed, (int(p) << 32) | int(trial))


@dataclass
class Design:
    """
    An n x p design matrix whose rows are observations.

    Attributes:
        x (numpy.ndarray): The matrix, row i is X_i.
        dist_kind (str | None): Distribution the rows came from; None for user data.
        seed (int | None): Seed of the draw.
        atoms (numpy.ndarray | None): Support points of an atomic design.
    """
    x: np.ndarray
    dist_kind: str = None
    seed: int = None
    atoms: np.ndarray = None

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def p(self):
        return self.x.shape[1]

    @property
    def k_x(self):
        return DESIGN_KX

    @property
    def rank(self):
        return int(np.linalg.matrix_rank(self.x))


@dataclass
class Dataset:
    """
    Observations of the ridge model.

    Attributes:
        design (Design): Covariates.
        y (numpy.ndarray): Responses, ``f(x @ theta_star) + noise``.
        noise (numpy.ndarray | None): The sampled errors, kept for reuse.
        theta_star (numpy.ndarray | None): Ground truth, None for user data.
        ridge (RidgeFunction | None): Link used to generate ``y``.
        noise_kind (str): Noise distribution.
        noise_scale (float): sigma for gaussian, b for bounded_uniform.
        seed (int | None): Seed of the noise draw.
    """
    design: Design
    y: np.ndarray
    noise: np.ndarray = None
    theta_star: np.ndarray = None
    ridge: object = None
    noise_kind: str = NoiseKind.ZERO
    noise_scale: float = 0.0
    seed: int = None

    @property
    def x(self):
        return self.design.x

    @property
    def n(self):
        return self.design.n

    @property
    def p(self):
        return self.design.p

    @property
    def k_eps(self):
        return noise_proxy(self.noise_kind, self.noise_scale)

    @classmethod
    def from_arrays(cls, x, y, ridge=None):
        """Wrap user-supplied arrays; no ground truth is attached."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.shape[0] != x.shape[0]:
            raise DimensionMismatchError(
                f'y has {y.shape[0]} entries but x has {x.shape[0]} rows'
            )
        return cls(design=Design(x=x), y=y, ridge=ridge)


def noise_proxy(noise_kind, scale):
    """Sub-Gaussian proxy K_eps of a noise distribution."""
    noise_kind = NoiseKind(noise_kind)
    if noise_kind == NoiseKind.ZERO:
        return 0.0
    return float(scale)


def _check_size(n, p):
    if n < 1 or p < 1:
        raise DomainError(f'design needs n >= 1 and p >= 1, got n={n} p={p}')
    cap = settings.LAB_MAX_DESIGN_ENTRIES
    if n * p > cap:
        raise SizeCapError(f'design of {n}x{p} exceeds the cap of {cap} entries')


def draw_rows(rng, n, p, dist_kind, atoms=None):
    """Draw ``n`` design rows of length ``p`` from ``rng``."""
    dist_kind = DistKind(dist_kind)
    if dist_kind == DistKind.RADEMACHER:
        return rng.integers(0, 2, size=(n, p)).astype(float) * 2.0 - 1.0
    if dist_kind == DistKind.SPHERE_UNIFORM:
        g = rng.standard_normal((n, p))
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        return g * (np.sqrt(p) / norms)
    if atoms is None:
        raise DomainError('an atomic design needs its atoms')
    return atoms[rng.integers(0, atoms.shape[0], size=n)]


def sample_design(n, p, dist_kind=DistKind.RADEMACHER, seed=0):
    """
    Sample an isotropic design with rows of norm ``sqrt(p)``.

    Args:
        n (int): Number of observations.
        p (int): Number of parameters.
        dist_kind (str): ``rademacher`` or ``sphere_uniform``.
        seed (int): Unsigned 64-bit seed.

    Returns:
        Design: The sampled design. Its rank is reported, not enforced.
    """
    _check_size(n, p)
    dist_kind = DistKind(dist_kind)
    if dist_kind == DistKind.ATOMIC:
        raise DomainError('atomic designs are drawn with sample_atomic_design')
    x = draw_rows(make_rng(seed), n, p, dist_kind)
    return Design(x=x, dist_kind=dist_kind, seed=seed)


def sample_atoms(k, p, seed):
    """Draw ``k`` distinct-with-high-probability rademacher atoms in R^p."""
    _check_size(k, p)
    return draw_rows(make_rng(seed), k, p, DistKind.RADEMACHER)


def sample_atomic_design(n, atoms, seed):
    """Sample ``n`` rows uniformly among ``atoms``."""
    atoms = np.asarray(atoms, dtype=float)
    _check_size(n, atoms.shape[1])
    x = draw_rows(make_rng(seed), n, atoms.shape[1], DistKind.ATOMIC, atoms=atoms)
    return Design(x=x, dist_kind=DistKind.ATOMIC, seed=seed, atoms=atoms)


def sample_theta_star(p, target_norm, seed):
    """
    Sample a ground-truth parameter uniformly on the sphere of given radius.

    Args:
        p (int): Dimension.
        target_norm (float): Euclidean norm of the result, at least 0.
        seed (int): Unsigned 64-bit seed.

    Returns:
        numpy.ndarray: Vector of length ``p``.
    """
    if target_norm < 0:
        raise DomainError(f'target_norm must be nonnegative, got {target_norm!r}')
    if target_norm == 0:
        return np.zeros(p)
    g = make_rng(seed).standard_normal(p)
    return g * (float(target_norm) / np.linalg.norm(g))


def sample_noise(n, noise_kind, scale, rng):
    noise_kind = NoiseKind(noise_kind)
    if noise_kind == NoiseKind.ZERO:
        return np.zeros(n)
    if scale < 0:
        raise DomainError(f'noise scale must be nonnegative, got {scale!r}')
    if noise_kind == NoiseKind.GAUSSIAN:
        return rng.normal(0.0, scale, size=n)
    return rng.uniform(-scale, scale, size=n)


def synthesize(design, theta_star, ridge, noise_kind=NoiseKind.ZERO, noise_scale=0.0, seed=0):
    """
    Generate responses ``y = f(X @ theta_star) + noise``.

    Args:
        design (Design): Covariates.
        theta_star (array-like): Ground truth of length ``p``.
        ridge (RidgeFunction): Link function.
        noise_kind (str): ``gaussian``, ``bounded_uniform`` or ``zero``.
        noise_scale (float): sigma or bound b of the noise.
        seed (int): Seed of the noise stream.

    Returns:
        Dataset: The observations with the sampled noise stored alongside.
    """
    theta_star = np.asarray(theta_star, dtype=float).reshape(-1)
    if theta_star.shape[0] != design.p:
        raise DimensionMismatchError(
            f'theta_star has length {theta_star.shape[0]} but the design has p={design.p}'
        )
    noise = sample_noise(design.n, noise_kind, noise_scale, make_rng(seed))
    y = ridge.value(design.x @ theta_star) + noise
    return Dataset(
        design=design,
        y=y,
        noise=noise,
        theta_star=theta_star,
        ridge=ridge,
        noise_kind=NoiseKind(noise_kind),
        noise_scale=float(noise_scale),
        seed=seed,
    )


def _sidecar_path(csv_path):
    return Path(csv_path).with_suffix('.json')


def dump_dataset(dataset, csv_path):
    """
    Write a dataset as CSV plus a JSON sidecar.

    The CSV has header ``j0..j{p-1},y,eps`` and one row per observation; the
    sidecar (same name, ``.json`` suffix) holds sizes, seeds, kinds and theta_star.
    """
    csv_path = Path(csv_path)
    frame = pd.DataFrame(dataset.x, columns=[f'j{j}' for j in range(dataset.p)])
    frame['y'] = dataset.y
    frame['eps'] = dataset.noise if dataset.noise is not None else np.nan
    frame.to_csv(csv_path, index=False)

    ridge = dataset.ridge
    meta = {
        'n': dataset.n,
        'p': dataset.p,
        'seed': dataset.seed,
        'design_seed': dataset.design.seed,
        'dist_kind': dataset.design.dist_kind,
        'noise_kind': dataset.noise_kind,
        'noise_scale': dataset.noise_scale,
        'ridge_kind': ridge.kind if ridge is not None else None,
        'ridge_param': ridge.param if ridge is not None else None,
        'theta_star': None if dataset.theta_star is None else dataset.theta_star.tolist(),
    }
    _sidecar_path(csv_path).write_text(json.dumps(meta, indent=2))
    logger.info('dataset dumped path=%s n=%d p=%d', csv_path, dataset.n, dataset.p)


def load_dataset(csv_path):
    """Read back a dataset written by :func:`dump_dataset`."""
    csv_path = Path(csv_path)
    frame = pd.read_csv(csv_path)
    meta = json.loads(_sidecar_path(csv_path).read_text())

    p = int(meta['p'])
    x = frame[[f'j{j}' for j in range(p)]].to_numpy(dtype=float)
    if x.shape[0] != int(meta['n']):
        raise DimensionMismatchError(
            f'{csv_path} holds {x.shape[0]} rows but its sidecar declares n={meta["n"]}'
        )
    ridge = None
    if meta.get('ridge_kind'):
        ridge = make_ridge_function(meta['ridge_kind'], meta.get('ridge_param') or 0.0)
    theta_star = meta.get('theta_star')
    return Dataset(
        design=Design(x=x, dist_kind=meta.get('dist_kind'), seed=meta.get('design_seed')),
        y=frame['y'].to_numpy(dtype=float),
        noise=frame['eps'].to_numpy(dtype=float),
        theta_star=None if theta_star is None else np.asarray(theta_star, dtype=float),
        ridge=ridge,
        noise_kind=meta.get('noise_kind') or NoiseKind.ZERO,
        noise_scale=float(meta.get('noise_scale') or 0.0),
        seed=meta.get('seed'),
    )
