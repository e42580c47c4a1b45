"""
Enumerations shared by the numerical modules, config forms and models.

The values are the strings used in experiment config files.
"""
from django.db import models


class LinkKind(models.TextChoices):
    LINEAR = 'linear', 'Linear'
    TANH_TILT = 'tanh_tilt', 'Tanh tilt'
    SCALED_SOFTSIGN = 'scaled_softsign', 'Scaled softsign'


class LossKind(models.TextChoices):
    QUADRATIC = 'quadratic', 'Quadratic'
    PSEUDO_HUBER = 'pseudo_huber', 'Pseudo-Huber'


class DistKind(models.TextChoices):
    RADEMACHER = 'rademacher', 'Rademacher'
    SPHERE_UNIFORM = 'sphere_uniform', 'Uniform on the sqrt(p) sphere'
    ATOMIC = 'atomic', 'Uniform over rademacher atoms'


class NoiseKind(models.TextChoices):
    GAUSSIAN = 'gaussian', 'Gaussian'
    BOUNDED_UNIFORM = 'bounded_uniform', 'Bounded uniform'
    ZERO = 'zero', 'No noise'


class Regime(models.TextChoices):
    UNDER = 'under', 'Underparametrised'
    OVER = 'over', 'Overparametrised'


class Orientation(models.TextChoices):
    ROWS = 'rows', 'Independent rows'
    COLUMNS = 'columns', 'Independent columns'


class Experiment(models.TextChoices):
    SWEEP = 'sweep', 'Double-descent sweep'
    RMT = 'rmt', 'Singular value concentration'
    COUPON = 'coupon', 'Coupon collector'
    GENERALIZATION = 'generalization', 'Generalization bound'
    CALIBRATE = 'calibrate', 'Constant calibration'
    BOUNDS = 'bounds', 'Bound table'


class RunStatus(models.TextChoices):
    RUNNING = 'running', 'Running'
    SUCCEEDED = 'succeeded', 'Succeeded'
    FAILED = 'failed', 'Failed'
