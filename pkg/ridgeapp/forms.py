import json
import math
from dataclasses import asdict
from pathlib import Path

from django import forms
from django.conf import settings

from .bounds import BoundParams
from .choices import DistKind, Experiment, LinkKind, LossKind, NoiseKind
from .exceptions import ConfigError, DomainError
from .lab import ExperimentConfig
from .links import make_loss, make_ridge_function

U64_MAX = (1 << 64) - 1

# Bound constants implied by the link and loss.
MODEL_CONSTANTS = ('c_fprime', 'c_lsecond')


class BoundParamsForm(forms.Form):
    """
    Validates the ``bp`` block of an experiment config.

    Every constant must be strictly positive and ``alpha`` must lie in [0, 1];
    the checks are those of :class:`BoundParams` itself.
    """
    c_abs = forms.FloatField()
    c_kx = forms.FloatField()
    c_kx_small = forms.FloatField()
    k_x = forms.FloatField()
    k_eps = forms.FloatField()
    alpha = forms.FloatField()
    delta = forms.FloatField()
    c_lsecond = forms.FloatField()
    c_fprime = forms.FloatField()

    def clean(self):
        cleaned = super().clean()
        if self.errors:
            return cleaned
        try:
            cleaned['params'] = BoundParams(**cleaned)
        except DomainError as exc:
            raise forms.ValidationError(str(exc)) from exc
        return cleaned


class ExperimentConfigForm(forms.Form):
    """
    Validates a whole experiment config.

    List-valued entries (``p_grid``, ``alpha_grid``, ``coupon_probs``) and the
    nested ``bp`` block arrive as JSON values.
    """
    experiment = forms.ChoiceField(choices=Experiment.choices)
    n = forms.IntegerField(min_value=1)
    p_grid = forms.JSONField()
    trials = forms.IntegerField(min_value=1)
    ridge_kind = forms.ChoiceField(choices=LinkKind.choices)
    ridge_param = forms.FloatField()
    loss_kind = forms.ChoiceField(choices=LossKind.choices)
    loss_param = forms.FloatField()
    dist_kind = forms.ChoiceField(choices=DistKind.choices)
    noise_kind = forms.ChoiceField(choices=NoiseKind.choices)
    noise_scale = forms.FloatField(min_value=0.0)
    theta_star_norm = forms.FloatField(min_value=0.0)
    bp = forms.JSONField(required=False)
    master_seed = forms.IntegerField(min_value=0, max_value=U64_MAX)
    output_path = forms.CharField(required=False)
    threads = forms.IntegerField(min_value=1)
    warm_start = forms.BooleanField(required=False)
    step = forms.FloatField()
    max_iter = forms.IntegerField(min_value=0)
    alpha_grid = forms.JSONField()
    coupon_probs = forms.JSONField()
    coupon_t = forms.FloatField(min_value=0.0)
    coupon_runs = forms.IntegerField(min_value=1)
    cover_eps = forms.FloatField()
    n_atoms = forms.IntegerField(min_value=1)
    generalization_t = forms.FloatField()
    risk_samples = forms.IntegerField(min_value=0)
    bootstrap_samples = forms.IntegerField(min_value=0)
    export_traces = forms.BooleanField(required=False)

    def clean_p_grid(self):
        grid = self.cleaned_data['p_grid']
        if not isinstance(grid, list) or not grid:
            raise forms.ValidationError('p_grid must be a nonempty list of integers.')
        if not all(isinstance(p, int) and not isinstance(p, bool) and p >= 1 for p in grid):
            raise forms.ValidationError('Every p must be a positive integer.')
        if grid != sorted(grid):
            raise forms.ValidationError('p_grid must be sorted in increasing order.')
        return grid

    def clean_alpha_grid(self):
        grid = self.cleaned_data['alpha_grid']
        if not isinstance(grid, list) or not grid:
            raise forms.ValidationError('alpha_grid must be a nonempty list.')
        if not all(isinstance(a, (int, float)) and 0.0 <= a < 1.0 for a in grid):
            raise forms.ValidationError('Every alpha must lie in [0, 1).')
        return [float(a) for a in grid]

    def clean_coupon_probs(self):
        vectors = self.cleaned_data['coupon_probs']
        if not isinstance(vectors, list) or not vectors:
            raise forms.ValidationError('coupon_probs must be a nonempty list of vectors.')
        for probs in vectors:
            if not isinstance(probs, list) or not probs:
                raise forms.ValidationError('Every coupon vector must be a nonempty list.')
            if not all(isinstance(q, (int, float)) and q > 0 for q in probs):
                raise forms.ValidationError('Coupon probabilities must be positive.')
            if not math.isclose(sum(probs), 1.0, abs_tol=1e-10):
                raise forms.ValidationError(f'Coupon probabilities {probs} do not sum to 1.')
        return [[float(q) for q in probs] for probs in vectors]

    def clean_bp(self):
        block = self.cleaned_data.get('bp') or {}
        if not isinstance(block, dict):
            raise forms.ValidationError('bp must be an object.')
        defaults = asdict(BoundParams())
        unknown = sorted(set(block) - set(defaults))
        if unknown:
            raise forms.ValidationError(f'Unknown bound constants: {", ".join(unknown)}.')
        derived = [key for key in MODEL_CONSTANTS if key in block]
        if derived:
            raise forms.ValidationError(
                f'{", ".join(derived)} follow from ridge_kind and loss_kind and cannot be set.'
            )
        form = BoundParamsForm(data={**defaults, **block})
        if not form.is_valid():
            raise forms.ValidationError(
                [f'{key}: {message}' for key, messages in form.errors.items() for message in messages]
            )
        return form.cleaned_data['params']

    def clean_step(self):
        step = self.cleaned_data['step']
        if not 0.0 < step <= 1.0:
            raise forms.ValidationError('step must lie in (0, 1].')
        return step

    def clean_cover_eps(self):
        value = self.cleaned_data['cover_eps']
        if not value > 0:
            raise forms.ValidationError('cover_eps must be positive.')
        return value

    def clean_generalization_t(self):
        value = self.cleaned_data['generalization_t']
        if not value > 0:
            raise forms.ValidationError('generalization_t must be positive.')
        return value

    def clean(self):
        cleaned = super().clean()
        if 'ridge_kind' in cleaned and 'ridge_param' in cleaned:
            try:
                make_ridge_function(cleaned['ridge_kind'], cleaned['ridge_param'])
            except DomainError as exc:
                self.add_error('ridge_param', str(exc))
        if 'loss_kind' in cleaned and 'loss_param' in cleaned:
            try:
                make_loss(cleaned['loss_kind'], cleaned['loss_param'])
            except DomainError as exc:
                self.add_error('loss_param', str(exc))
        block = self.data.get('bp') or {}
        noisy = (cleaned.get('noise_kind') not in (None, NoiseKind.ZERO)
                 and cleaned.get('noise_scale', 0.0) > 0)
        if isinstance(block, dict) and 'k_eps' in block and noisy:
            self.add_error('bp', 'k_eps follows from noise_kind and noise_scale; set it only without noise.')
        return cleaned


def config_defaults():
    """Default values of every config key, as plain JSON-compatible data."""
    defaults = asdict(ExperimentConfig())
    defaults['experiment'] = str(defaults['experiment'])
    # clean_bp fills in the BoundParams defaults
    defaults['bp'] = {}
    defaults['threads'] = settings.LAB_DEFAULT_THREADS
    return defaults


def build_config(payload, **overrides):
    """
    Validate a config mapping and build an :class:`ExperimentConfig`.

    Missing keys take their defaults; ``overrides`` whose value is not None
    replace both.

    Raises:
        ConfigError: On unknown keys or failed validation; ``errors`` holds the
            form's error dict.
    """
    if not isinstance(payload, dict):
        raise ConfigError('an experiment config must be a JSON object')
    unknown = sorted(set(payload) - set(ExperimentConfig.field_names()))
    if unknown:
        raise ConfigError(
            f'unknown config keys: {", ".join(unknown)}',
            errors={key: ['Unknown key.'] for key in unknown},
        )
    data = config_defaults()
    data.update(payload)
    data.update({key: value for key, value in overrides.items() if value is not None})

    form = ExperimentConfigForm(data=data)
    if not form.is_valid():
        errors = form.errors.get_json_data()
        summary = '; '.join(
            f'{key}: {error["message"]}' for key, items in errors.items() for error in items
        )
        raise ConfigError(f'invalid experiment config: {summary}', errors=errors)
    return ExperimentConfig(**form.cleaned_data)


def load_config(path, **overrides):
    """
    Read a JSON config file.

    Raises:
        OSError: If the file cannot be read.
        ConfigError: If it is not valid JSON or fails validation.
    """
    path = Path(path)
    text = path.read_text()
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f'{path} is not valid JSON: {exc}') from exc
    return build_config(payload, **overrides)
