import logging

from django.core.management.base import BaseCommand, CommandError
from django.db import DatabaseError
from django.utils import timezone

from ridgeapp import reports
from ridgeapp.choices import Experiment, RunStatus
from ridgeapp.exceptions import ConfigError, LabError
from ridgeapp.forms import load_config
from ridgeapp.lab import CalibrationReport, run_experiment
from ridgeapp.models import ExperimentRun

logger = logging.getLogger(__name__)

CONFIG_ERROR_CODE = 2
IO_ERROR_CODE = 3


class Command(BaseCommand):
    help = (
        'Run a seeded Monte Carlo campaign and write records.csv, summary.csv '
        'and meta.json to the output directory.'
    )

    def add_arguments(self, parser):
        parser.add_argument('experiment', choices=Experiment.values)
        parser.add_argument('--config', required=True, help='JSON experiment config.')
        parser.add_argument('--seed', type=int, help='Unsigned 64-bit master seed.')
        parser.add_argument('--out', help='Output directory.')
        parser.add_argument('--threads', type=int, help='Worker threads for trial cells.')
        parser.add_argument(
            '--calibration',
            help='constants.json from a calibrate run; replaces C, C_KX and c_KX.',
        )

    def handle(self, *args, **options):
        try:
            cfg = load_config(
                options['config'],
                experiment=options['experiment'],
                master_seed=options['seed'],
                output_path=options['out'],
                threads=options['threads'],
            )
            calibration = None
            if options['calibration']:
                calibration = CalibrationReport.from_file(options['calibration'])
        except ConfigError as exc:
            raise CommandError(str(exc), returncode=CONFIG_ERROR_CODE) from exc
        except (OSError, ValueError) as exc:
            # ValueError covers a calibration file that is not JSON
            code = IO_ERROR_CODE if isinstance(exc, OSError) else CONFIG_ERROR_CODE
            raise CommandError(f'cannot read input: {exc}', returncode=code) from exc

        run = self._start_run(cfg)
        try:
            outcome = run_experiment(cfg, calibration=calibration)
        except LabError as exc:
            self._finish_run(run, RunStatus.FAILED, error=str(exc))
            raise CommandError(str(exc), returncode=CONFIG_ERROR_CODE) from exc
        except OSError as exc:
            self._finish_run(run, RunStatus.FAILED, error=str(exc))
            raise CommandError(f'cannot write outputs: {exc}', returncode=IO_ERROR_CODE) from exc

        self._finish_run(
            run,
            RunStatus.SUCCEEDED,
            wall_seconds=outcome.wall_seconds,
            records_count=outcome.records,
        )
        self.stdout.write(self.style.SUCCESS(
            f'{outcome.experiment}: {outcome.records} records in {outcome.out_dir} '
            f'({outcome.wall_seconds:.2f}s)'
        ))

    def _start_run(self, cfg):
        """Record the run; a missing table only costs the record."""
        try:
            return ExperimentRun.objects.create(
                experiment=cfg.experiment,
                config=reports.jsonable(cfg),
                master_seed=str(cfg.master_seed),
                output_dir=str(cfg.out_dir),
                git_hash=reports.git_hash() or '',
            )
        except DatabaseError as exc:
            logger.warning('run not recorded error=%s', exc)
            return None

    def _finish_run(self, run, status, **fields):
        if run is None:
            return
        run.status = status
        run.finished_at = timezone.now()
        for name, value in fields.items():
            setattr(run, name, value)
        try:
            run.save()
        except DatabaseError as exc:
            logger.warning('run %s not updated error=%s', run.id, exc)
