from django.db import models

from .choices import Experiment, RunStatus


class ExperimentRun(models.Model):
    """
    One campaign launched from the ``lab`` command.

    Attributes:
        experiment (str): Campaign kind.
        config (dict): The validated config, as written to ``meta.json``.
        master_seed (str): Unsigned 64-bit master seed, stored as text.
        output_dir (str): Directory holding records.csv, summary.csv and meta.json.
        status (str): running, succeeded or failed.
        started_at (DateTimeField): When the command started the campaign.
        finished_at (DateTimeField): When it ended, successfully or not.
        wall_seconds (float): Wall-clock duration.
        records_count (int): Data rows in records.csv.
        git_hash (str): Commit of the code that produced the run.
        error (str): Message of the failure, if any.
    """
    experiment = models.CharField(max_length=20, choices=Experiment.choices)
    config = models.JSONField(default=dict)
    master_seed = models.CharField(max_length=20)
    output_dir = models.CharField(max_length=500)
    status = models.CharField(max_length=10, choices=RunStatus.choices, default=RunStatus.RUNNING)
    started_at = models.DateTimeField(auto_now_add=True)
    finished_at = models.DateTimeField(null=True, blank=True)
    wall_seconds = models.FloatField(null=True, blank=True)
    records_count = models.PositiveIntegerField(default=0)
    git_hash = models.CharField(max_length=40, blank=True)
    error = models.TextField(blank=True)

    class Meta:
        ordering = ['-started_at']

    def __str__(self):
        return f'{self.experiment} seed={self.master_seed} ({self.status})'
