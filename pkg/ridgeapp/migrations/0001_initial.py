# Generated by Django 5.2 on 2026-10-18 09:12

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('experiment', models.CharField(choices=[('sweep', 'Double-descent sweep'), ('rmt', 'Singular value concentration'), ('coupon', 'Coupon collector'), ('generalization', 'Generalization bound'), ('calibrate', 'Constant calibration'), ('bounds', 'Bound table')], max_length=20)),
                ('config', models.JSONField(default=dict)),
                ('master_seed', models.CharField(max_length=20)),
                ('output_dir', models.CharField(max_length=500)),
                ('status', models.CharField(choices=[('running', 'Running'), ('succeeded', 'Succeeded'), ('failed', 'Failed')], default='running', max_length=10)),
                ('started_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
                ('wall_seconds', models.FloatField(blank=True, null=True)),
                ('records_count', models.PositiveIntegerField(default=0)),
                ('git_hash', models.CharField(blank=True, max_length=40)),
                ('error', models.TextField(blank=True)),
            ],
            options={
                'ordering': ['-started_at'],
            },
        ),
    ]
