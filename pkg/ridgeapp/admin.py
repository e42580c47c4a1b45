from django.contrib import admin

from .models import ExperimentRun


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = ('experiment', 'master_seed', 'status', 'records_count', 'wall_seconds', 'started_at')
    list_filter = ('experiment', 'status')
    readonly_fields = ('started_at',)
