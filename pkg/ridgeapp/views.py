import logging
from pathlib import Path

import pandas as pd
from django.shortcuts import get_object_or_404, render

from .models import ExperimentRun
from .reports import SUMMARY_FILE

logger = logging.getLogger(__name__)


def run_list(request):
    """
    List recorded campaigns, newest first.

    Args:
        request (HttpRequest): The HTTP request object.

    Returns:
        HttpResponse: The rendered run list.
    """
    runs = ExperimentRun.objects.all()
    return render(request, 'run_list.html', {'runs': runs})


def run_detail(request, run_id):
    """
    Show one campaign with its summary.csv rendered as a table.

    A missing or unreadable summary leaves the table empty.

    Args:
        request (HttpRequest): The HTTP request object.
        run_id (int): The ID of the run.

    Returns:
        HttpResponse: The rendered detail page.
    """
    run = get_object_or_404(ExperimentRun, id=run_id)
    columns, rows = [], []
    summary_path = Path(run.output_dir) / SUMMARY_FILE
    if summary_path.is_file():
        try:
            frame = pd.read_csv(summary_path)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
            logger.warning('summary unreadable run=%d path=%s error=%s', run.id, summary_path, exc)
        else:
            columns = list(frame.columns)
            rows = frame.to_numpy().tolist()

    context = {
        'run': run,
        'columns': columns,
        'rows': rows,
    }
    return render(request, 'run_detail.html', context)
