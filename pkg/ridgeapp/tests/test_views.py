import shutil
import tempfile
from pathlib import Path

from django.test import Client, TestCase
from django.urls import reverse

from ridgeapp.choices import Experiment, RunStatus
from ridgeapp.models import ExperimentRun


class ViewsTest(TestCase):
    def setUp(self):
        """Set up a finished run with a summary file."""
        self.client = Client()
        self.tmp = Path(tempfile.mkdtemp())
        (self.tmp / 'summary.csv').write_text('p,median_est_error\n20,0.167\n1600,0.189\n')
        self.run = ExperimentRun.objects.create(
            experiment=Experiment.SWEEP,
            master_seed='7',
            output_dir=str(self.tmp),
            status=RunStatus.SUCCEEDED,
            records_count=100,
        )

    def tearDown(self):
        """Clean up the run directory."""
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_run_list(self):
        """Test that the run list shows recorded runs."""
        response = self.client.get(reverse('run_list'))
        self.assertEqual(response.status_code, 200)
        self.assertTemplateUsed(response, 'run_list.html')
        self.assertIn(self.run, response.context['runs'])
        self.assertContains(response, reverse('run_detail', args=[self.run.id]))

    def test_empty_run_list(self):
        """Test the run list without any run."""
        ExperimentRun.objects.all().delete()
        response = self.client.get(reverse('run_list'))
        self.assertContains(response, 'No runs recorded yet.')

    def test_run_detail(self):
        """Test that the detail page renders summary.csv."""
        response = self.client.get(reverse('run_detail', args=[self.run.id]))
        self.assertEqual(response.status_code, 200)
        self.assertTemplateUsed(response, 'run_detail.html')
        self.assertEqual(response.context['columns'], ['p', 'median_est_error'])
        self.assertEqual(len(response.context['rows']), 2)
        self.assertContains(response, '<th>median_est_error</th>', html=True)

    def test_run_detail_without_summary(self):
        """Test the detail page of a run whose outputs are gone."""
        (self.tmp / 'summary.csv').unlink()
        response = self.client.get(reverse('run_detail', args=[self.run.id]))
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.context['columns'], [])
        self.assertContains(response, 'No summary available.')

    def test_run_detail_not_found(self):
        """Test an unknown run id."""
        response = self.client.get(reverse('run_detail', args=[self.run.id + 1]))
        self.assertEqual(response.status_code, 404)
