"""Integration tests for the benchmark command line.

These tests verify end-to-end workflows including:
- Running a small study from a config file
- Byte-identical results for a fixed seed
- Rebuilding summaries from a records file
- Exit codes on bad input
"""

import json

import pytest

# Add app directory to path
import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent / 'app'))

from bench import main
from report import read_records
from services import records_frame


@pytest.fixture
def study_config(tmp_path, small_config_values):
    """The small study written as a key = value file."""
    path = tmp_path / 'small.cfg'
    path.write_text(''.join(f"{key} = {value}\n" for key, value in small_config_values.items()))
    return path


class TestRunCommand:
    """Tests for `bench run`."""

    def test_byte_identical_results(self, study_config, tmp_path):
        """Test that two runs with the same seed write identical files."""
        first, second = tmp_path / 'first', tmp_path / 'second'

        assert main(['run', '--config', str(study_config), '--out', str(first)]) == 0
        assert main(['run', '--config', str(study_config), '--out', str(second)]) == 0

        for name in ('records.csv', 'summary.csv', 'envelopes.csv', 'fit_points.csv'):
            assert (first / name).read_bytes() == (second / name).read_bytes()
        assert len(read_records(first)) == 12

    def test_cli_overrides(self, study_config, tmp_path):
        """Test that flags win over the config file."""
        out = tmp_path / 'out'

        code = main(['run', '--config', str(study_config), '--out', str(out), '--seed', '7', '--runs', '1', '--estimators', 'eb'])

        assert code == 0
        manifest = json.loads((out / 'manifest.json').read_text())
        assert manifest['master_seed'] == 7
        assert manifest['config']['estimators'] == ['EB']
        assert [(r.run_index, r.estimator) for r in read_records(out)] == [(0, 'EB')]

    def test_dump_chains(self, study_config, tmp_path):
        """Test that --dump-chains writes the FB chain."""
        out = tmp_path / 'out'

        assert main(['run', '--config', str(study_config), '--out', str(out), '--runs', '1',
                     '--estimators', 'fb', '--dump-chains']) == 0

        assert (out / 'chains' / 'run0000_FB.csv').exists()

    def test_environment_out_dir(self, study_config, tmp_path, monkeypatch):
        """Test BENCH_OUT_DIR as the default output directory."""
        monkeypatch.setenv('BENCH_OUT_DIR', str(tmp_path / 'from-env'))

        assert main(['run', '--config', str(study_config), '--runs', '1', '--estimators', 'eb']) == 0

        assert (tmp_path / 'from-env' / 'records.csv').exists()

    def test_unknown_preset(self, tmp_path, capsys):
        """Test exit code 1 and a message for an unknown preset."""
        assert main(['run', '--preset', 'huge', '--out', str(tmp_path)]) == 1
        assert 'Unknown preset' in capsys.readouterr().err

    def test_paper_preset(self, tmp_path):
        """Test that the paper-scale preset is accepted and recorded in the manifest."""
        out = tmp_path / 'out'

        assert main(['run', '--preset', 'paper', '--runs', '1', '--estimators', 'eb', '--out', str(out)]) == 0

        manifest = json.loads((out / 'manifest.json').read_text())
        assert manifest['config']['samples_N'] == 7200
        assert manifest['config']['fb_burn_in'] == 3000

    def test_missing_config(self, tmp_path):
        """Test exit code 1 for a missing config file."""
        assert main(['run', '--config', str(tmp_path / 'missing.cfg'), '--out', str(tmp_path)]) == 1

    def test_invalid_value(self, tmp_path):
        """Test exit code 1 for T <= n."""
        path = tmp_path / 'bad.cfg'
        path.write_text("T = 10\nn = 20\n")

        assert main(['run', '--config', str(path), '--out', str(tmp_path / 'out')]) == 1

    def test_missing_subcommand(self):
        """Test that argparse rejects a missing command."""
        with pytest.raises(SystemExit):
            main([])


class TestSummarizeCommand:
    """Tests for `bench summarize`."""

    def test_rebuilds_summary(self, study_config, tmp_path):
        """Test that summarize reproduces the summary of a finished study."""
        out = tmp_path / 'out'
        main(['run', '--config', str(study_config), '--out', str(out), '--estimators', 'eb,pem-bic'])
        original = (out / 'summary.csv').read_bytes()
        (out / 'summary.csv').unlink()

        assert main(['summarize', '--in', str(out)]) == 0

        assert (out / 'summary.csv').read_bytes() == original

    def test_missing_records(self, tmp_path):
        """Test exit code 1 when there is nothing to summarize."""
        assert main(['summarize', '--in', str(tmp_path)]) == 1


@pytest.mark.slow
class TestDeskStudy:
    """Estimator and confidence-set ordering of `bench run --preset desk --seed 42`."""

    @pytest.fixture(scope='class')
    def desk_frame(self, tmp_path_factory):
        out = tmp_path_factory.mktemp('desk')
        assert main(['run', '--preset', 'desk', '--seed', '42', '--jobs', '4', '--out', str(out)]) == 0
        return records_frame(read_records(out))

    def test_fit_ordering(self, desk_frame):
        """Test mean fit: EB and FB close and high, PEM+BIC well below, PEM+OR near EB."""
        fits = desk_frame.dropna(subset=['fit']).drop_duplicates(subset=['run_index', 'estimator'])
        mean_fit = fits.groupby('estimator')['fit'].mean()

        assert 70.0 <= mean_fit['EB'] <= 86.0
        assert 70.0 <= mean_fit['FB'] <= 86.0
        assert abs(mean_fit['EB'] - mean_fit['FB']) <= 3.0
        assert mean_fit['PEM+BIC'] <= mean_fit['EB'] - 8.0
        assert mean_fit['PEM+OR'] >= mean_fit['EB'] - 2.0

    def test_set_size_ordering(self, desk_frame):
        """Test median set size: EB < FB < every PEM set, and LIK < ASYMP per PEM estimator."""
        size = desk_frame.dropna(subset=['set_size']).groupby(['estimator', 'variant'])['set_size'].median()
        pem = [size[('PEM+OR', 'ASYMP')], size[('PEM+OR', 'LIK')], size[('PEM+BIC', 'ASYMP')], size[('PEM+BIC', 'LIK')]]

        assert size[('EB', 'ELLIPSOID')] < size[('FB', 'MIXTURE')] < min(pem)
        assert size[('PEM+OR', 'LIK')] < size[('PEM+OR', 'ASYMP')]
        assert size[('PEM+BIC', 'LIK')] < size[('PEM+BIC', 'ASYMP')]

    def test_coverage_ordering(self, desk_frame):
        """Test median coverage index of EB and FB not above either PEM+BIC set."""
        coverage = desk_frame.dropna(subset=['coverage']).groupby(['estimator', 'variant'])['coverage'].median()
        pem_bic = min(coverage[('PEM+BIC', 'ASYMP')], coverage[('PEM+BIC', 'LIK')])

        assert coverage[('EB', 'ELLIPSOID')] <= pem_bic
        assert coverage[('FB', 'MIXTURE')] <= pem_bic

    def test_failures_are_rare(self, desk_frame):
        """Test that at most one record of the study carries an error."""
        assert desk_frame['error'].notna().sum() <= 1
