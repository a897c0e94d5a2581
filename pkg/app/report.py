"""Result files: records, summaries, plot data and the run manifest."""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import pandas as pd

from services import METRICS, SUMMARY_COLUMNS, fit_table, records_frame, summarize_records
from settings import BenchConfig
from sysid import __version__
from sysid.estimators import RECORD_COLUMNS, Envelope, RunRecord

logger = logging.getLogger(__name__)

RECORDS_FILE = 'records.csv'
SUMMARY_FILE = 'summary.csv'
SUMMARY_TEXT_FILE = 'summary.txt'
ENVELOPES_FILE = 'envelopes.csv'
MANIFEST_FILE = 'manifest.json'
FIVE_NUMBER_COLUMNS = ['estimator', 'variant', 'min', 'q1', 'median', 'q3', 'max', 'count']
POINT_COLUMNS = ['run_index', 'estimator', 'variant', 'value']
ENVELOPE_COLUMNS = ['run_index', 'estimator', 'variant', 'tap', 'true', 'estimate', 'lower', 'upper']


class ReportError(OSError):
    """A result file could not be written or read."""


def _write_csv(frame: pd.DataFrame, path: Path) -> None:
    try:
        frame.to_csv(path, index=False)
    except OSError as e:
        raise ReportError(f"Cannot write {path}: {e}") from e


def _write_text(text: str, path: Path) -> None:
    try:
        path.write_text(text)
    except OSError as e:
        raise ReportError(f"Cannot write {path}: {e}") from e


def render_summary_text(records: List[RunRecord], summary: pd.DataFrame) -> str:
    """Human-readable summary: average fit per estimator, then the boxplot statistics."""
    lines = ['Average impulse-response fit', '']
    table = fit_table(records)
    if table.empty:
        lines.append('(no records)')
    else:
        lines.append(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    lines.extend(['', 'Fit, coverage and set size per estimator and variant', ''])
    if summary.empty:
        lines.append('(no records)')
    else:
        lines.append(summary.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return '\n'.join(lines) + '\n'


def write_summary(records: List[RunRecord], out_dir: Path, summary: Optional[pd.DataFrame] = None) -> List[str]:
    """Write summary.csv, summary.txt and the boxplot data of fit, coverage and set size.

    Returns:
        Names of the files written
    """
    out_dir = Path(out_dir)
    summary = summary if summary is not None else summarize_records(records)
    _write_csv(summary, out_dir / SUMMARY_FILE)
    _write_text(render_summary_text(records, summary), out_dir / SUMMARY_TEXT_FILE)
    written = [SUMMARY_FILE, SUMMARY_TEXT_FILE]

    frame = records_frame(records)
    for metric in METRICS:
        five_number = summary[summary['metric'] == metric] if not summary.empty else summary
        five_number = five_number.reindex(columns=FIVE_NUMBER_COLUMNS)
        _write_csv(five_number, out_dir / f"{metric}_boxplot.csv")

        if frame.empty:
            points = pd.DataFrame(columns=POINT_COLUMNS)
        else:
            points = frame.dropna(subset=[metric])[['run_index', 'estimator', 'variant', metric]]
            points = points.rename(columns={metric: 'value'})
        _write_csv(points, out_dir / f"{metric}_points.csv")
        written.extend([f"{metric}_boxplot.csv", f"{metric}_points.csv"])
    return written


def emit_report(
    records: List[RunRecord],
    summary: pd.DataFrame,
    out_dir: Path,
    config: Optional[BenchConfig] = None,
    envelopes: Iterable[Envelope] = (),
) -> List[str]:
    """Write every result file of a study into ``out_dir``.

    Args:
        records: All run records
        summary: Output of ``summarize_records``
        out_dir: Target directory (created if missing)
        config: Configuration recorded in the manifest
        envelopes: Per-run confidence-set envelopes

    Returns:
        Names of the files written

    Raises:
        ReportError: If a file cannot be written (the message names the path)
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportError(f"Cannot create {out_dir}: {e}") from e

    records = list(records)
    _write_csv(records_frame(records), out_dir / RECORDS_FILE)
    written = [RECORDS_FILE]
    written.extend(write_summary(records, out_dir, summary))

    rows = [row for envelope in envelopes for row in envelope.to_rows()]
    _write_csv(pd.DataFrame(rows, columns=ENVELOPE_COLUMNS), out_dir / ENVELOPES_FILE)
    written.append(ENVELOPES_FILE)

    warnings = []
    if not records:
        warnings.append('No records were produced; result files contain headers only')
        logger.warning(f"[Report] {warnings[-1]}")
    manifest: Dict[str, Any] = {
        'version': __version__,
        'master_seed': config.master_seed if config is not None else None,
        'config': config.model_dump() if config is not None else None,
        'records': len(records),
        'metrics': METRICS,
        'files': written + [MANIFEST_FILE],
        'warnings': warnings,
    }
    _write_text(json.dumps(manifest, indent=2, sort_keys=True) + '\n', out_dir / MANIFEST_FILE)
    written.append(MANIFEST_FILE)
    logger.info(f"[Report] Wrote {len(written)} files to {out_dir}")
    return written


def read_records(path: Path) -> List[RunRecord]:
    """Parse a records CSV (a file or a directory containing records.csv).

    Raises:
        ReportError: If the file is missing or lacks required columns
    """
    path = Path(path)
    if path.is_dir():
        path = path / RECORDS_FILE
    try:
        frame = pd.read_csv(path, float_precision='round_trip', dtype={'estimator': str, 'variant': str, 'error': str})
    except (OSError, pd.errors.EmptyDataError) as e:
        raise ReportError(f"Cannot read {path}: {e}") from e
    missing = set(RECORD_COLUMNS) - set(frame.columns)
    if missing:
        raise ReportError(f"{path} is missing columns: {sorted(missing)}")
    return [RunRecord.from_dict(row) for row in frame.to_dict('records')]


def read_manifest(out_dir: Path) -> Dict[str, Any]:
    path = Path(out_dir) / MANIFEST_FILE
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError) as e:
        raise ReportError(f"Cannot read {path}: {e}") from e
