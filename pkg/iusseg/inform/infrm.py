"""
Reports over finished runs: the per-patient comparison of training modes.

report() reads the cases.csv and config.json of every run directory and
writes

    patients.csv          one row per case, one column per (metric, mode),
                          plus a 'flag' naming the modes a case is missing in
    aggregate_<mode>.json AggregateReport of all cases of a mode
    comparison.txt        mean +- std per metric and mode, side by side

Cases evaluated in one mode only are kept and flagged.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import pandas as pd

from iusseg.log.log import logger
from iusseg.metrics.mtrc import AggregateReport, CaseReport, CASE_COLUMNS, METRICS, aggregate, read_case_reports, \
    reports_frame, write_aggregate, NA


class ReportError(Exception):
    def __init__(self, reason, run_dir=None):
        self.reason = reason
        self.run_dir = run_dir

    def __str__(self):
        if self.run_dir:
            return 'Cannot report on run %s: %s' % (self.run_dir, self.reason)
        return 'Cannot report: %s' % self.reason


@dataclass
class ReportBundle:
    patients: pd.DataFrame
    aggregates: Dict[str, AggregateReport]
    table: str
    flagged: List[str] = field(default_factory=list)


def read_run(run_dir: str, cases_file: str = 'cases.csv') -> Tuple[str, List[CaseReport]]:
    """Mode and case reports of a run."""
    config = os.path.join(run_dir, 'config.json')
    cases = os.path.join(run_dir, cases_file)
    if not os.path.isfile(cases):
        raise ReportError('no %s (did the run fail?)' % cases_file, run_dir)
    try:
        with open(config, 'r') as fr:
            mode = json.load(fr)['mode']
    except (OSError, ValueError, KeyError) as e:
        raise ReportError('unreadable config.json (%s)' % e, run_dir)
    return mode, read_case_reports(cases)


def comparison_table(aggregates: Dict[str, AggregateReport]) -> str:
    modes = sorted(aggregates)
    header = '%-18s' % 'metric' + ''.join('%24s' % m for m in modes)
    lines = [header, '-' * len(header)]
    for metric in METRICS:
        cells = []
        for m in modes:
            mean, std = aggregates[m].mean[metric], aggregates[m].std[metric]
            cells.append('%24s' % (NA if mean is None else '%.4f +- %.4f' % (mean, std)))
        lines.append('%-18s' % metric + ''.join(cells))
    lines.append('%-18s' % 'cases' + ''.join('%24d' % aggregates[m].n_cases for m in modes))
    return '\n'.join(lines) + '\n'


def report(runs: Sequence[str], output_dir: str, cases_file: str = 'cases.csv') -> ReportBundle:
    """Compare the runs' case reports across training modes.

    Args:
        runs (list):       run directories
        output_dir (str):  receives patients.csv, aggregate_<mode>.json and
                           comparison.txt
        cases_file (str):  'cases.csv', or 'cases_fine.csv' to compare
                           against fine labels

    Raises:
        ReportError: without runs, for unreadable runs, or for a case that
                     appears twice within one mode

    Returns:
        ReportBundle
    """
    if len(runs) == 0:
        raise ReportError('no runs given')
    by_mode = {}
    for r in runs:
        mode, reports = read_run(r, cases_file)
        by_mode.setdefault(mode, []).extend(reports)
    frames = []
    for mode, reports in by_mode.items():
        df = reports_frame(reports)
        df.insert(0, 'mode', mode)
        frames.append(df)
    cases = pd.concat(frames, ignore_index=True)
    duplicated = cases[cases.duplicated(['mode', 'case_id'], keep=False)]
    if len(duplicated):
        raise ReportError('cases %s appear more than once within a mode'
                          % sorted(set(duplicated['case_id'])))
    modes = sorted(by_mode)
    aggregates = {m: aggregate(by_mode[m]) for m in modes}
    metrics = [c for c in CASE_COLUMNS if c not in ('case_id', 'fold')]
    wide = cases.pivot(index='case_id', columns='mode', values=['fold'] + metrics)
    wide.columns = ['%s_%s' % (metric, m) for metric, m in wide.columns]
    wide = wide.sort_index()
    present = cases.groupby('case_id')['mode'].apply(set)
    flags = {c: ';'.join('missing:%s' % m for m in modes if m not in present[c]) for c in wide.index}
    wide['flag'] = pd.Series(flags)
    flagged = sorted(c for c, f in flags.items() if f)
    for c in flagged:
        logger.warning('case %s is not evaluated in every mode (%s)', c, flags[c])
    os.makedirs(output_dir, exist_ok=True)
    patients = wide.reset_index()
    patients.to_csv(os.path.join(output_dir, 'patients.csv'), index=False, na_rep=NA)
    for m, agg in aggregates.items():
        write_aggregate(agg, os.path.join(output_dir, 'aggregate_%s.json' % m))
    table = comparison_table(aggregates)
    with open(os.path.join(output_dir, 'comparison.txt'), 'w') as fw:
        fw.write(table)
    logger.info('report over %d runs, %d cases, modes %s written to %s', len(runs), len(patients), modes, output_dir)
    return ReportBundle(patients, aggregates, table, flagged)
