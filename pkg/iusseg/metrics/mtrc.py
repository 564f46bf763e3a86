"""The mtrc Python module evaluates binary segmentations against ground truth
with two overlap measures (Dice and Jaccard) and two surface distances
(symmetric average surface distance and Hausdorff distance), per case and
aggregated over cases.

Surfaces are the centers of the foreground voxels with at least one of their
six face neighbours in the background or outside the grid, in world mm.
Point-to-surface distances are exact Euclidean nearest-neighbour distances
(scipy KD-tree).

Conventions for empty masks: both empty gives Dice = Jaccard = 1; one empty
gives 0; surface distances are undefined whenever a mask is empty, and are
then reported as missing (None in Python, NA in CSV), never as 0.

Classes:
    CaseReport:      metrics of one test subject
    AggregateReport: mean and population standard deviation per metric

Exception classes:
    MetricError(Exception):      shape mismatch or non-binary input
    UndefinedDistance(Exception): a surface distance with an empty mask

Module level functions:
    dice(a, b), jaccard(a, b)
    surface_points(mask)
    average_surface_distance(a, b), hausdorff(a, b)
    evaluate_case(pred, truth, case_id, fold)
    aggregate(reports)
    write_case_reports(reports, path), read_case_reports(path)
    write_aggregate(agg, path)
"""

__package__ = 'iusseg.metrics'

import json
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.spatial import cKDTree

from iusseg.log.log import logger
from iusseg.volume.vol import Volume3D, NEAREST, resample_to, voxel_to_world

CASE_COLUMNS = ['case_id', 'fold', 'dice', 'jaccard', 'avg_distance_mm', 'hausdorff_mm']
METRICS = ['dice', 'jaccard', 'avg_distance_mm', 'hausdorff_mm']
NA = 'NA'
FACE_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


class MetricError(Exception):
    def __init__(self, reason):
        self.reason = reason

    def __str__(self):
        return 'Cannot compute metric: %s' % self.reason


class UndefinedDistance(Exception):
    def __init__(self, reason='undefined distance: empty mask'):
        self.reason = reason

    def __str__(self):
        return self.reason


@dataclass
class CaseReport:
    """Metrics of one case; the distances are None when undefined."""
    case_id: str
    fold: int
    dice: float
    jaccard: float
    avg_distance_mm: Optional[float]
    hausdorff_mm: Optional[float]
    spacing_mm: Tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class AggregateReport:
    """Per metric: mean, population std and the number of cases with a
    defined value (distances may be missing for some cases)."""
    n_cases: int
    mean: Dict[str, Optional[float]] = field(default_factory=dict)
    std: Dict[str, Optional[float]] = field(default_factory=dict)
    count: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _binary(vol: Volume3D) -> np.ndarray:
    if not vol.is_label:
        raise MetricError('masks must be uint8, got %s' % vol.element_kind)
    if np.any(vol.data > 1):
        raise MetricError('mask holds values other than 0 and 1')
    return vol.data.astype(bool)


def _pair(a: Volume3D, b: Volume3D):
    if a.dims != b.dims:
        raise MetricError('shape mismatch %s vs %s' % (a.dims, b.dims))
    return _binary(a), _binary(b)


def dice(a: Volume3D, b: Volume3D) -> float:
    """2|A and B| / (|A| + |B|); 1.0 when both are empty."""
    x, y = _pair(a, b)
    total = int(np.count_nonzero(x)) + int(np.count_nonzero(y))
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(x & y)) / total


def jaccard(a: Volume3D, b: Volume3D) -> float:
    """|A and B| / |A or B|; 1.0 when both are empty."""
    x, y = _pair(a, b)
    union = int(np.count_nonzero(x | y))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(x & y)) / union


def surface_points(mask: Volume3D) -> np.ndarray:
    """World positions (N, 3) of the surface voxel centers of a mask."""
    x = _binary(mask)
    interior = ndimage.binary_erosion(x, structure=FACE_NEIGHBOURS, border_value=0)
    return voxel_to_world(mask, np.argwhere(x & ~interior).astype(np.float64))


def _directed(a: Volume3D, b: Volume3D):
    pa, pb = surface_points(a), surface_points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise UndefinedDistance()
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return d_ab, d_ba


def average_surface_distance(a: Volume3D, b: Volume3D) -> float:
    """Symmetric mean of surface point to surface distances, in mm.

    Raises:
        UndefinedDistance: if either mask is empty
    """
    _pair(a, b)
    d_ab, d_ba = _directed(a, b)
    return float((d_ab.sum() + d_ba.sum()) / (d_ab.size + d_ba.size))


def hausdorff(a: Volume3D, b: Volume3D) -> float:
    """Exact symmetric Hausdorff distance between the surfaces, in mm.

    Raises:
        UndefinedDistance: if either mask is empty
    """
    _pair(a, b)
    d_ab, d_ba = _directed(a, b)
    return float(max(d_ab.max(), d_ba.max()))


def evaluate_case(pred: Volume3D, truth: Volume3D, case_id: str, fold: int = 0) -> CaseReport:
    """All four metrics of a prediction, on the grid of the truth. A
    prediction on another grid is resampled onto it (nearest) first."""
    if not pred.same_grid(truth):
        pred = resample_to(pred, truth, NEAREST)
    if pred.dims != truth.dims:
        raise MetricError('grid mismatch after resampling for case %s' % case_id)
    overlap_dice = dice(pred, truth)
    overlap_jaccard = jaccard(pred, truth)
    try:
        d_ab, d_ba = _directed(pred, truth)
        asd = float((d_ab.sum() + d_ba.sum()) / (d_ab.size + d_ba.size))
        hd = float(max(d_ab.max(), d_ba.max()))
    except UndefinedDistance:
        logger.warning('case %s: surface distances undefined (empty mask), reported as missing', case_id)
        asd, hd = None, None
    return CaseReport(str(case_id), int(fold), overlap_dice, overlap_jaccard, asd, hd,
                      tuple(float(s) for s in truth.spacing))


def aggregate(reports: Sequence[CaseReport]) -> AggregateReport:
    """Mean and population standard deviation per metric, summing in
    case_id order; missing distances are left out of their metric."""
    if len(reports) == 0:
        raise MetricError('cannot aggregate an empty list of reports')
    ordered = sorted(reports, key=lambda r: (r.case_id, r.fold))
    agg = AggregateReport(n_cases=len(ordered))
    for metric in METRICS:
        values = np.array([getattr(r, metric) for r in ordered if getattr(r, metric) is not None],
                          dtype=np.float64)
        agg.count[metric] = int(values.size)
        if values.size == 0:
            agg.mean[metric] = None
            agg.std[metric] = None
        else:
            agg.mean[metric] = float(np.mean(values))
            agg.std[metric] = float(np.std(values))
    return agg


def reports_frame(reports: Sequence[CaseReport]) -> pd.DataFrame:
    rows = [{c: getattr(r, c) for c in CASE_COLUMNS} for r in reports]
    return pd.DataFrame(rows, columns=CASE_COLUMNS)


def write_case_reports(reports: Sequence[CaseReport], path: str) -> None:
    """CSV with columns case_id,fold,dice,jaccard,avg_distance_mm,hausdorff_mm
    and NA for missing values; floats in shortest round-trip form."""
    reports_frame(reports).to_csv(path, index=False, na_rep=NA, float_format=None)


def read_case_reports(path: str) -> List[CaseReport]:
    df = pd.read_csv(path, dtype={'case_id': str}, na_values=[NA], keep_default_na=False)
    reports = []
    for row in df.itertuples(index=False):
        reports.append(CaseReport(row.case_id, int(row.fold), float(row.dice), float(row.jaccard),
                                  None if pd.isna(row.avg_distance_mm) else float(row.avg_distance_mm),
                                  None if pd.isna(row.hausdorff_mm) else float(row.hausdorff_mm)))
    return reports


def write_aggregate(agg: AggregateReport, path: str) -> None:
    with open(path, 'w') as fw:
        json.dump(agg.to_dict(), fw, indent=4)
