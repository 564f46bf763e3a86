"""The tss Python module binds a uint8 label volume to a table of acoustic
properties per tissue class, forming the scene the ultrasound simulator
renders.

The tissue classes used throughout iusseg follow the brain tissue maps the
simulator is meant for: background (0), white matter (1), gray matter (2),
cerebrospinal fluid (3) and lateral ventricle (4). The default property
table (default_properties.json next to this module) gives plausible values
for these classes; they are defaults, not measured ground truth, and every
value can be overridden through a JSON property table.

The background label stands for everything outside the imaged anatomy. It
carries no scatterers and acts as a zero-impedance medium: a ray leaving
tissue into it is totally reflected; see sim_physics.

Classes:
    AcousticProperties: impedance, attenuation and scatterer statistics of
                        one tissue class
    TissueMap:          label volume + property table + background label

Exception classes:
    InvalidTissueMap(Exception): raised when a table is inconsistent with a
                                 label volume, or a property is out of range

Module level functions:
    bind_tissue_map(labels, table, background)
    properties_at(tm, p)
    labels_at(tm, points)
    default_property_table()
    load_property_table(path) / save_property_table(table, background, path)
    override_properties(table, overrides)
    relabel_freesurfer(labels, mapping, default)
"""

import json
import os
from dataclasses import dataclass, asdict, replace
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from iusseg.volume.vol import Volume3D, NEAREST, sample_index_coords, world_to_voxel

BACKGROUND = 0
WHITE_MATTER = 1
GRAY_MATTER = 2
CSF = 3
VENTRICLE = 4

DEFAULT_PROPERTIES_FILE = os.path.join(os.path.dirname(__file__), 'default_properties.json')

# FreeSurfer aseg codes -> tissue classes; codes not listed map to the
# 'default' argument of relabel_freesurfer()
FREESURFER_ASEG = {
    0: BACKGROUND,
    2: WHITE_MATTER, 41: WHITE_MATTER, 7: WHITE_MATTER, 46: WHITE_MATTER, 16: WHITE_MATTER,
    77: WHITE_MATTER, 251: WHITE_MATTER, 252: WHITE_MATTER, 253: WHITE_MATTER,
    254: WHITE_MATTER, 255: WHITE_MATTER,
    3: GRAY_MATTER, 42: GRAY_MATTER, 8: GRAY_MATTER, 47: GRAY_MATTER,
    10: GRAY_MATTER, 11: GRAY_MATTER, 12: GRAY_MATTER, 13: GRAY_MATTER, 17: GRAY_MATTER,
    18: GRAY_MATTER, 26: GRAY_MATTER, 28: GRAY_MATTER, 49: GRAY_MATTER, 50: GRAY_MATTER,
    51: GRAY_MATTER, 52: GRAY_MATTER, 53: GRAY_MATTER, 54: GRAY_MATTER, 58: GRAY_MATTER,
    60: GRAY_MATTER,
    14: CSF, 15: CSF, 24: CSF,
    4: VENTRICLE, 43: VENTRICLE, 5: VENTRICLE, 44: VENTRICLE,
}


class InvalidTissueMap(Exception):
    """Exception class, instances of which are raised when trying to bind an
    inconsistent tissue map or to build out-of-range acoustic properties.

    Attributes:
        reason (str): what is wrong
        label (int):  the offending label, if any
    """

    def __init__(self, reason, label=None):
        self.reason = reason
        self.label = label

    def __str__(self):
        if self.label is None:
            return 'Invalid tissue map: %s' % self.reason
        return 'Invalid tissue map: %s (label %d)' % (self.reason, self.label)


@dataclass(frozen=True)
class AcousticProperties:
    """Acoustic description of one tissue class.

    Attributes:
        impedance (float):       acoustic impedance in MRayl
        attenuation (float):     dB / (cm MHz)
        scatter_density (float): fraction of voxels holding a scatterer
        scatter_mean (float):    mean scatterer amplitude
        scatter_sigma (float):   standard deviation of scatterer amplitude
        name (str):              human readable tissue name
    """
    impedance: float
    attenuation: float = 0.0
    scatter_density: float = 0.0
    scatter_mean: float = 0.0
    scatter_sigma: float = 0.0
    name: str = ''

    def __post_init__(self):
        values = (self.impedance, self.attenuation, self.scatter_density, self.scatter_mean,
                  self.scatter_sigma)
        if not all(np.isfinite(v) for v in values):
            raise InvalidTissueMap('non-finite acoustic property for %r' % self.name)
        if self.impedance <= 0:
            raise InvalidTissueMap('impedance must be positive for %r' % self.name)
        if self.attenuation < 0 or self.scatter_sigma < 0:
            raise InvalidTissueMap('attenuation and scatter_sigma must be >= 0 for %r' % self.name)
        if not 0.0 <= self.scatter_density <= 1.0 or not 0.0 <= self.scatter_mean <= 1.0:
            raise InvalidTissueMap('scatter_density and scatter_mean must lie in [0, 1] for %r' % self.name)

    @property
    def scatters(self) -> bool:
        return self.scatter_density > 0 and (self.scatter_mean > 0 or self.scatter_sigma > 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        name = d.pop('name')
        return dict(name=name, **d)


DEFAULT_BACKGROUND_PROPERTIES = AcousticProperties(impedance=0.0004, name='background')


class TissueMap:
    """A label volume bound to acoustic properties.

    Attributes:
        labels (Volume3D):      the unmodified uint8 label volume
        table (dict):           label (int) -> AcousticProperties
        background_label (int): label of everything outside the anatomy
        census (dict):          foreground label (int) -> voxel count
        id (str):               free-form identifier used in provenance

    The per-label lookup tables (impedance_lut, attenuation_lut,
    density_lut, mean_lut, sigma_lut, background_lut) are 256-entry arrays
    indexed by label value; labels without a table entry read background
    values.
    """

    def __init__(self, labels: Volume3D, table: Dict[int, AcousticProperties],
                 background_label: int, census: Dict[int, int], id: str = ''):
        self.labels = labels
        self.table = dict(table)
        self.background_label = int(background_label)
        self.census = dict(census)
        self.id = id
        bg = self.table[self.background_label]
        luts = np.array([[bg.impedance, bg.attenuation, bg.scatter_density, bg.scatter_mean,
                          bg.scatter_sigma]] * 256, dtype=np.float64)
        for label, props in self.table.items():
            luts[label] = (props.impedance, props.attenuation, props.scatter_density,
                           props.scatter_mean, props.scatter_sigma)
        luts[self.background_label, 2:] = 0.0
        luts.flags.writeable = False
        self.impedance_lut, self.attenuation_lut, self.density_lut, self.mean_lut, self.sigma_lut = luts.T
        self.background_lut = np.ones(256, dtype=bool)
        for label in self.table:
            self.background_lut[label] = label == self.background_label

    def __repr__(self):
        return 'TissueMap(id=%r, labels=%s, census=%s)' % (self.id, self.labels, self.census)


def bind_tissue_map(labels: Volume3D, table: Mapping[int, AcousticProperties],
                    background: int = BACKGROUND, id: str = '') -> TissueMap:
    """Validate a label volume against a property table.

    Args:
        labels (Volume3D): uint8 label volume
        table (dict):      label -> AcousticProperties; the background entry
                           may be omitted, in which case an air-like,
                           non-scattering entry is used
        background (int):  the background label

    Raises:
        InvalidTissueMap: if labels is not uint8, if a label occurring in the
                          volume lacks a table entry, or if the background
                          entry carries scatterers

    Returns:
        TissueMap: the bound map, with the foreground census computed
    """
    if not labels.is_label:
        raise InvalidTissueMap('labels must be a uint8 volume, got %s' % labels.element_kind)
    if not 0 <= int(background) <= 255:
        raise InvalidTissueMap('background label out of range', int(background))
    table = {int(k): v for k, v in table.items()}
    if background not in table:
        table[background] = DEFAULT_BACKGROUND_PROPERTIES
    elif table[background].scatters:
        raise InvalidTissueMap('background must not scatter', background)
    values, counts = np.unique(labels.data, return_counts=True)
    for label in values:
        if int(label) not in table:
            raise InvalidTissueMap('label present in volume but missing from property table', int(label))
    census = {int(v): int(c) for v, c in zip(values, counts) if int(v) != background}
    return TissueMap(labels, table, background, census, id)


def labels_at(tm: TissueMap, points) -> np.ndarray:
    """Nearest-neighbour labels at world points of shape (N, 3); points
    outside the grid read the background label."""
    coords = world_to_voxel(tm.labels, np.asarray(points, dtype=np.float64).reshape(-1, 3))
    return sample_index_coords(tm.labels, coords, NEAREST, tm.background_label).astype(np.int64)


def properties_at(tm: TissueMap, p) -> AcousticProperties:
    """Acoustic properties at a world point (nearest label, then table)."""
    label = int(labels_at(tm, p)[0])
    return tm.table.get(label, tm.table[tm.background_label])


def property_table_from_dict(d: dict) -> Tuple[Dict[int, AcousticProperties], int]:
    try:
        table = {int(label): AcousticProperties(name=str(entry.get('name', '')),
                                                impedance=float(entry['impedance']),
                                                attenuation=float(entry.get('attenuation', 0.0)),
                                                scatter_density=float(entry.get('scatter_density', 0.0)),
                                                scatter_mean=float(entry.get('scatter_mean', 0.0)),
                                                scatter_sigma=float(entry.get('scatter_sigma', 0.0)))
                 for label, entry in d['labels'].items()}
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidTissueMap('malformed property table (%s)' % e)
    return table, int(d.get('background', BACKGROUND))


def property_table_to_dict(table: Mapping[int, AcousticProperties], background: int) -> dict:
    return {'labels': {str(label): table[label].to_dict() for label in sorted(table)},
            'background': int(background)}


def load_property_table(path: str) -> Tuple[Dict[int, AcousticProperties], int]:
    with open(path, 'r') as fr:
        return property_table_from_dict(json.load(fr))


def save_property_table(table: Mapping[int, AcousticProperties], background: int, path: str) -> None:
    with open(path, 'w') as fw:
        json.dump(property_table_to_dict(table, background), fw, indent=4)


def default_property_table() -> Tuple[Dict[int, AcousticProperties], int]:
    return load_property_table(DEFAULT_PROPERTIES_FILE)


def override_properties(table: Mapping[int, AcousticProperties],
                        overrides: Optional[Mapping]) -> Dict[int, AcousticProperties]:
    """Return a copy of a table in which some fields of some labels are
    replaced, e.g. {3: {'scatter_density': 0.05}}."""
    result = dict(table)
    for label, fields in (overrides or {}).items():
        label = int(label)
        if label not in result:
            raise InvalidTissueMap('override for a label without table entry', label)
        result[label] = replace(result[label], **{k: (v if k == 'name' else float(v)) for k, v in fields.items()})
    return result


def relabel_freesurfer(labels: Volume3D, mapping: Optional[Mapping[int, int]] = None,
                       default: int = GRAY_MATTER) -> Volume3D:
    """Map a FreeSurfer segmentation (aseg codes, possibly above 255 and
    therefore stored as float32) onto the five tissue classes."""
    mapping = FREESURFER_ASEG if mapping is None else mapping
    codes = np.rint(labels.data).astype(np.int64)
    out = np.full(codes.shape, default, dtype=np.uint8)
    out[codes == 0] = BACKGROUND
    for code, tissue in mapping.items():
        out[codes == int(code)] = tissue
    return labels.with_data(out, copy=False)
