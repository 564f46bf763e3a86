"""
Simulated training datasets and dataset manifests.

generate_simulated_dataset() renders, for every tissue map, every parameter
combination of a dataset configuration and every repetition, one sweep,
compounds it, and pairs the compounded image with its ground truth: the
foreground labels of the tissue map, resampled (nearest) onto the compounded
grid and restricted to the imaged region (the coverage mask, grown by the
hole-fill radius). When coarse_label_spacing_mm is set, the training label is
the coarsened ground truth and the full-resolution one is kept as
fine_label.

A dataset configuration is JSON:

    {
        "probes": [ProbeGeometry, ...],
        "imaging": {"<ImagingParams field>": [values, ...], ...},
        "property_variants": [{"<label>": {"<property>": value}}, ...],
        "property_table": "table.json" | null,
        "sweeps_per_combo": 1,
        "trajectory": {"n_frames": 24, "margin_mm": 0.0, "tilt_deg": 0.0},
        "compounding": CompoundingConfig,
        "foreground_labels": [3, 4],
        "coarse_label_spacing_mm": null
    }

The parameter grid is the product of probes, imaging values and property
variants. A manifest (manifest.json next to the volumes) lists

    {"items": [{"id", "subject", "image", "label", "fine_label"?, "provenance"}],
     "errors": [{"id", "error", "message"}], "seed", "config"}

with volume paths relative to the manifest. Failing items are recorded in
"errors" and do not stop the generation.
"""

import itertools
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from iusseg.log.log import logger
from iusseg.volume.vol import Volume3D, NEAREST, resample_to, coarsen_labels, binary
from iusseg.volume.vol_io import load_volume, save_volume
from iusseg.tissue.tss import (bind_tissue_map, default_property_table, load_property_table, override_properties,
                               CSF, VENTRICLE)
from iusseg.simulate.sim import simulate_sweep, linear_trajectory, params_id
from iusseg.simulate.sim_physics import ProbeGeometry, ImagingParams, InvalidProbe
from iusseg.simulate.sim_rng import hash_counters, STREAM_DATASET
from iusseg.compound.cmpnd import CompoundingConfig, CompoundingError, compound, coverage_mask
from iusseg.pipeline.ppln_config import ConfigError

MANIFEST_FILE = 'manifest.json'
DEFAULT_FOREGROUND = (CSF, VENTRICLE)


@dataclass
class DatasetConfig:
    probes: List[ProbeGeometry] = field(default_factory=lambda: [ProbeGeometry()])
    imaging: Dict[str, list] = field(default_factory=dict)
    property_variants: List[dict] = field(default_factory=lambda: [{}])
    property_table: Optional[str] = None
    sweeps_per_combo: int = 1
    n_frames: int = 24
    margin_mm: float = 0.0
    tilt_deg: float = 0.0
    compounding: CompoundingConfig = field(default_factory=CompoundingConfig)
    foreground_labels: Tuple[int, ...] = DEFAULT_FOREGROUND
    coarse_label_spacing_mm: Optional[float] = None

    def combinations(self) -> List[Tuple[ProbeGeometry, dict, dict]]:
        """(probe, imaging overrides, property variant) for every grid point."""
        keys = sorted(self.imaging)
        values = [list(self.imaging[k]) for k in keys]
        imaging = [dict(zip(keys, combo)) for combo in itertools.product(*values)] if keys else [{}]
        return list(itertools.product(self.probes, imaging, self.property_variants))

    def to_dict(self) -> dict:
        return {'probes': [p.to_dict() for p in self.probes], 'imaging': self.imaging,
                'property_variants': self.property_variants, 'property_table': self.property_table,
                'sweeps_per_combo': self.sweeps_per_combo,
                'trajectory': {'n_frames': self.n_frames, 'margin_mm': self.margin_mm, 'tilt_deg': self.tilt_deg},
                'compounding': self.compounding.to_dict(), 'foreground_labels': list(self.foreground_labels),
                'coarse_label_spacing_mm': self.coarse_label_spacing_mm}

    @staticmethod
    def from_dict(d: dict) -> 'DatasetConfig':
        try:
            trajectory = d.get('trajectory', {})
            cfg = DatasetConfig(
                probes=[ProbeGeometry.from_dict(p) for p in d.get('probes', [{}])],
                imaging={k: list(v) for k, v in d.get('imaging', {}).items()},
                property_variants=list(d.get('property_variants', [{}])) or [{}],
                property_table=d.get('property_table'),
                sweeps_per_combo=int(d.get('sweeps_per_combo', 1)),
                n_frames=int(trajectory.get('n_frames', 24)),
                margin_mm=float(trajectory.get('margin_mm', 0.0)),
                tilt_deg=float(trajectory.get('tilt_deg', 0.0)),
                compounding=CompoundingConfig.from_dict(d.get('compounding', {})),
                foreground_labels=tuple(int(v) for v in d.get('foreground_labels', DEFAULT_FOREGROUND)),
                coarse_label_spacing_mm=d.get('coarse_label_spacing_mm'))
        except (InvalidProbe, CompoundingError) as e:
            raise ConfigError(str(e))
        except (TypeError, ValueError, AttributeError) as e:
            raise ConfigError('malformed dataset configuration (%s)' % e)
        if cfg.sweeps_per_combo < 1 or not cfg.probes:
            raise ConfigError('a dataset needs at least one probe and one sweep per combination')
        unknown = (set(cfg.imaging) - set(ImagingParams.__dataclass_fields__)) | ({'seed'} & set(cfg.imaging))
        if unknown:
            raise ConfigError('imaging grid keys not allowed: %s' % sorted(unknown))
        return cfg


def load_dataset_config(path: str) -> DatasetConfig:
    try:
        with open(path, 'r') as fr:
            return DatasetConfig.from_dict(json.load(fr))
    except (OSError, ValueError) as e:
        raise ConfigError('cannot read dataset configuration (%s)' % e, path)


def ground_truth(labels: Volume3D, image: Volume3D, mask: Volume3D, foreground: Sequence[int],
                 grow: int) -> Volume3D:
    """Binary foreground of a tissue map on the grid of a compounded image,
    restricted to the imaged voxels (mask grown by 'grow' voxels)."""
    truth = binary(resample_to(labels, image, NEAREST), foreground)
    imaged = mask.data.astype(bool)
    if grow > 0:
        imaged = ndimage.binary_dilation(imaged, structure=np.ones((3, 3, 3), dtype=bool), iterations=grow)
    return truth.with_data((truth.data.astype(bool) & imaged).astype(np.uint8), copy=False)


def _relative(path: str, directory: str) -> str:
    return os.path.relpath(path, directory)


def generate_simulated_dataset(tissue_maps: Sequence[Tuple[str, Volume3D]], cfg: DatasetConfig, seed: int,
                               output_dir: str, threads: int = 1,
                               sweeps_per_combo: Optional[int] = None) -> dict:
    """Simulate, compound and label a dataset; write volumes and manifest.

    Args:
        tissue_maps (list): (map id, uint8 label volume) pairs
        cfg (DatasetConfig): parameter grid, trajectory and compounding
        seed (int):          dataset seed; item k simulates with seed
                             hash(seed, k)
        output_dir (str):    receives items/<id>/{image,label}.mhd and
                             manifest.json

    Raises:
        ConfigError: without tissue maps or parameter combinations

    Returns:
        dict: the manifest
    """
    if len(tissue_maps) == 0:
        raise ConfigError('at least one tissue map is needed')
    combos = cfg.combinations()
    if not combos:
        raise ConfigError('the parameter grid is empty')
    repetitions = cfg.sweeps_per_combo if sweeps_per_combo is None else int(sweeps_per_combo)
    if cfg.property_table:
        base_table, background = load_property_table(cfg.property_table)
    else:
        base_table, background = default_property_table()
    os.makedirs(output_dir, exist_ok=True)
    items, errors = [], []
    k = 0
    for map_id, labels in tissue_maps:
        for combo_index, (geom, imaging, variant) in enumerate(combos):
            for rep in range(repetitions):
                item_id = '%s_c%03d_r%02d' % (map_id, combo_index, rep)
                item_seed = int(hash_counters(seed, STREAM_DATASET, k))
                k += 1
                try:
                    items.append(_generate_item(item_id, map_id, labels, base_table, background, geom, imaging,
                                                variant, rep, item_seed, cfg, output_dir, threads))
                    logger.info('dataset item %s done', item_id)
                except Exception as e:
                    logger.warning('dataset item %s failed: %s', item_id, e)
                    errors.append({'id': item_id, 'error': type(e).__name__, 'message': str(e)})
    manifest = {'items': items, 'errors': errors, 'seed': int(seed), 'config': cfg.to_dict()}
    with open(os.path.join(output_dir, MANIFEST_FILE), 'w') as fw:
        json.dump(manifest, fw, indent=4)
    logger.info('dataset of %d items (%d failed) written to %s', len(items), len(errors), output_dir)
    return manifest


def _generate_item(item_id, map_id, labels, base_table, background, geom, imaging, variant, rep, item_seed, cfg,
                   output_dir, threads) -> dict:
    params = ImagingParams.from_dict(dict(imaging, seed=item_seed))
    table = override_properties(base_table, variant)
    tm = bind_tissue_map(labels, table, background, id=map_id)
    trajectory = linear_trajectory(tm, cfg.n_frames, geom, margin_mm=cfg.margin_mm, tilt_deg=cfg.tilt_deg)
    sweep = simulate_sweep(tm, trajectory, geom, params, threads)
    image = compound(sweep, cfg.compounding, threads)
    mask = coverage_mask(sweep, cfg.compounding, threads)
    fine = ground_truth(labels, image, mask, cfg.foreground_labels, cfg.compounding.hole_fill_radius_voxels)
    directory = os.path.join(output_dir, 'items', item_id)
    os.makedirs(directory, exist_ok=True)
    save_volume(image, os.path.join(directory, 'image.mhd'))
    item = {'id': item_id, 'subject': map_id, 'image': _relative(os.path.join(directory, 'image.mhd'), output_dir)}
    if cfg.coarse_label_spacing_mm:
        save_volume(coarsen_labels(fine, float(cfg.coarse_label_spacing_mm)), os.path.join(directory, 'label.mhd'))
        save_volume(fine, os.path.join(directory, 'fine_label.mhd'))
        item['fine_label'] = _relative(os.path.join(directory, 'fine_label.mhd'), output_dir)
    else:
        save_volume(fine, os.path.join(directory, 'label.mhd'))
    item['label'] = _relative(os.path.join(directory, 'label.mhd'), output_dir)
    item['provenance'] = {'tissue_map': map_id, 'probe': geom.to_dict(), 'imaging': params.to_dict(),
                          'properties': variant, 'repetition': rep, 'seed': item_seed,
                          'params_id': params_id(params, geom)}
    return item


def load_dataset_manifest(path: str) -> dict:
    """Read a manifest, resolving volume paths against its directory."""
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_FILE)
    try:
        with open(path, 'r') as fr:
            manifest = json.load(fr)
    except (OSError, ValueError) as e:
        raise ConfigError('cannot read dataset manifest (%s)' % e, path)
    directory = os.path.dirname(os.path.abspath(path))
    for item in manifest.get('items', []):
        for key in ('image', 'label', 'fine_label'):
            if key in item:
                item[key] = os.path.join(directory, item[key])
    manifest['path'] = os.path.abspath(path)
    return manifest


def subjects_of(manifest: dict) -> List[str]:
    """Subject ids in order of first appearance."""
    seen = []
    for item in manifest['items']:
        if item['subject'] not in seen:
            seen.append(item['subject'])
    return seen


def load_pairs(manifest: dict, subjects: Optional[Sequence[str]] = None) -> List[Tuple[Volume3D, Volume3D]]:
    """(image, label) volumes of the items of the given subjects (all when
    None), in manifest order."""
    wanted = None if subjects is None else set(subjects)
    return [(load_volume(item['image']), load_volume(item['label'])) for item in manifest['items']
            if wanted is None or item['subject'] in wanted]


def items_of(manifest: dict, subjects: Sequence[str]) -> List[dict]:
    wanted = set(subjects)
    return [item for item in manifest['items'] if item['subject'] in wanted]
