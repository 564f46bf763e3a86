"""The ppln Python module runs experiments: one cross-validation fold of a
scratch or fine-tuned training run, and the synthetic transfer comparison.

A run directory <output_dir>/<mode>/fold_<k>/ is self-describing:

    config.json          frozen effective ExperimentConfig (plus fold)
    splits.json          the split manifest the fold was taken from
    loss_curve.csv       iteration,phase,dataset,loss
    validation.csv       step,phase,loss (when validation ran)
    checkpoint_final.ckpt, checkpoint_best.ckpt (when validation ran)
    predictions/<case>.mhd
    cases.csv, aggregate.json
    cases_fine.csv, aggregate_fine.json (when items carry fine labels)
    error.json           type, message and traceback of a failed run

Exception classes:
    RunFailed(Exception): wraps whatever aborted a fold

Module level functions:
    run_experiment(cfg, fold)
    transfer_experiment(output_dir, seeds, ...)
"""

__package__ = 'iusseg.pipeline'

import json
import os
import traceback
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from iusseg.log.log import logger
from iusseg.volume.vol import Volume3D
from iusseg.volume.vol_io import load_volume, save_volume
from iusseg.tissue.tss import GRAY_MATTER, CSF
from iusseg.tissue.tss_phantom import sphere_phantom, ellipsoid_phantom
from iusseg.simulate.sim_physics import ProbeGeometry
from iusseg.simulate.sim_rng import counter_uniform, hash_counters, STREAM_PATCH, STREAM_TRANSFER
from iusseg.compound.cmpnd import CompoundingConfig
from iusseg.metrics.mtrc import evaluate_case, aggregate, write_case_reports, write_aggregate, CaseReport
from iusseg.augment.agmnt import PatchSpec
from iusseg.learn.lrn_net import NetConfig, Network, init_network
from iusseg.learn.lrn_ckpt import save_checkpoint
from iusseg.learn.lrn import PatchSource, TrainSchedule, TrainPhase, train, predict_volume
from iusseg.pipeline.ppln_config import ExperimentConfig, REAL, SIMULATED
from iusseg.pipeline.ppln_split import (SplitManifest, make_splits, load_split_manifest, save_split_manifest,
                                        SplitError)
from iusseg.pipeline.ppln_dataset import (DatasetConfig, generate_simulated_dataset, load_dataset_manifest,
                                          load_pairs, subjects_of, items_of)

VALIDATION_PATCHES = 4
TRANSFER_COLUMNS = ['seed', 'mode', 'dice']


class RunFailed(Exception):
    """Raised when a fold cannot be completed. The run directory holds an
    error.json describing the cause.

    Attributes:
        run_dir (str), cause (Exception)
    """

    def __init__(self, run_dir, cause):
        self.run_dir = run_dir
        self.cause = cause

    def __str__(self):
        return 'Run %s failed: %s: %s' % (self.run_dir, type(self.cause).__name__, self.cause)


def run_directory(cfg: ExperimentConfig, fold: int) -> str:
    return os.path.join(cfg.output_dir, cfg.mode, 'fold_%d' % fold)


def resolve_splits(cfg: ExperimentConfig, real: dict, n_folds: int = 5) -> SplitManifest:
    """The configured split manifest, or one made from the real subjects
    with the experiment seed (at most n_folds folds)."""
    if cfg.split_manifest:
        return load_split_manifest(cfg.split_manifest)
    subjects = subjects_of(real)
    return make_splits(subjects, min(n_folds, len(subjects)), cfg.seed)


def case_ids(items: Sequence[dict]) -> List[str]:
    """Subject id for subjects with a single item, item id otherwise."""
    counts = {}
    for item in items:
        counts[item['subject']] = counts.get(item['subject'], 0) + 1
    return [item['subject'] if counts[item['subject']] == 1 else item['id'] for item in items]


def validation_pairs(cfg: ExperimentConfig, pairs: Sequence[Tuple[Volume3D, Volume3D]],
                     n: int = VALIDATION_PATCHES) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Fixed (patch, target) pairs cut from the validation subjects."""
    if not pairs:
        return []
    source = PatchSource(pairs, cfg.patch)
    seed = int(hash_counters(cfg.seed, STREAM_PATCH, len(pairs)))
    return [source.draw(seed, i) for i in range(n)]


def _sources(cfg: ExperimentConfig, train_pairs, sim_pairs) -> Dict[str, PatchSource]:
    a = cfg.augmentation
    data = {REAL: PatchSource(train_pairs, cfg.patch, a.augment_real, a.max_scale_pct, a.max_rot_deg)}
    if cfg.mode == 'finetuned':
        data[SIMULATED] = PatchSource(sim_pairs, cfg.patch, a.augment_simulated, a.max_scale_pct, a.max_rot_deg)
    return data


def predict_and_evaluate(net: Network, cfg: ExperimentConfig, items: Sequence[dict], fold: int,
                         run_dir: str) -> Tuple[List[CaseReport], List[CaseReport]]:
    """Predict every item, save the predictions and evaluate them against
    the training label and, where present, the fine label."""
    directory = os.path.join(run_dir, 'predictions')
    os.makedirs(directory, exist_ok=True)
    reports, fine_reports = [], []
    for case_id, item in zip(case_ids(items), items):
        pred = predict_volume(net, load_volume(item['image']), cfg.patch, cfg.overlap, cfg.threshold)
        save_volume(pred, os.path.join(directory, '%s.mhd' % case_id))
        reports.append(evaluate_case(pred, load_volume(item['label']), case_id, fold))
        if 'fine_label' in item:
            fine_reports.append(evaluate_case(pred, load_volume(item['fine_label']), case_id, fold))
        logger.info('fold %d case %s: dice %.4f', fold, case_id, reports[-1].dice)
    return reports, fine_reports


def _write_error(run_dir: str, e: Exception) -> None:
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, 'error.json'), 'w') as fw:
        json.dump({'error': type(e).__name__, 'message': str(e),
                   'traceback': traceback.format_exception(type(e), e, e.__traceback__)}, fw, indent=4)


def run_experiment(cfg: ExperimentConfig, fold: int) -> str:
    """Train on one fold, predict its test subjects and write all artifacts.

    In finetuned mode the first phase trains on the whole simulated dataset;
    simulated items never enter a test set. Scratch and finetuned runs with
    the same split manifest share their test sets.

    Args:
        cfg (ExperimentConfig): effective configuration
        fold (int):             fold id in the split manifest

    Raises:
        RunFailed: wrapping the first failure; error.json is written

    Returns:
        str: the run directory
    """
    run_dir = run_directory(cfg, fold)
    try:
        os.makedirs(run_dir, exist_ok=True)
        real = load_dataset_manifest(cfg.real_dataset)
        splits = resolve_splits(cfg, real)
        f = splits.fold(fold)
        frozen = cfg.to_dict()
        frozen['fold'] = int(fold)
        with open(os.path.join(run_dir, 'config.json'), 'w') as fw:
            json.dump(frozen, fw, indent=4)
        save_split_manifest(splits, os.path.join(run_dir, 'splits.json'))
        unknown = set(f.test_subjects + f.train_subjects + f.validation_subjects) - set(subjects_of(real))
        if unknown:
            raise SplitError('subjects %s are not in the real dataset' % sorted(unknown))
        train_pairs = load_pairs(real, f.train_subjects)
        sim_pairs = load_pairs(load_dataset_manifest(cfg.simulated_dataset)) if cfg.mode == 'finetuned' else []
        validation = []
        if cfg.validate_every or cfg.use_best_checkpoint:
            validation = validation_pairs(cfg, load_pairs(real, f.validation_subjects))
        logger.info('fold %d (%s): %d training, %d validation, %d test subjects', fold, cfg.mode,
                    len(f.train_subjects), len(f.validation_subjects), len(f.test_subjects))
        net = init_network(cfg.net, cfg.seed)
        result = train(net, cfg.schedule, _sources(cfg, train_pairs, sim_pairs), cfg.learning_rate,
                       validation or None, cfg.validate_every)
        result.curve.to_csv(os.path.join(run_dir, 'loss_curve.csv'), index=False)
        meta = {'mode': cfg.mode, 'fold': int(fold), 'seed': cfg.seed}
        save_checkpoint(os.path.join(run_dir, 'checkpoint_final.ckpt'), result.network, result.adam_state, meta)
        chosen = result.network
        if result.best_network is not None:
            result.validation.to_csv(os.path.join(run_dir, 'validation.csv'), index=False)
            save_checkpoint(os.path.join(run_dir, 'checkpoint_best.ckpt'), result.best_network, None,
                            dict(meta, validation_loss=result.best_validation_loss))
            if cfg.use_best_checkpoint:
                chosen = result.best_network
        reports, fine_reports = predict_and_evaluate(chosen, cfg, items_of(real, f.test_subjects), fold, run_dir)
        write_case_reports(reports, os.path.join(run_dir, 'cases.csv'))
        write_aggregate(aggregate(reports), os.path.join(run_dir, 'aggregate.json'))
        if fine_reports:
            write_case_reports(fine_reports, os.path.join(run_dir, 'cases_fine.csv'))
            write_aggregate(aggregate(fine_reports), os.path.join(run_dir, 'aggregate_fine.json'))
    except Exception as e:
        logger.error('fold %d (%s) failed: %s', fold, cfg.mode, e)
        _write_error(run_dir, e)
        raise RunFailed(run_dir, e)
    logger.info('fold %d (%s) done: %s', fold, cfg.mode, run_dir)
    return run_dir


def transfer_families(n_subjects: int, seed: int, dims=(24, 24, 24), spacing: float = 0.5):
    """Two synthetic families of tissue maps: spheres (family A) and rotated
    ellipsoids (family B), with seeded sizes and positions. The foreground
    is CSF in gray matter."""
    extent = spacing * (np.asarray(dims) - 1)
    a, b = [], []
    for k in range(n_subjects):
        u = counter_uniform(seed, STREAM_TRANSFER, k, np.arange(8))
        center = extent * (0.4 + 0.2 * u[:3])
        a.append(('sphere%02d' % k, sphere_phantom(dims, spacing, extent[0] * (0.15 + 0.1 * u[3]), center,
                                                   inside=CSF, outside=GRAY_MATTER)))
        semi = extent * (0.12 + 0.12 * u[3:6])
        b.append(('ellipsoid%02d' % k, ellipsoid_phantom(dims, spacing, semi, center,
                                                         (90.0 * u[6] - 45.0, 90.0 * u[7] - 45.0, 0.0),
                                                         inside=CSF, outside=GRAY_MATTER)))
    return a, b


def transfer_dataset_configs() -> Tuple[DatasetConfig, DatasetConfig]:
    """Family A is imaged at 5 MHz with a wide point spread, family B at
    7 MHz with a narrow one and depth gain."""
    probe_a = ProbeGeometry('linear', 32, 14.0, 96, 5.0, 14.0)
    probe_b = ProbeGeometry('linear', 32, 14.0, 96, 7.0, 14.0)
    compounding = CompoundingConfig(0.5, 1, 'mean')
    cfg_a = DatasetConfig(probes=[probe_a], imaging={'psf_axial_sigma_mm': [0.3], 'psf_lateral_sigma_mm': [0.45]},
                          n_frames=16, compounding=compounding, foreground_labels=(CSF,))
    cfg_b = DatasetConfig(probes=[probe_b], imaging={'psf_axial_sigma_mm': [0.15], 'psf_lateral_sigma_mm': [0.25],
                                                     'tgc_gain_db_per_cm': [2.0]},
                          n_frames=16, compounding=compounding, foreground_labels=(CSF,))
    return cfg_a, cfg_b


def _family_dice(net: Network, pairs, patch: PatchSpec) -> float:
    scores = [evaluate_case(predict_volume(net, image, patch), label, 'transfer').dice for image, label in pairs]
    return float(np.mean(scores))


def transfer_experiment(output_dir: str, seeds: Sequence[int] = (0, 1, 2, 3, 4), n_subjects: int = 6,
                        pretrain_iterations: int = 200, iterations: int = 50, batch_size: int = 2,
                        lr: float = 1e-3, net_config: Optional[NetConfig] = None,
                        patch: Optional[PatchSpec] = None, threads: int = 1) -> pd.DataFrame:
    """Scratch vs fine-tuned on synthetic families, per seed.

    The fine-tuned network pre-trains on family A and then trains
    'iterations' iterations on family B; the scratch network trains the same
    'iterations' on family B from the same initialization. Both are scored by
    mean Dice on the held-out third of family B.

    Returns:
        DataFrame: seed,mode,dice; also written to transfer.csv, with a
        summary in transfer.json
    """
    net_config = net_config or NetConfig(base_channels=4, dense_block_layers=1, scales=2, growth=2)
    patch = patch or PatchSpec((16, 16, 16))
    os.makedirs(output_dir, exist_ok=True)
    cfg_a, cfg_b = transfer_dataset_configs()
    rows = []
    for seed in seeds:
        maps_a, maps_b = transfer_families(n_subjects, seed)
        family_dir = os.path.join(output_dir, 'seed%d' % seed)
        generate_simulated_dataset(maps_a, cfg_a, seed, os.path.join(family_dir, 'A'), threads)
        generate_simulated_dataset(maps_b, cfg_b, seed, os.path.join(family_dir, 'B'), threads)
        manifest_a = load_dataset_manifest(os.path.join(family_dir, 'A'))
        manifest_b = load_dataset_manifest(os.path.join(family_dir, 'B'))
        subjects_b = subjects_of(manifest_b)
        n_test = max(1, len(subjects_b) // 3)
        train_b = load_pairs(manifest_b, subjects_b[:-n_test])
        test_b = load_pairs(manifest_b, subjects_b[-n_test:])
        data = {'A': PatchSource(load_pairs(manifest_a), patch), 'B': PatchSource(train_b, patch)}
        net = init_network(net_config, seed)
        scratch = train(net, TrainSchedule((TrainPhase('B', iterations, batch_size),), seed), data, lr)
        finetuned = train(net, TrainSchedule((TrainPhase('A', pretrain_iterations, batch_size),
                                              TrainPhase('B', iterations, batch_size)), seed), data, lr)
        for mode, result in (('scratch', scratch), ('finetuned', finetuned)):
            rows.append((int(seed), mode, _family_dice(result.network, test_b, patch)))
            logger.info('transfer seed %d %s: dice %.4f', seed, mode, rows[-1][2])
    df = pd.DataFrame(rows, columns=TRANSFER_COLUMNS)
    df.to_csv(os.path.join(output_dir, 'transfer.csv'), index=False)
    wide = df.pivot(index='seed', columns='mode', values='dice')
    summary = {'seeds': [int(s) for s in seeds], 'finetuned_wins': int((wide['finetuned'] >= wide['scratch']).sum()),
               'mean': {m: float(wide[m].mean()) for m in ('scratch', 'finetuned')}}
    with open(os.path.join(output_dir, 'transfer.json'), 'w') as fw:
        json.dump(summary, fw, indent=4)
    return df
