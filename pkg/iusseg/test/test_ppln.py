import json
import os

import pandas as pd
import pytest

from iusseg.tissue.tss_phantom import brain_phantom
from iusseg.simulate.sim_physics import ProbeGeometry
from iusseg.compound.cmpnd import CompoundingConfig
from iusseg.metrics.mtrc import read_case_reports
from iusseg.augment.agmnt import PatchSpec
from iusseg.learn.lrn_net import NetConfig
from iusseg.learn.lrn_ckpt import load_checkpoint
from iusseg.pipeline.ppln_config import experiment_config_from_dict
from iusseg.pipeline.ppln_dataset import DatasetConfig, generate_simulated_dataset, load_dataset_manifest
from iusseg.pipeline.ppln import RunFailed, TRANSFER_COLUMNS, case_ids, run_directory, resolve_splits, \
    run_experiment, transfer_families, transfer_experiment

PROBE = ProbeGeometry('linear', 16, 10.0, 48, 7.0, 9.0)


@pytest.fixture(scope='module')
def datasets(tmp_path_factory):
    root = tmp_path_factory.mktemp('datasets')
    cfg = DatasetConfig(probes=[PROBE], n_frames=4, compounding=CompoundingConfig(0.5, 1))
    real = [('p%d' % i, brain_phantom((20,) * 3, 0.5, i)) for i in range(3)]
    sim = [('s%d' % i, brain_phantom((20,) * 3, 0.5, 10 + i)) for i in range(2)]
    generate_simulated_dataset(real, cfg, 0, str(root / 'real'))
    cfg.coarse_label_spacing_mm = 1.0
    generate_simulated_dataset(sim, cfg, 1, str(root / 'sim'))
    return root


def experiment(datasets, tmp_path, **changes):
    d = {'real_dataset': str(datasets / 'real'), 'simulated_dataset': str(datasets / 'sim'),
         'output_dir': str(tmp_path / 'runs'), 'iterations': 2, 'batch_size': 1, 'learning_rate': 1e-3,
         'patch': {'size': [8, 8, 8]},
         'net': {'base_channels': 2, 'dense_block_layers': 1, 'scales': 2, 'growth': 1}}
    d.update(changes)
    return experiment_config_from_dict(d)


def test_case_ids():
    items = [{'id': 'a_c000_r00', 'subject': 'a'}, {'id': 'b_c000_r00', 'subject': 'b'},
             {'id': 'b_c001_r00', 'subject': 'b'}]
    assert case_ids(items) == ['a', 'b_c000_r00', 'b_c001_r00']


def test_splits_are_made_from_the_real_subjects(datasets, tmp_path):
    cfg = experiment(datasets, tmp_path, mode='scratch')
    splits = resolve_splits(cfg, load_dataset_manifest(cfg.real_dataset))
    assert len(splits.folds) == 3
    assert sorted(splits.subjects) == ['p0', 'p1', 'p2']


@pytest.mark.parametrize('mode', ['scratch', 'finetuned'])
def test_run_writes_every_artifact(datasets, tmp_path, mode):
    cfg = experiment(datasets, tmp_path, mode=mode, validation={'validate_every': 1})
    run_dir = run_experiment(cfg, 0)
    assert run_dir == run_directory(cfg, 0) == os.path.join(str(tmp_path / 'runs'), mode, 'fold_0')
    for name in ('config.json', 'splits.json', 'loss_curve.csv', 'checkpoint_final.ckpt', 'cases.csv',
                 'aggregate.json'):
        assert os.path.isfile(os.path.join(run_dir, name)), name
    with open(os.path.join(run_dir, 'config.json')) as fr:
        frozen = json.load(fr)
    assert frozen['mode'] == mode and frozen['fold'] == 0
    curve = pd.read_csv(os.path.join(run_dir, 'loss_curve.csv'))
    assert len(curve) == (4 if mode == 'finetuned' else 2)
    reports = read_case_reports(os.path.join(run_dir, 'cases.csv'))
    assert len(reports) == 1 and reports[0].case_id in ('p0', 'p1', 'p2')
    assert os.path.isfile(os.path.join(run_dir, 'predictions', '%s.mhd' % reports[0].case_id))
    net, _, metadata = load_checkpoint(os.path.join(run_dir, 'checkpoint_final.ckpt'))
    assert metadata == {'mode': mode, 'fold': 0, 'seed': 0}
    assert net.config == cfg.net
    assert not os.path.exists(os.path.join(run_dir, 'error.json'))


def test_failed_run_leaves_an_error_record(datasets, tmp_path):
    cfg = experiment(datasets, tmp_path, mode='scratch', real_dataset=str(tmp_path / 'nowhere'))
    with pytest.raises(RunFailed) as e:
        run_experiment(cfg, 0)
    with open(os.path.join(e.value.run_dir, 'error.json')) as fr:
        record = json.load(fr)
    assert record['error'] == 'ConfigError'


def test_unknown_fold(datasets, tmp_path):
    with pytest.raises(RunFailed):
        run_experiment(experiment(datasets, tmp_path, mode='scratch'), 9)


def test_transfer_families():
    a, b = transfer_families(3, seed=1, dims=(16,) * 3)
    assert [m for m, _ in a] == ['sphere00', 'sphere01', 'sphere02']
    assert all(vol.dims == (16, 16, 16) for _, vol in a + b)
    a2, _ = transfer_families(3, seed=1, dims=(16,) * 3)
    assert all(x.equals(y) for (_, x), (_, y) in zip(a, a2))


@pytest.mark.slow
def test_transfer_experiment(tmp_path):
    df = transfer_experiment(str(tmp_path), seeds=(0,), n_subjects=3, pretrain_iterations=2, iterations=2,
                             batch_size=1, net_config=NetConfig(base_channels=2, dense_block_layers=1, scales=2,
                                                                growth=1),
                             patch=PatchSpec((8, 8, 8)))
    assert list(df.columns) == TRANSFER_COLUMNS
    assert sorted(df['mode']) == ['finetuned', 'scratch']
    with open(str(tmp_path / 'transfer.json')) as fr:
        summary = json.load(fr)
    assert summary['seeds'] == [0] and 0 <= summary['finetuned_wins'] <= 1


@pytest.mark.slow
def test_pretraining_helps_on_the_second_family(tmp_path):
    df = transfer_experiment(str(tmp_path), seeds=(0, 1, 2, 3, 4), n_subjects=6, pretrain_iterations=300,
                             iterations=30, batch_size=2, lr=1e-3)
    with open(str(tmp_path / 'transfer.json')) as fr:
        summary = json.load(fr)
    assert summary['seeds'] == [0, 1, 2, 3, 4]
    assert summary['finetuned_wins'] >= 4
    wide = df.pivot(index='seed', columns='mode', values='dice')
    assert int((wide['finetuned'] >= wide['scratch']).sum()) == summary['finetuned_wins']
