import json

import pytest

from iusseg.pipeline.ppln_config import ConfigError, experiment_config_from_dict, load_experiment_config, \
    save_experiment_config, default_schedule, REAL, SIMULATED, REFERENCE_PROTOCOL

BASE = {'real_dataset': 'corpus', 'simulated_dataset': 'sim', 'iterations': 3, 'batch_size': 1,
        'patch': {'size': [8, 8, 8]}, 'net': {'base_channels': 2, 'dense_block_layers': 1, 'scales': 2, 'growth': 1}}


def test_default_schedules():
    scratch = experiment_config_from_dict(dict(BASE, mode='scratch'))
    assert [p.dataset_id for p in scratch.schedule.phases] == [REAL]
    finetuned = experiment_config_from_dict(dict(BASE, mode='finetuned', seed=3))
    assert [p.dataset_id for p in finetuned.schedule.phases] == [SIMULATED, REAL]
    assert finetuned.schedule.seed == 3
    assert default_schedule('finetuned', 5, 2, 0).phases[0].iterations == 5


@pytest.mark.parametrize('changes', [
    {'mode': 'transfer'},
    {'mode': 'finetuned', 'simulated_dataset': None},
    {'mode': 'scratch', 'schedule': {'phases': [{'dataset_id': SIMULATED, 'iterations': 1}]}},
    {'patch': {'size': [9, 8, 8]}},
    {'predict': {'threshold': 1.5}},
    {'net': {'activation': 'tanh'}},
    {'iterations': 'many'},
])
def test_invalid(changes):
    with pytest.raises(ConfigError):
        experiment_config_from_dict(dict(BASE, **changes))


def test_real_dataset_is_required():
    d = dict(BASE)
    del d['real_dataset']
    with pytest.raises(ConfigError):
        experiment_config_from_dict(d)


def test_overrides_and_round_trip(tmp_path):
    cfg = experiment_config_from_dict(dict(BASE, mode='finetuned'))
    changed = cfg.with_overrides(seed=9, output_dir='elsewhere')
    assert changed.seed == 9 and changed.schedule.seed == 9 and changed.output_dir == 'elsewhere'
    assert cfg.seed == 0
    path = str(tmp_path / 'frozen.json')
    save_experiment_config(changed, path)
    with open(path) as fr:
        assert json.load(fr)['reference_protocol'] == REFERENCE_PROTOCOL
    assert load_experiment_config(path) == changed


def test_unreadable_files(tmp_path):
    path = tmp_path / 'bad.json'
    path.write_text('{not json')
    with pytest.raises(ConfigError) as e:
        load_experiment_config(str(path))
    assert e.value.path == str(path)
    with pytest.raises(ConfigError):
        load_experiment_config(str(tmp_path / 'missing.json'))
