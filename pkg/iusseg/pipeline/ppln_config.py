"""
Experiment configuration: parsing, validation and the frozen effective
configuration written into every run directory.

An experiment JSON document looks like

    {
        "mode": "finetuned",                      # or "scratch"
        "seed": 0,
        "net": {"base_channels": 8, "dense_block_layers": 2, "scales": 3,
                "growth": 4, "activation": "relu"},
        "schedule": {"phases": [{"dataset_id": "simulated", "iterations": 100, "batch_size": 2},
                                {"dataset_id": "real", "iterations": 100, "batch_size": 2}]},
        "learning_rate": 2e-5,
        "patch": {"size": [32, 32, 32], "pad_value": 0.0, "sampling": "foreground_biased",
                  "foreground_fraction": 0.5},
        "augmentation": {"max_scale_pct": 10, "max_rot_deg": 10,
                         "augment_real": true, "augment_simulated": false},
        "predict": {"overlap": 0.25, "threshold": 0.5},
        "validation": {"validate_every": 0, "use_best_checkpoint": false},
        "real_dataset": "corpus/manifest.json",
        "simulated_dataset": "sim/manifest.json",
        "split_manifest": "splits.json",
        "output_dir": "runs"
    }

Every key but the dataset paths may be omitted. Instead of "schedule", the
shorthand "iterations" and "batch_size" build the default schedule of the
mode: one phase on "real" (scratch), or one on "simulated" followed by one
on "real" (finetuned).
"""

import json
from dataclasses import dataclass, field, replace
from typing import Optional

from iusseg.augment.agmnt import PatchSpec, InvalidPatchSpec
from iusseg.learn.lrn import TrainSchedule, TrainPhase, InvalidSchedule
from iusseg.learn.lrn_net import NetConfig, InvalidNetConfig
from iusseg.learn.lrn_optim import DEFAULT_LEARNING_RATE

MODES = ('scratch', 'finetuned')
REAL = 'real'
SIMULATED = 'simulated'
# the full-scale protocol, recorded alongside every desk-scale run
REFERENCE_PROTOCOL = {'patch_size': [128, 128, 128], 'batch_size': 8, 'iterations_per_phase': 100000,
                      'learning_rate': 2e-5, 'beta1': 0.9, 'beta2': 0.999, 'n_folds': 5,
                      'max_scale_pct': 10, 'max_rot_deg': 10}


class ConfigError(Exception):
    def __init__(self, reason, path=None):
        self.reason = reason
        self.path = path

    def __str__(self):
        if self.path:
            return 'Invalid configuration %s: %s' % (self.path, self.reason)
        return 'Invalid configuration: %s' % self.reason


@dataclass(frozen=True)
class Augmentation:
    max_scale_pct: float = 10.0
    max_rot_deg: float = 10.0
    augment_real: bool = True
    augment_simulated: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    net: NetConfig
    schedule: TrainSchedule
    real_dataset: str
    simulated_dataset: Optional[str] = None
    split_manifest: Optional[str] = None
    output_dir: str = 'runs'
    seed: int = 0
    learning_rate: float = DEFAULT_LEARNING_RATE
    patch: PatchSpec = field(default_factory=lambda: PatchSpec((32, 32, 32)))
    augmentation: Augmentation = field(default_factory=Augmentation)
    overlap: float = 0.25
    threshold: float = 0.5
    validate_every: int = 0
    use_best_checkpoint: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError('mode must be one of %s, got %r' % (MODES, self.mode))
        datasets = [p.dataset_id for p in self.schedule.phases]
        if self.mode == 'scratch' and datasets != [REAL]:
            raise ConfigError('scratch mode needs exactly one phase, on %r; got %s' % (REAL, datasets))
        if self.mode == 'finetuned':
            if datasets != [SIMULATED, REAL]:
                raise ConfigError('finetuned mode needs a %r phase followed by a %r phase; got %s'
                                  % (SIMULATED, REAL, datasets))
            if not self.simulated_dataset:
                raise ConfigError('finetuned mode needs simulated_dataset')
        if not 0.0 <= self.overlap < 1.0 or not 0.0 < self.threshold < 1.0:
            raise ConfigError('overlap must lie in [0, 1) and threshold in (0, 1)')
        if any(s % self.net.divisor for s in self.patch.size):
            raise ConfigError('patch size %s must be divisible by %d' % (self.patch.size, self.net.divisor))

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None) -> 'ExperimentConfig':
        changes = {}
        if seed is not None:
            changes['seed'] = int(seed)
            changes['schedule'] = replace(self.schedule, seed=int(seed))
        if output_dir is not None:
            changes['output_dir'] = output_dir
        return replace(self, **changes)

    def to_dict(self) -> dict:
        a = self.augmentation
        return {'mode': self.mode, 'seed': self.seed, 'net': self.net.to_dict(),
                'schedule': self.schedule.to_dict(), 'learning_rate': self.learning_rate,
                'patch': self.patch.to_dict(),
                'augmentation': {'max_scale_pct': a.max_scale_pct, 'max_rot_deg': a.max_rot_deg,
                                 'augment_real': a.augment_real, 'augment_simulated': a.augment_simulated},
                'predict': {'overlap': self.overlap, 'threshold': self.threshold},
                'validation': {'validate_every': self.validate_every,
                               'use_best_checkpoint': self.use_best_checkpoint},
                'real_dataset': self.real_dataset, 'simulated_dataset': self.simulated_dataset,
                'split_manifest': self.split_manifest, 'output_dir': self.output_dir,
                'reference_protocol': REFERENCE_PROTOCOL}


def default_schedule(mode: str, iterations: int, batch_size: int, seed: int) -> TrainSchedule:
    phases = [TrainPhase(REAL, iterations, batch_size)]
    if mode == 'finetuned':
        phases.insert(0, TrainPhase(SIMULATED, iterations, batch_size))
    return TrainSchedule(tuple(phases), seed)


def experiment_config_from_dict(d: dict) -> ExperimentConfig:
    try:
        mode = str(d.get('mode', 'scratch'))
        seed = int(d.get('seed', 0))
        net = NetConfig.from_dict(d.get('net', {}))
        if 'schedule' in d:
            schedule = TrainSchedule.from_dict(dict(d['schedule'], seed=d['schedule'].get('seed', seed)))
        else:
            schedule = default_schedule(mode, int(d.get('iterations', 100)), int(d.get('batch_size', 2)), seed)
        aug = d.get('augmentation', {})
        predict = d.get('predict', {})
        validation = d.get('validation', {})
        if 'real_dataset' not in d:
            raise ConfigError('real_dataset is required')
        return ExperimentConfig(
            mode=mode, net=net, schedule=schedule, real_dataset=str(d['real_dataset']),
            simulated_dataset=d.get('simulated_dataset'), split_manifest=d.get('split_manifest'),
            output_dir=str(d.get('output_dir', 'runs')), seed=seed,
            learning_rate=float(d.get('learning_rate', DEFAULT_LEARNING_RATE)),
            patch=PatchSpec.from_dict(d.get('patch', {'size': [32, 32, 32]})),
            augmentation=Augmentation(float(aug.get('max_scale_pct', 10.0)), float(aug.get('max_rot_deg', 10.0)),
                                      bool(aug.get('augment_real', True)), bool(aug.get('augment_simulated', False))),
            overlap=float(predict.get('overlap', 0.25)), threshold=float(predict.get('threshold', 0.5)),
            validate_every=int(validation.get('validate_every', 0)),
            use_best_checkpoint=bool(validation.get('use_best_checkpoint', False)))
    except (InvalidNetConfig, InvalidSchedule, InvalidPatchSpec) as e:
        raise ConfigError(str(e))
    except (TypeError, ValueError, AttributeError) as e:
        raise ConfigError('malformed experiment configuration (%s)' % e)


def load_experiment_config(path: str) -> ExperimentConfig:
    try:
        with open(path, 'r') as fr:
            d = json.load(fr)
    except OSError as e:
        raise ConfigError('cannot read (%s)' % e, path)
    except ValueError as e:
        raise ConfigError('not valid JSON (%s)' % e, path)
    try:
        return experiment_config_from_dict(d)
    except ConfigError as e:
        raise ConfigError(e.reason, path)


def save_experiment_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, 'w') as fw:
        json.dump(cfg.to_dict(), fw, indent=4)
