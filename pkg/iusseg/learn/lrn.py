"""The lrn Python module trains segmentation networks and applies them to
whole volumes.

Training follows a TrainSchedule: an ordered list of phases, each naming a
dataset, an iteration count and a batch size. Parameters carry over from one
phase to the next (that carry is what pre-training on simulations and then
fine-tuning on real data amounts to); every phase starts with a fresh Adam
state. Per iteration, a batch of patches is drawn, the soft Dice loss
gradients of the batch elements are averaged in batch order and one Adam step
is taken. The loss of every iteration is recorded.

Batches are counter-based: element b of iteration i of a phase on dataset d
is drawn with key (schedule seed, crc32(d), i * batch_size + b). A phase
therefore yields the same losses whether it runs as part of a longer schedule
or on its own from the same starting parameters.

Classes:
    TrainPhase, TrainSchedule
    PatchSource:  image/label pairs of one dataset, with patch and
                  augmentation settings
    TrainResult:  final network, loss curve, Adam state, best-validation
                  network

Exception classes:
    InvalidSchedule(Exception)
    TrainingDiverged(Exception): non-finite loss or gradient during training

Module level functions:
    train(net, schedule, data, ...)
    predict_probabilities(net, vol, patch, overlap)
    predict_volume(net, vol, patch, overlap, threshold)
    validation_loss(net, pairs)
"""

__package__ = 'iusseg.learn'

import zlib
from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from iusseg.log.log import logger
from iusseg.volume.vol import Volume3D
from iusseg.augment.agmnt import PatchSpec, augment_pair, sample_patch
from iusseg.simulate.sim_rng import hash_counters, counter_uniform, STREAM_BATCH
from iusseg.learn.lrn_net import (Network, NonFiniteGradient, ShapeError, forward, loss_and_gradient,
                                  soft_dice_loss)
from iusseg.learn.lrn_optim import AdamState, adam_step, new_adam_state, DEFAULT_LEARNING_RATE

CURVE_COLUMNS = ['iteration', 'phase', 'dataset', 'loss']


class InvalidSchedule(Exception):
    def __init__(self, reason):
        self.reason = reason

    def __str__(self):
        return 'Invalid training schedule: %s' % self.reason


class TrainingDiverged(Exception):
    """Raised when the loss or the gradient stops being finite.

    Attributes:
        phase (int), iteration (int), dataset (str), loss (float)
    """

    def __init__(self, phase, iteration, dataset, loss, reason=''):
        self.phase = phase
        self.iteration = iteration
        self.dataset = dataset
        self.loss = loss
        self.reason = reason

    def __str__(self):
        return ('Training diverged in phase %d (%s) at iteration %d: loss %s %s'
                % (self.phase, self.dataset, self.iteration, self.loss, self.reason)).rstrip()


@dataclass(frozen=True)
class TrainPhase:
    dataset_id: str
    iterations: int
    batch_size: int = 8

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise InvalidSchedule('phase %r needs at least one iteration' % self.dataset_id)
        if int(self.batch_size) < 1:
            raise InvalidSchedule('phase %r needs a batch size >= 1' % self.dataset_id)


@dataclass(frozen=True)
class TrainSchedule:
    phases: Tuple[TrainPhase, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'phases', tuple(self.phases))
        if len(self.phases) == 0:
            raise InvalidSchedule('a schedule needs at least one phase')

    def to_dict(self) -> dict:
        return {'seed': self.seed, 'phases': [{'dataset_id': p.dataset_id, 'iterations': p.iterations,
                                               'batch_size': p.batch_size} for p in self.phases]}

    @staticmethod
    def from_dict(d: dict) -> 'TrainSchedule':
        try:
            phases = [TrainPhase(str(p['dataset_id']), int(p['iterations']), int(p.get('batch_size', 8)))
                      for p in d['phases']]
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidSchedule('malformed schedule (%s)' % e)
        return TrainSchedule(tuple(phases), int(d.get('seed', 0)))


class PatchSource:
    """Training pairs of one dataset.

    Attributes:
        pairs (list):          (image Volume3D, label Volume3D) on shared grids
        spec (PatchSpec):      patch size and sampling policy
        augment (bool):        apply a random similarity before cutting
        max_scale_pct (float), max_rot_deg (float): augmentation bounds
    """

    def __init__(self, pairs: Sequence[Tuple[Volume3D, Volume3D]], spec: PatchSpec, augment: bool = False,
                 max_scale_pct: float = 10.0, max_rot_deg: float = 10.0):
        self.pairs = list(pairs)
        self.spec = spec
        self.augment = augment
        self.max_scale_pct = max_scale_pct
        self.max_rot_deg = max_rot_deg

    def __len__(self):
        return len(self.pairs)

    def draw(self, seed: int, index: int) -> Tuple[np.ndarray, np.ndarray]:
        """Patch [1, X, Y, Z] (float32) and binary target [X, Y, Z] (float32)."""
        k = min(int(counter_uniform(seed, STREAM_BATCH, index) * len(self.pairs)), len(self.pairs) - 1)
        image, label = self.pairs[k]
        if self.augment:
            image, label = augment_pair(image, label, seed, index, self.max_scale_pct, self.max_rot_deg)
        sample = sample_patch(image, label, self.spec, seed, index)
        return sample.image[None], (sample.label > 0).astype(np.float32)


@dataclass
class TrainResult:
    network: Network
    curve: pd.DataFrame
    adam_state: AdamState
    phase_start_parameters: List[np.ndarray] = field(default_factory=list)
    best_network: Optional[Network] = None
    best_validation_loss: Optional[float] = None
    validation: Optional[pd.DataFrame] = None


def validation_loss(net: Network, pairs: Sequence[Tuple[np.ndarray, np.ndarray]]) -> float:
    """Mean soft Dice loss of fixed (patch, target) pairs."""
    losses = [soft_dice_loss(forward(net, patch)[0], target.reshape(target.shape[-3:]))[0]
              for patch, target in pairs]
    return float(np.mean(losses))


def _dataset_seed(seed: int, dataset_id: str) -> int:
    return int(hash_counters(seed, STREAM_BATCH, zlib.crc32(dataset_id.encode('utf-8'))))


def train(net: Network, schedule: TrainSchedule, data: Mapping[str, PatchSource],
          lr: float = DEFAULT_LEARNING_RATE, validation: Optional[Sequence[Tuple[np.ndarray, np.ndarray]]] = None,
          validate_every: int = 0, log_every: int = 50) -> TrainResult:
    """Run a schedule's phases in order, starting from net.

    Args:
        data (dict):           dataset_id -> PatchSource
        lr (float):            Adam learning rate
        validation (list):     optional fixed (patch, target) pairs; their
                               mean loss is evaluated every validate_every
                               iterations and at the end of each phase, and
                               the network with the lowest one is kept

    Raises:
        InvalidSchedule:  for a dataset that is missing or empty
        TrainingDiverged: when a loss or gradient is not finite

    Returns:
        TrainResult
    """
    for phase in schedule.phases:
        if phase.dataset_id not in data:
            raise InvalidSchedule('dataset %r is not available' % phase.dataset_id)
        if len(data[phase.dataset_id]) == 0:
            raise InvalidSchedule('dataset %r is empty' % phase.dataset_id)
    rows, val_rows, starts = [], [], []
    best_net, best_loss = None, None
    params = net.parameters
    state = new_adam_state(params.size, lr)
    step = 0
    for phase_index, phase in enumerate(schedule.phases):
        logger.info('training phase %d on %r: %d iterations, batch size %d', phase_index, phase.dataset_id,
                    phase.iterations, phase.batch_size)
        starts.append(params.copy())
        source = data[phase.dataset_id]
        seed = _dataset_seed(schedule.seed, phase.dataset_id)
        state = new_adam_state(params.size, lr)
        current = net.with_parameters(params)
        for iteration in range(phase.iterations):
            batch = [source.draw(seed, iteration * phase.batch_size + b) for b in range(phase.batch_size)]
            try:
                loss, grad = loss_and_gradient(current, [p for p, _ in batch], [t for _, t in batch])
            except NonFiniteGradient as e:
                logger.error('non-finite gradient in phase %d at iteration %d', phase_index, iteration)
                raise TrainingDiverged(phase_index, iteration, phase.dataset_id, float('nan'), e.reason)
            if not np.isfinite(loss):
                logger.error('non-finite loss in phase %d at iteration %d', phase_index, iteration)
                raise TrainingDiverged(phase_index, iteration, phase.dataset_id, loss)
            params, state = adam_step(params, grad, state)
            current = net.with_parameters(params)
            rows.append((iteration, phase_index, phase.dataset_id, loss))
            step += 1
            if log_every and (iteration + 1) % log_every == 0:
                logger.info('phase %d iteration %d: loss %.6f', phase_index, iteration + 1, loss)
            last = iteration == phase.iterations - 1
            if validation and ((validate_every and step % validate_every == 0) or last):
                vloss = validation_loss(current, validation)
                val_rows.append((step, phase_index, vloss))
                if best_loss is None or vloss < best_loss:
                    best_loss, best_net = vloss, current
    curve = pd.DataFrame(rows, columns=CURVE_COLUMNS)
    val = pd.DataFrame(val_rows, columns=['step', 'phase', 'loss']) if validation else None
    return TrainResult(net.with_parameters(params), curve, state, starts, best_net, best_loss, val)


def _tile_starts(n: int, p: int, step: int) -> List[int]:
    last = max(n - p, 0)
    starts = list(range(0, last + 1, step))
    if starts[-1] != last:
        starts.append(last)
    return starts


def predict_probabilities(net: Network, vol: Volume3D, patch: PatchSpec, overlap: float = 0.25) -> Volume3D:
    """Sliding-window foreground probabilities on the grid of vol; windows
    overlapping a voxel are averaged. Windows sticking out of a small volume
    are padded with patch.pad_value."""
    if net.config.in_channels != 1:
        raise ShapeError('whole-volume prediction needs a single-channel network')
    if not 0.0 <= overlap < 1.0:
        raise ShapeError('overlap must lie in [0, 1), got %s' % overlap)
    size = patch.size
    if any(p % net.config.divisor for p in size):
        raise ShapeError('patch %s not divisible by %d' % (size, net.config.divisor))
    data = vol.data.astype(np.float32)
    total = np.zeros(vol.dims, dtype=np.float64)
    count = np.zeros(vol.dims, dtype=np.float64)
    steps = [max(1, int(np.floor(p * (1.0 - overlap)))) for p in size]
    axes = [_tile_starts(n, p, s) for n, p, s in zip(vol.dims, size, steps)]
    for x0 in axes[0]:
        for y0 in axes[1]:
            for z0 in axes[2]:
                window = np.full(size, patch.pad_value, dtype=np.float32)
                src = (slice(x0, min(x0 + size[0], vol.dims[0])), slice(y0, min(y0 + size[1], vol.dims[1])),
                       slice(z0, min(z0 + size[2], vol.dims[2])))
                extent = tuple(s.stop - s.start for s in src)
                window[:extent[0], :extent[1], :extent[2]] = data[src]
                probs = forward(net, window[None])[0]
                total[src] += probs[:extent[0], :extent[1], :extent[2]]
                count[src] += 1.0
    return vol.with_data((total / count).astype(np.float32), copy=False)


def predict_volume(net: Network, vol: Volume3D, patch: PatchSpec, overlap: float = 0.25,
                   threshold: float = 0.5) -> Volume3D:
    """Binary uint8 segmentation: 1 where the averaged probability exceeds
    threshold."""
    if not 0.0 < threshold < 1.0:
        raise ShapeError('threshold must lie in (0, 1), got %s' % threshold)
    probs = predict_probabilities(net, vol, patch, overlap)
    return vol.with_data((probs.data > threshold).astype(np.uint8), copy=False)
