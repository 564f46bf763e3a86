"""The lrn_net Python module defines the segmentation network: a compact,
configurable fully-convolutional 3D network of densely connected blocks at
several scales, together with its soft Dice loss and reverse-mode gradients (TensorFlow).

Architecture, for NetConfig(in_channels, base_channels, dense_block_layers,
scales, growth, activation):

    stem:       3x3x3 convolution in_channels -> base_channels
    scale s:    dense block of dense_block_layers 3x3x3 convolutions, each
                seeing the concatenation of the block input and all earlier
                layer outputs and adding growth channels; the block output
                is that full concatenation (base + layers * growth channels)
    downscale:  between scales, a stride-2 3x3x3 convolution of the block
                output back to base_channels
    head:       every block output is upsampled (trilinear) to the input
                resolution, all are concatenated and a 1x1x1 convolution to
                one channel followed by the logistic function gives the
                foreground probability

All convolutions are zero padded ('SAME'), so the output has the input's
spatial shape, which must be divisible by 2**(scales - 1).

A Network keeps all its parameters in one flat float32 vector; the layout
descriptor (layout(cfg)) names the slices of that vector: 'stem/w', 'stem/b',
'scale{s}/dense{l}/w', 'scale{s}/dense{l}/b', 'scale{s}/down/w',
'scale{s}/down/b', 'head/w', 'head/b'. Convolution weights have shape
(3, 3, 3, in, out), the TensorFlow filter layout.

Patches handed to forward() and backward() are indexed [C, X, Y, Z].

Classes:
    NetConfig
    Network

Exception classes:
    InvalidNetConfig(Exception)
    ShapeError(Exception):        spatial shape or vector lengths that do not fit
    NonFiniteGradient(Exception): a NaN or infinite gradient

Module level functions:
    layout(cfg), parameter_count(cfg)
    init_network(cfg, seed)
    forward(net, patch)
    soft_dice_loss(pred, target)
    backward(net, patch, target)
    loss_and_gradient(net, patches, targets)
"""

__package__ = 'iusseg.learn'

from dataclasses import dataclass, asdict
from typing import List, Tuple

import numpy as np
import tensorflow as tf

from iusseg.simulate.sim_rng import sequential_rng

SMOOTH = 1e-5
ACTIVATIONS = ('relu', 'elu')

tf.config.experimental.enable_op_determinism()


class InvalidNetConfig(Exception):
    def __init__(self, reason):
        self.reason = reason

    def __str__(self):
        return 'Invalid network configuration: %s' % self.reason


class ShapeError(Exception):
    def __init__(self, reason):
        self.reason = reason

    def __str__(self):
        return 'Shape mismatch: %s' % self.reason


class NonFiniteGradient(Exception):
    def __init__(self, reason='non-finite gradient'):
        self.reason = reason

    def __str__(self):
        return self.reason


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    base_channels: int = 8
    dense_block_layers: int = 2
    scales: int = 3
    growth: int = 4
    activation: str = 'relu'

    def __post_init__(self):
        for name in ('in_channels', 'base_channels', 'growth', 'scales'):
            if int(getattr(self, name)) < 1:
                raise InvalidNetConfig('%s must be >= 1' % name)
        if int(self.dense_block_layers) < 0:
            raise InvalidNetConfig('dense_block_layers must be >= 0')
        if self.activation not in ACTIVATIONS:
            raise InvalidNetConfig('activation must be one of %s' % (ACTIVATIONS,))

    @property
    def block_channels(self) -> int:
        return self.base_channels + self.dense_block_layers * self.growth

    @property
    def divisor(self) -> int:
        return 2 ** (self.scales - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> 'NetConfig':
        try:
            return NetConfig(**{k: (v if k == 'activation' else int(v)) for k, v in d.items()})
        except TypeError as e:
            raise InvalidNetConfig(str(e))


def layout(cfg: NetConfig) -> List[dict]:
    """Layout descriptor: ordered entries {name, shape, offset, size}."""
    shapes = [('stem/w', (3, 3, 3, cfg.in_channels, cfg.base_channels)), ('stem/b', (cfg.base_channels,))]
    for s in range(cfg.scales):
        for l in range(cfg.dense_block_layers):
            cin = cfg.base_channels + l * cfg.growth
            shapes.append(('scale%d/dense%d/w' % (s, l), (3, 3, 3, cin, cfg.growth)))
            shapes.append(('scale%d/dense%d/b' % (s, l), (cfg.growth,)))
        if s < cfg.scales - 1:
            shapes.append(('scale%d/down/w' % s, (3, 3, 3, cfg.block_channels, cfg.base_channels)))
            shapes.append(('scale%d/down/b' % s, (cfg.base_channels,)))
    shapes.append(('head/w', (1, 1, 1, cfg.scales * cfg.block_channels, 1)))
    shapes.append(('head/b', (1,)))
    entries, offset = [], 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        entries.append({'name': name, 'shape': list(shape), 'offset': offset, 'size': size})
        offset += size
    return entries


def parameter_count(cfg: NetConfig) -> int:
    last = layout(cfg)[-1]
    return last['offset'] + last['size']


class Network:
    """Parameters (flat float32 vector) plus the configuration that gives
    them meaning."""

    def __init__(self, config: NetConfig, parameters):
        parameters = np.array(parameters, dtype=np.float32).reshape(-1)
        if parameters.size != parameter_count(config):
            raise ShapeError('%d parameters for a layout of %d' % (parameters.size, parameter_count(config)))
        if not np.all(np.isfinite(parameters)):
            raise InvalidNetConfig('parameters must be finite')
        parameters.flags.writeable = False
        self.config = config
        self.parameters = parameters
        self.layout = layout(config)

    def with_parameters(self, parameters) -> 'Network':
        return Network(self.config, parameters)

    def tensor(self, name: str) -> np.ndarray:
        for entry in self.layout:
            if entry['name'] == name:
                return self.parameters[entry['offset']:entry['offset'] + entry['size']].reshape(entry['shape'])
        raise KeyError(name)

    def equals(self, other: 'Network') -> bool:
        return self.config == other.config and np.array_equal(self.parameters, other.parameters)


def init_network(cfg: NetConfig, seed: int) -> Network:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    rng = sequential_rng(seed, 0)
    params = np.zeros(parameter_count(cfg), dtype=np.float32)
    for entry in layout(cfg):
        if entry['name'].endswith('/w'):
            fan_in = int(np.prod(entry['shape'][:-1]))
            values = rng.standard_normal(entry['size']) * np.sqrt(2.0 / fan_in)
            params[entry['offset']:entry['offset'] + entry['size']] = values.astype(np.float32)
    return Network(cfg, params)


def _unflatten(flat, cfg: NetConfig) -> dict:
    return {e['name']: tf.reshape(flat[e['offset']:e['offset'] + e['size']], e['shape']) for e in layout(cfg)}


def _interpolation_matrix(n_in: int, factor: int, dtype) -> tf.Tensor:
    """(n_in * factor, n_in) linear interpolation with half-pixel centers,
    clamped at the borders."""
    n_out = n_in * factor
    src = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    w = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    m[np.arange(n_out), lo] += 1.0 - w
    m[np.arange(n_out), hi] += w
    return tf.constant(m.astype(dtype.as_numpy_dtype))


def _upsample(x, factor: int):
    if factor == 1:
        return x
    _, nx, ny, nz, _ = x.shape
    x = tf.einsum('ox,bxyzc->boyzc', _interpolation_matrix(nx, factor, x.dtype), x)
    x = tf.einsum('oy,bxyzc->bxozc', _interpolation_matrix(ny, factor, x.dtype), x)
    return tf.einsum('oz,bxyzc->bxyoc', _interpolation_matrix(nz, factor, x.dtype), x)


def _conv(x, w, b, stride=1):
    return tf.nn.conv3d(x, w, strides=[1, stride, stride, stride, 1], padding='SAME') + b


def forward_tensor(flat, x, cfg: NetConfig):
    """Probabilities [B, X, Y, Z, 1] for a batch x [B, X, Y, Z, C]."""
    p = _unflatten(flat, cfg)
    act = tf.nn.relu if cfg.activation == 'relu' else tf.nn.elu
    h = act(_conv(x, p['stem/w'], p['stem/b']))
    outputs = []
    for s in range(cfg.scales):
        features = [h]
        for l in range(cfg.dense_block_layers):
            inputs = tf.concat(features, axis=-1)
            features.append(act(_conv(inputs, p['scale%d/dense%d/w' % (s, l)], p['scale%d/dense%d/b' % (s, l)])))
        block = tf.concat(features, axis=-1)
        outputs.append(_upsample(block, 2 ** s))
        if s < cfg.scales - 1:
            h = act(_conv(block, p['scale%d/down/w' % s], p['scale%d/down/b' % s], stride=2))
    logits = _conv(tf.concat(outputs, axis=-1), p['head/w'], p['head/b'])
    return tf.sigmoid(logits)


def dice_loss_tensor(pred, target):
    """Soft Dice loss per batch element: 1 - (2 sum pg + s) / (sum p^2 + sum g^2 + s)."""
    axes = list(range(1, len(pred.shape)))
    num = 2.0 * tf.reduce_sum(pred * target, axis=axes) + SMOOTH
    den = tf.reduce_sum(pred * pred, axis=axes) + tf.reduce_sum(target * target, axis=axes) + SMOOTH
    return 1.0 - num / den


def _check_patch(cfg: NetConfig, patch: np.ndarray) -> np.ndarray:
    patch = np.asarray(patch)
    if patch.ndim != 4 or patch.shape[0] != cfg.in_channels:
        raise ShapeError('patch must be [C=%d, X, Y, Z], got %s' % (cfg.in_channels, patch.shape))
    if any(n % cfg.divisor for n in patch.shape[1:]):
        raise ShapeError('spatial shape %s not divisible by %d' % (patch.shape[1:], cfg.divisor))
    return patch


def _batch(cfg: NetConfig, patches, dtype) -> tf.Tensor:
    stacked = np.stack([_check_patch(cfg, p) for p in patches])
    return tf.constant(np.transpose(stacked, (0, 2, 3, 4, 1)).astype(dtype.as_numpy_dtype))


def forward(net: Network, patch: np.ndarray) -> np.ndarray:
    """Foreground probabilities [1, X, Y, Z] of a patch [C, X, Y, Z]."""
    probs = forward_tensor(tf.constant(net.parameters), _batch(net.config, [patch], tf.float32), net.config)
    return np.transpose(probs.numpy()[0], (3, 0, 1, 2))


def soft_dice_loss(pred, target) -> Tuple[float, np.ndarray]:
    """Soft Dice loss and its analytic gradient with respect to pred.

    D = (2 sum p g + s) / (sum p^2 + sum g^2 + s), loss = 1 - D,
    d loss / d p_i = -(2 g_i den - 2 p_i num) / den^2, s = SMOOTH.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(target, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError('prediction %s and target %s differ' % (p.shape, g.shape))
    num = 2.0 * np.sum(p * g) + SMOOTH
    den = np.sum(p * p) + np.sum(g * g) + SMOOTH
    grad = -(2.0 * g * den - 2.0 * p * num) / den ** 2
    return float(1.0 - num / den), grad


def loss_and_gradient(net: Network, patches, targets, dtype=tf.float32) -> Tuple[float, np.ndarray]:
    """Mean soft Dice loss of a batch and its gradient with respect to all
    parameters (mean over batch elements, in batch order).

    Raises:
        NonFiniteGradient: if any gradient component is NaN or infinite
    """
    x = _batch(net.config, patches, dtype)
    g = np.stack([np.asarray(t).reshape(np.shape(t)[-3:]) for t in targets])[..., None]
    if tuple(g.shape[:4]) != tuple(x.shape[:4]):
        raise ShapeError('targets %s do not match patches %s' % (g.shape, tuple(x.shape)))
    g = tf.constant(g.astype(dtype.as_numpy_dtype))
    flat = tf.constant(net.parameters.astype(dtype.as_numpy_dtype))
    with tf.GradientTape() as tape:
        tape.watch(flat)
        losses = dice_loss_tensor(forward_tensor(flat, x, net.config), g)
        loss = tf.reduce_mean(losses)
    grad = tape.gradient(loss, flat).numpy()
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient('non-finite gradient (loss %s)' % float(loss.numpy()))
    return float(loss.numpy()), grad


def backward(net: Network, patch, target, dtype=tf.float32) -> np.ndarray:
    """Gradient of the soft Dice loss of one patch [C, X, Y, Z] against its
    target ([X, Y, Z] or [1, X, Y, Z]) with respect to every parameter, in
    the parameter layout."""
    return loss_and_gradient(net, [patch], [target], dtype)[1]
