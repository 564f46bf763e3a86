"""
Network checkpoints. A checkpoint file holds, in this order:

    8 bytes    little-endian unsigned length n of the JSON preamble
    n bytes    UTF-8 JSON: format tag, NetConfig, layout descriptor, parameter
               count, Adam hyper-parameters and step, free-form metadata
    4 P bytes  parameters, little-endian float32
    4 P bytes  Adam first moments m, little-endian float32
    4 P bytes  Adam second moments v, little-endian float32
"""

import json
import os
from typing import Optional, Tuple

import numpy as np

from iusseg.learn.lrn_net import Network, NetConfig, layout
from iusseg.learn.lrn_optim import AdamState, new_adam_state

FORMAT_TAG = 'iusseg-checkpoint/1'


class CheckpointError(Exception):
    def __init__(self, path, reason):
        self.path = path
        self.reason = reason

    def __str__(self):
        return 'Bad checkpoint %s: %s' % (self.path, self.reason)


def save_checkpoint(path: str, net: Network, state: Optional[AdamState] = None, metadata: Optional[dict] = None):
    state = state if state is not None else new_adam_state(net.parameters.size)
    preamble = {'format': FORMAT_TAG, 'config': net.config.to_dict(), 'layout': net.layout,
                'n_parameters': int(net.parameters.size),
                'adam': {'t': state.t, 'lr': state.lr, 'beta1': state.beta1, 'beta2': state.beta2,
                         'epsilon': state.epsilon},
                'metadata': metadata or {}}
    text = json.dumps(preamble).encode('utf-8')
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    try:
        with open(path, 'wb') as fw:
            fw.write(np.array([len(text)], dtype='<u8').tobytes())
            fw.write(text)
            for vector in (net.parameters, state.m, state.v):
                fw.write(np.asarray(vector, dtype='<f4').tobytes())
    except OSError as e:
        raise CheckpointError(path, 'I/O failure (%s)' % e)


def load_checkpoint(path: str) -> Tuple[Network, AdamState, dict]:
    """Returns (network, Adam state, metadata)."""
    if not os.path.isfile(path):
        raise CheckpointError(path, 'missing file')
    with open(path, 'rb') as fr:
        raw = fr.read()
    if len(raw) < 8:
        raise CheckpointError(path, 'truncated preamble length')
    n = int(np.frombuffer(raw[:8], dtype='<u8')[0])
    try:
        preamble = json.loads(raw[8:8 + n].decode('utf-8'))
    except (UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(path, 'unreadable preamble (%s)' % e)
    if preamble.get('format') != FORMAT_TAG:
        raise CheckpointError(path, 'unknown format %r' % preamble.get('format'))
    cfg = NetConfig.from_dict(preamble['config'])
    if preamble['layout'] != layout(cfg):
        raise CheckpointError(path, 'layout descriptor does not match configuration')
    p = int(preamble['n_parameters'])
    body = raw[8 + n:]
    if len(body) != 12 * p:
        raise CheckpointError(path, 'expected %d bytes of vectors, found %d' % (12 * p, len(body)))
    vectors = np.frombuffer(body, dtype='<f4').astype(np.float32).reshape(3, p)
    adam = preamble['adam']
    state = AdamState(vectors[1].copy(), vectors[2].copy(), int(adam['t']), float(adam['lr']),
                      float(adam['beta1']), float(adam['beta2']), float(adam['epsilon']))
    return Network(cfg, vectors[0]), state, preamble.get('metadata', {})
