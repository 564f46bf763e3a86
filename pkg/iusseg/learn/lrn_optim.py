"""
Adam on flat parameter vectors. Defaults: learning rate 2e-5, beta1 0.9,
beta2 0.999, epsilon 1e-8.
"""

from dataclasses import dataclass

import numpy as np

from iusseg.learn.lrn_net import ShapeError, NonFiniteGradient

DEFAULT_LEARNING_RATE = 2e-5


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = DEFAULT_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def equals(self, other: 'AdamState') -> bool:
        return (np.array_equal(self.m, other.m) and np.array_equal(self.v, other.v)
                and (self.t, self.lr, self.beta1, self.beta2, self.epsilon)
                == (other.t, other.lr, other.beta1, other.beta2, other.epsilon))


def new_adam_state(n: int, lr: float = DEFAULT_LEARNING_RATE, beta1: float = 0.9, beta2: float = 0.999,
                   epsilon: float = 1e-8) -> AdamState:
    return AdamState(np.zeros(n, dtype=np.float32), np.zeros(n, dtype=np.float32), 0, lr, beta1, beta2, epsilon)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update.

    Raises:
        ShapeError:        if params, grads and the state differ in length
        NonFiniteGradient: if a gradient component is NaN or infinite

    Returns:
        tuple: (new float32 parameters, new AdamState)
    """
    p = np.asarray(params, dtype=np.float64).reshape(-1)
    g = np.asarray(grads, dtype=np.float64).reshape(-1)
    if p.size != g.size or p.size != state.m.size or p.size != state.v.size:
        raise ShapeError('adam_step: %d parameters, %d gradients, state of %d'
                         % (p.size, g.size, state.m.size))
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient('adam_step: %d non-finite gradient components' % np.count_nonzero(~np.isfinite(g)))
    t = state.t + 1
    m = state.beta1 * state.m.astype(np.float64) + (1.0 - state.beta1) * g
    v = state.beta2 * state.v.astype(np.float64) + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    p = p - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(m.astype(np.float32), v.astype(np.float32), t, state.lr, state.beta1, state.beta2,
                          state.epsilon)
    return p.astype(np.float32), new_state
