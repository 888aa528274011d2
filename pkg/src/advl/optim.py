"""Adam with bias correction, used by both the attacks and training."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Moment estimates and step count for one array of variables."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    extra: dict = field(default_factory=dict, repr=False)

    @classmethod
    def zeros_like(cls, w, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(np.zeros_like(w, dtype=np.float64), np.zeros_like(w, dtype=np.float64),
                   0, lr, beta1, beta2, eps)


def adam_step(state, w, grad, mask=None):
    """One Adam update of ``w`` against ``grad``.

    Returns ``(state, w_new)``; the state is updated in place. ``mask`` is an
    optional boolean array over the leading axis selecting which rows take the
    step, which lets a batch of independent problems share one state while
    finished rows stay frozen.
    """
    g = np.asarray(grad, dtype=np.float64)
    if mask is None:
        state.t += 1
        t = state.t
        state.m = state.beta1 * state.m + (1 - state.beta1) * g
        state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
        mhat = state.m / (1 - state.beta1 ** t)
        vhat = state.v / (1 - state.beta2 ** t)
        step = state.lr * mhat / (np.sqrt(vhat) + state.eps)
        return state, (w - step).astype(np.result_type(w), copy=False)

    # per-row step counters for masked batches
    steps = state.extra.setdefault("steps", np.zeros(w.shape[0], dtype=np.int64))
    steps[mask] += 1
    state.t = int(steps.max())
    gm = g[mask]
    state.m[mask] = state.beta1 * state.m[mask] + (1 - state.beta1) * gm
    state.v[mask] = state.beta2 * state.v[mask] + (1 - state.beta2) * gm * gm
    t = steps[mask].reshape((-1,) + (1,) * (w.ndim - 1))
    mhat = state.m[mask] / (1 - state.beta1 ** t)
    vhat = state.v[mask] / (1 - state.beta2 ** t)
    w = w.copy()
    w[mask] = w[mask] - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return state, w
