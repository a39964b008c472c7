"""Adam with bias correction, applied block by block."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr):
    """One Adam update of every block in ``grads``.

    ``params`` and ``grads`` map block names to arrays; ``lr`` is a float or a
    per-block mapping. Returns a new ``params`` dict; ``state`` is advanced in
    place and also returned.
    """
    state.t += 1
    t = state.t
    out = dict(params)
    for name, g in grads.items():
        p = np.asarray(params[name], dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch for {name!r}: {p.shape} vs {g.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        step = lr[name] if isinstance(lr, dict) else lr
        if step == 0.0:
            out[name] = p
        else:
            out[name] = p - step * m_hat / (np.sqrt(v_hat) + state.eps)
    return out, state
