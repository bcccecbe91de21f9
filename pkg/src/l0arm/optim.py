"""Adam and Nesterov-momentum SGD over a flat dict of named arrays, plus LR schedules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class NesterovHyper:
    lr: float = 0.1
    momentum: float = 0.9


def init_state(params: dict[str, np.ndarray], kind: str) -> dict:
    if kind == "adam":
        return {
            "t": 0,
            "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()},
        }
    if kind == "nesterov":
        return {"t": 0, "buf": {k: np.zeros_like(v) for k, v in params.items()}}
    raise ValueError(f"unknown optimizer {kind!r}")


def adam_update(params, grads, state, hyper: AdamHyper, lr: float | None = None):
    """In-place Adam step with bias correction. Returns ``state``."""
    lr = hyper.lr if lr is None else lr
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - hyper.beta1**t
    c2 = 1.0 - hyper.beta2**t
    for k, p in params.items():
        g = grads[k]
        m, v = state["m"][k], state["v"][k]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        p -= step.astype(p.dtype, copy=False)
    return state


def nesterov_update(params, grads, state, hyper: NesterovHyper, lr: float | None = None):
    """In-place SGD with Nesterov momentum: buf = mu*buf + g; p -= lr*(g + mu*buf)."""
    lr = hyper.lr if lr is None else lr
    state["t"] += 1
    for k, p in params.items():
        g = grads[k]
        buf = state["buf"][k]
        buf *= hyper.momentum
        buf += g
        p -= (lr * (g + hyper.momentum * buf)).astype(p.dtype, copy=False)
    return state


def halve_every(base_lr: float, epoch: int, every: int) -> float:
    """LR for a 0-based ``epoch`` when halving every ``every`` epochs."""
    return base_lr * 0.5 ** (epoch // every)


def multistep(base_lr: float, epoch: int, milestones, factor: float) -> float:
    return base_lr * factor ** sum(1 for m in milestones if epoch >= m)
