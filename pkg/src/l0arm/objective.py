"""L0-regularized stochastic objective and its gradient.

The data term is the minibatch loss under sampled binary gates; its phi
gradient comes from the ARM or AR estimator. The expected-L0 term and the
optional expected L1/L2 shrinkage terms are deterministic in phi.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .estimators import ar_grad, arm_grad
from .gates import GateBank, sample_masks
from .nn import GatedNetwork, loss


@dataclass
class RegularizationSpec:
    """Regularization strengths, already divided by the training-set size.

    ``lambda_l0`` is a scalar or one value per gate layer. ``group_weighted``
    multiplies each gate's L0 penalty by the number of weights it covers.
    """

    lambda_l0: float | list[float] = 0.0
    lambda_l1: float = 0.0
    lambda_l2: float = 0.0
    group_weighted: bool = True

    def __post_init__(self):
        vals = np.atleast_1d(np.asarray(self.lambda_l0, dtype=np.float64))
        for v in (*vals, self.lambda_l1, self.lambda_l2):
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"regularization coefficients must be finite and >= 0, got {v}")

    @classmethod
    def from_scaled(cls, lambda_scaled, n_train: int, **kw) -> "RegularizationSpec":
        lam = np.asarray(lambda_scaled, dtype=np.float64) / n_train
        return cls(lam.tolist() if lam.ndim else float(lam), **kw)

    def per_gate_lambda(self, bank: GateBank) -> np.ndarray:
        lam = np.atleast_1d(np.asarray(self.lambda_l0, dtype=np.float64))
        if lam.size == 1:
            return np.full(bank.size, lam[0])
        if lam.size != len(bank.layers):
            raise ValueError(f"{lam.size} lambda values for {len(bank.layers)} gate layers")
        return lam[bank.layer_index()]


def _l0_weights(bank: GateBank, spec: RegularizationSpec, group_sizes=None) -> np.ndarray:
    w = spec.per_gate_lambda(bank)
    if spec.group_weighted:
        sizes = bank.group_sizes if group_sizes is None else np.asarray(group_sizes, dtype=np.float64)
        w = w * sizes
    return w


def expected_l0(bank: GateBank, spec: RegularizationSpec, group_sizes=None) -> float:
    return float(np.sum(_l0_weights(bank, spec, group_sizes) * bank.probs()))


def expected_l0_grad(bank: GateBank, spec: RegularizationSpec, group_sizes=None) -> np.ndarray:
    return _l0_weights(bank, spec, group_sizes) * bank.gate_fn.grad(bank.phi)


def _group_reduce(weights, n_gates, fn):
    w = np.asarray(weights, dtype=np.float64)
    if w.shape[0] != n_gates:
        raise ValueError(f"weight groups ({w.shape[0]}) not aligned with {n_gates} gates")
    return fn(w).reshape(n_gates, -1).sum(1)


def expected_l1(probs, weights):
    """sum_g pi_g * sum_{j in g} |w_j|; ``weights`` has one leading row per gate.

    Returns (value, d/dpi, d/dweights).
    """
    probs = np.asarray(probs, dtype=np.float64)
    norms = _group_reduce(weights, probs.size, np.abs)
    pshape = (-1,) + (1,) * (np.ndim(weights) - 1)
    return float(probs @ norms), norms, probs.reshape(pshape) * np.sign(weights)


def expected_l2(probs, weights):
    """sum_g pi_g * sum_{j in g} w_j^2. Returns (value, d/dpi, d/dweights)."""
    probs = np.asarray(probs, dtype=np.float64)
    norms = _group_reduce(weights, probs.size, np.square)
    pshape = (-1,) + (1,) * (np.ndim(weights) - 1)
    return float(probs @ norms), norms, 2.0 * probs.reshape(pshape) * np.asarray(weights)


def shrinkage(net: GatedNetwork, bank: GateBank, spec: RegularizationSpec):
    """Expected L1/L2 penalty on gated weight groups.

    Returns (value, grad_phi, grad_params) where grad_params maps layer name
    to the W gradient contribution.
    """
    grad_phi = np.zeros(bank.size)
    grad_params: dict[str, np.ndarray] = {}
    value = 0.0
    if spec.lambda_l1 == 0 and spec.lambda_l2 == 0:
        return value, grad_phi, grad_params
    probs = bank.split(bank.probs())
    dg = bank.split(bank.gate_fn.grad(bank.phi))
    off = dict(zip((l.name for l in bank.layers), bank.offsets))
    for layer in bank.layers:
        try:
            pname, _ = net.gated_weights(layer.name)
        except KeyError:
            continue
        W = net.params[pname]["W"].astype(np.float64)
        sl = slice(off[layer.name], off[layer.name] + layer.size)
        for lam, fn in ((spec.lambda_l1, expected_l1), (spec.lambda_l2, expected_l2)):
            if lam == 0:
                continue
            v, d_pi, d_w = fn(probs[layer.name], W)
            value += lam * v
            grad_phi[sl] += lam * d_pi * dg[layer.name]
            grad_params[pname] = grad_params.get(pname, 0.0) + lam * d_w
    return value, grad_phi, grad_params


@dataclass
class StepResult:
    objective: float
    data_loss: float
    l0_term: float
    shrink_term: float
    grad_params: dict
    grad_phi: np.ndarray
    forward_passes: int
    f_anti: float | None = None
    extra: dict = field(default_factory=dict)


def objective_step(
    net: GatedNetwork,
    bank: GateBank,
    x,
    y,
    spec: RegularizationSpec,
    estimator: str = "arm",
    rng: np.random.Generator | None = None,
    loss_kind: str = "cross_entropy",
    iteration: int = 0,
    sample=None,
    grad_space: str = "phi",
) -> StepResult:
    """One stochastic evaluation of the objective and its gradients.

    Weight gradients come from the z_true pass only; the antithetic pass (ARM)
    feeds the phi gradient alone.
    """
    if estimator not in ("arm", "ar"):
        raise ValueError(f"estimator must be 'arm' or 'ar', got {estimator!r}")
    if sample is None:
        sample = sample_masks(bank, rng, iteration)
    logits, cache = net.forward(x, bank.split(sample.z_true))
    f_true, dlogits = loss(logits, y, loss_kind)
    grads = net.backward(cache, dlogits)
    passes = 1

    l0_grad = expected_l0_grad(bank, spec)
    scale = bank.gate_fn.logit_jacobian(bank.phi) if grad_space == "phi" else None
    f_anti = None
    if estimator == "arm":
        logits_a, _ = net.forward(x, bank.split(sample.z_anti), keep_cache=False)
        f_anti, _ = loss(logits_a, y, loss_kind)
        passes += 1
        est = arm_grad(f_true, f_anti, sample.u, l0_grad, scale=scale)
    else:
        est = ar_grad(f_true, sample.u, l0_grad, scale=scale)

    shrink_value, shrink_phi, shrink_params = shrinkage(net, bank, spec)
    for pname, g in shrink_params.items():
        grads[pname]["W"] = grads[pname]["W"] + g.astype(grads[pname]["W"].dtype)
    l0 = expected_l0(bank, spec)
    return StepResult(
        objective=f_true + l0 + shrink_value,
        data_loss=f_true,
        l0_term=l0,
        shrink_term=shrink_value,
        grad_params=grads,
        grad_phi=est.grad_phi + shrink_phi,
        forward_passes=passes,
        f_anti=f_anti,
    )
