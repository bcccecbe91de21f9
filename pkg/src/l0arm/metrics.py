"""Prune rate, pruned architecture, expected FLOPs and g(phi) histograms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gates import GateBank
from .nn import GatedNetwork

HIST_BINS = 50
# forward-equivalent passes per training step; backward is charged as two forwards
TRAIN_PASS_FACTOR = {"arm": 4, "ar": 3}


def _check_tau(tau):
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")


def threshold_mask(bank: GateBank, tau: float = 0.5) -> np.ndarray:
    """Inference mask: 0 where g(phi) <= tau, g(phi) otherwise."""
    _check_tau(tau)
    pi = bank.probs()
    return np.where(pi <= tau, 0.0, pi)


def pruned_architecture(bank: GateBank, tau: float = 0.5) -> list[int]:
    _check_tau(tau)
    active = bank.probs() > tau
    return [int(a.sum()) for a in bank.split(active).values()]


def arch_string(counts) -> str:
    return "-".join(str(int(c)) for c in counts)


def _per_gate(net: GatedNetwork, values) -> dict[str, np.ndarray]:
    if isinstance(values, dict):
        return {k: np.asarray(v, dtype=np.float64) for k, v in values.items()}
    values = np.asarray(values, dtype=np.float64)
    out, start = {}, 0
    for g in net.gates:
        out[g.name] = values[start:start + g.size]
        start += g.size
    if start != values.size:
        raise ValueError(f"expected {start} gate values, got {values.size}")
    return out


def _unit_count(gate, values, full):
    return full if gate is None else float(np.sum(values[gate.name]))


def weight_counts(net: GatedNetwork, mask) -> tuple[float, float]:
    """(active weights, total weights). Biases are not counted.

    A weight is active when both the unit feeding it and the unit it feeds are
    active. Units of the output layer and ungated inputs are always active.
    """
    active_units = {k: (v > 0).astype(np.float64) for k, v in _per_gate(net, mask).items()}
    active = total = 0.0
    for _, layer, gin, gout in net.weighted_layers():
        if layer.kind == "dense":
            n_in, n_out, per = layer.in_features, layer.out_features, 1
        else:
            n_in, n_out, per = layer.in_channels, layer.out_channels, layer.kernel**2
        total += n_in * n_out * per
        active += _unit_count(gin, active_units, n_in) * _unit_count(gout, active_units, n_out) * per
    return active, total


def prune_rate(net: GatedNetwork, mask) -> float:
    active, total = weight_counts(net, mask)
    return 1.0 - active / total


def expected_flops(net: GatedNetwork, gate_probs) -> float:
    """Forward-pass FLOPs under expected active unit counts.

    Dense: 2 * E[n_in] * E[n_out]. Conv: 2 * k^2 * E[C_in] * E[C_out] * H_out * W_out.
    Max-pool: one op per output element of an active channel. Elementwise
    activations and bias adds are not charged.
    """
    probs = _per_gate(net, gate_probs)
    flops = 0.0
    for i, layer, gin, gout in net.weighted_layers():
        if layer.kind == "dense":
            flops += 2.0 * _unit_count(gin, probs, layer.in_features) * _unit_count(gout, probs, layer.out_features)
        else:
            _, ho, wo = net.shapes[i + 1]
            cin = _unit_count(gin, probs, layer.in_channels)
            cout = _unit_count(gout, probs, layer.out_channels)
            flops += 2.0 * layer.kernel**2 * cin * cout * ho * wo
    for i, layer in enumerate(net.layers):
        if layer.kind != "maxpool":
            continue
        c, ho, wo = net.shapes[i + 1]
        gate = next((l for l in reversed(net.layers[:i]) if l.kind == "gate"), None)
        active_c = c if gate is None or gate.size != c else float(np.sum(probs[gate.name]))
        flops += active_c * ho * wo
    return flops


def training_flops(net: GatedNetwork, gate_probs, estimator: str) -> float:
    return expected_flops(net, gate_probs) * TRAIN_PASS_FACTOR[estimator]


def gate_histogram(bank: GateBank, bins: int = HIST_BINS) -> np.ndarray:
    counts, _ = np.histogram(bank.probs(), bins=bins, range=(0.0, 1.0))
    return counts


def mid_mass(bank: GateBank, lo: float = 0.1, hi: float = 0.9) -> float:
    """Fraction of gates with lo < g(phi) < hi."""
    pi = bank.probs()
    return float(np.mean((pi > lo) & (pi < hi)))


@dataclass
class SparsityReport:
    pruned_arch: list[int]
    original_arch: list[int]
    prune_rate: float
    exp_flops_fwd: float
    histogram: list[int]
    tau: float
    extra: dict = field(default_factory=dict)

    @property
    def arch(self) -> str:
        return arch_string(self.pruned_arch)

    def to_dict(self):
        d = {
            "tau": self.tau,
            "pruned_arch": list(self.pruned_arch),
            "original_arch": list(self.original_arch),
            "arch": self.arch,
            "prune_rate": self.prune_rate,
            "exp_flops_fwd": self.exp_flops_fwd,
            "histogram": list(self.histogram),
        }
        d.update(self.extra)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {"tau", "pruned_arch", "original_arch", "arch", "prune_rate", "exp_flops_fwd", "histogram"}
        return cls(
            list(d["pruned_arch"]), list(d["original_arch"]), d["prune_rate"], d["exp_flops_fwd"],
            list(d["histogram"]), d["tau"], {k: v for k, v in d.items() if k not in known},
        )


def sparsity_report(net: GatedNetwork, bank: GateBank, tau: float = 0.5) -> SparsityReport:
    mask = threshold_mask(bank, tau)
    return SparsityReport(
        pruned_arch=pruned_architecture(bank, tau),
        original_arch=[l.size for l in bank.layers],
        prune_rate=prune_rate(net, mask),
        exp_flops_fwd=expected_flops(net, bank.probs()),
        histogram=gate_histogram(bank).tolist(),
        tau=tau,
    )


def tau_sweep(net: GatedNetwork, bank: GateBank, taus=(0.3, 0.4, 0.5, 0.6, 0.7)) -> list[SparsityReport]:
    return [sparsity_report(net, bank, t) for t in taus]
