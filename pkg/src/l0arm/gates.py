"""Antithetic gate functions g(phi) and Bernoulli mask sampling.

A gate function maps a real logit ``phi`` to a keep-probability in [0, 1] and
satisfies ``g(-phi) == 1 - g(phi)``. Both families are evaluated on ``|phi|``
and reflected for negative inputs, which makes the symmetry bit-exact in
floating point.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

PI_CLAMP = 1e-6


class GateFamily(str, enum.Enum):
    SCALED_SIGMOID = "scaled_sigmoid"
    HARD_SIGMOID = "hard_sigmoid"


class GateDomainError(ValueError):
    pass


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise GateDomainError(f"{what} must be finite")


@dataclass(frozen=True)
class GateFunction:
    family: GateFamily = GateFamily.HARD_SIGMOID
    k: float = 7.0

    def __post_init__(self):
        object.__setattr__(self, "family", GateFamily(self.family))
        if not (np.isfinite(self.k) and self.k > 0):
            raise GateDomainError(f"k must be a positive finite number, got {self.k}")

    def _half(self, a):
        # g on a >= 0 (result in [0.5, 1])
        if self.family is GateFamily.SCALED_SIGMOID:
            return expit(self.k * a)
        return np.minimum(1.0, (self.k / 7.0) * a + 0.5)

    def __call__(self, phi):
        phi = np.asarray(phi, dtype=np.float64)
        _check_finite(phi, "phi")
        upper = self._half(np.abs(phi))
        return np.where(phi >= 0, upper, 1.0 - upper)

    def grad(self, phi):
        """dg/dphi; the hard sigmoid uses slope 0 at its two kinks."""
        phi = np.asarray(phi, dtype=np.float64)
        pi = self(phi)
        if self.family is GateFamily.SCALED_SIGMOID:
            return self.k * pi * (1.0 - pi)
        inside = (pi > 0.0) & (pi < 1.0)
        return np.where(inside, self.k / 7.0, 0.0)

    def inverse(self, pi):
        pi = np.asarray(pi, dtype=np.float64)
        _check_finite(pi, "pi")
        if np.any((pi < 0.0) | (pi > 1.0)):
            raise GateDomainError("pi must lie in [0, 1]")
        pi = np.clip(pi, PI_CLAMP, 1.0 - PI_CLAMP)
        if self.family is GateFamily.SCALED_SIGMOID:
            return logit(pi) / self.k
        return (pi - 0.5) * 7.0 / self.k

    def logit_jacobian(self, phi):
        """d logit(g(phi)) / d phi.

        The antithetic indicator pair only sees ``pi = g(phi)``, so ARM/AR/
        REINFORCE estimate the gradient with respect to the Bernoulli logit.
        Multiplying by this factor converts it to a gradient in ``phi``. It is
        ``k`` for the scaled sigmoid and ``(k/7) / (pi (1 - pi))`` inside the
        hard sigmoid's linear region (0 where saturated).
        """
        phi = np.asarray(phi, dtype=np.float64)
        if self.family is GateFamily.SCALED_SIGMOID:
            return np.full(phi.shape, float(self.k))
        pi = self(phi)
        inside = (pi > 0.0) & (pi < 1.0)
        denom = np.where(inside, pi * (1.0 - pi), 1.0)
        return np.where(inside, (self.k / 7.0) / denom, 0.0)

    def to_dict(self):
        return {"family": self.family.value, "k": float(self.k)}

    @classmethod
    def from_dict(cls, d):
        return cls(GateFamily(d["family"]), float(d["k"]))


def eval_gate(fn: GateFunction, phi):
    out = fn(phi)
    return float(out) if np.ndim(out) == 0 else out


def eval_gate_grad(fn: GateFunction, phi):
    out = fn.grad(phi)
    return float(out) if np.ndim(out) == 0 else out


def invert_gate(fn: GateFunction, pi):
    out = fn.inverse(pi)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class GateLayer:
    """Metadata for one gated layer: ``size`` gates, each covering ``group_size`` weights."""

    name: str
    size: int
    group_size: int


@dataclass
class GateBank:
    phi: np.ndarray
    layers: list[GateLayer]
    gate_fn: GateFunction = field(default_factory=GateFunction)

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if self.phi.ndim != 1:
            raise ValueError("phi must be a vector")
        if sum(l.size for l in self.layers) != self.phi.size:
            raise ValueError(
                f"gate layers cover {sum(l.size for l in self.layers)} gates, phi has {self.phi.size}"
            )
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("gate layer names must be unique")
        _check_finite(self.phi, "phi")

    @property
    def size(self) -> int:
        return self.phi.size

    @property
    def offsets(self) -> list[int]:
        return list(np.cumsum([0] + [l.size for l in self.layers]))

    @property
    def group_ids(self) -> list[tuple[str, int]]:
        return [(l.name, j) for l in self.layers for j in range(l.size)]

    @property
    def group_sizes(self) -> np.ndarray:
        return np.concatenate([np.full(l.size, l.group_size, dtype=np.int64) for l in self.layers])

    def layer_index(self) -> np.ndarray:
        """Integer layer id of every gate, in gate order."""
        return np.concatenate([np.full(l.size, i) for i, l in enumerate(self.layers)])

    def split(self, values) -> dict[str, np.ndarray]:
        values = np.asarray(values)
        if values.shape[-1] != self.size:
            raise ValueError(f"expected {self.size} gate values, got {values.shape[-1]}")
        off = self.offsets
        return {l.name: values[..., off[i]:off[i + 1]] for i, l in enumerate(self.layers)}

    def probs(self) -> np.ndarray:
        return self.gate_fn(self.phi)

    def copy(self) -> "GateBank":
        return GateBank(self.phi.copy(), list(self.layers), self.gate_fn)


@dataclass
class EstimatorSample:
    u: np.ndarray
    z_true: np.ndarray
    z_anti: np.ndarray
    drawn_at: int = 0


def sample_masks(bank: GateBank, rng: np.random.Generator, iteration: int = 0) -> EstimatorSample:
    """Draw one shared uniform per gate and build the antithetic mask pair."""
    u = rng.random(bank.size)
    return masks_from_uniform(bank, u, iteration)


def masks_from_uniform(bank: GateBank, u, iteration: int = 0) -> EstimatorSample:
    u = np.asarray(u, dtype=np.float64)
    z_true = (u < bank.gate_fn(bank.phi)).astype(np.float64)
    z_anti = (u > bank.gate_fn(-bank.phi)).astype(np.float64)
    return EstimatorSample(u, z_true, z_anti, iteration)


def expectation_mask(bank: GateBank) -> np.ndarray:
    return bank.probs()
