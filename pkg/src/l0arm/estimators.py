"""ARM / AR gradient estimators for Bernoulli-gated objectives.

Includes an exact enumeration oracle, a REINFORCE baseline, and a small
Monte-Carlo bench that compares the estimators against the oracle.

Estimates produced here are with respect to ``phi``: the Bernoulli-logit
gradient returned by the antithetic estimators is multiplied by
``gate_fn.logit_jacobian(phi)`` (see :mod:`l0arm.gates`). For the plain
sigmoid this factor is 1 and the formulas reduce to their textbook form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .gates import PI_CLAMP, GateBank, GateFunction, GateLayer, masks_from_uniform
from .rng import stream

MAX_ENUM_DIM = 20
ESTIMATORS = ("arm", "ar", "reinforce")


class ContractError(ValueError):
    pass


class ResourceGuardError(ValueError):
    pass


@dataclass
class BinaryObjective:
    """A deterministic loss on {0,1}^dim.

    ``evaluate`` maps one binary vector to a float. If ``table`` is given it
    holds f for every mask, indexed by ``sum_v z_v 2^v``.
    """

    dim: int
    evaluate: Callable[[np.ndarray], float] | None = None
    table: np.ndarray | None = None

    def __post_init__(self):
        if self.evaluate is None and self.table is None:
            raise ValueError("need either evaluate or table")
        if self.table is not None:
            self.table = np.asarray(self.table, dtype=np.float64)
            if self.table.shape != (2**self.dim,):
                raise ValueError(f"table must have {2**self.dim} entries")

    @classmethod
    def from_table(cls, table) -> "BinaryObjective":
        table = np.asarray(table, dtype=np.float64)
        dim = int(round(np.log2(table.size)))
        return cls(dim, table=table)

    def __call__(self, z) -> float:
        return float(self.evaluate_many(np.asarray(z)[None, :])[0])

    def evaluate_many(self, Z: np.ndarray) -> np.ndarray:
        Z = np.asarray(Z)
        if Z.shape[-1] != self.dim:
            raise ContractError(f"masks have {Z.shape[-1]} entries, objective expects {self.dim}")
        if self.table is not None:
            idx = Z.astype(np.int64) @ (1 << np.arange(self.dim, dtype=np.int64))
            return self.table[idx]
        return np.array([float(self.evaluate(z)) for z in Z])


@dataclass
class GradEstimate:
    grad_phi: np.ndarray
    n_forward_evals: int


def _check_lengths(u, lambda_term):
    u = np.asarray(u, dtype=np.float64)
    if lambda_term is None:
        return u, 0.0
    lambda_term = np.asarray(lambda_term, dtype=np.float64)
    if lambda_term.shape[-1] != u.shape[-1]:
        raise ContractError(f"lambda_term has {lambda_term.shape[-1]} entries, u has {u.shape[-1]}")
    return u, lambda_term


def arm_grad(f_true, f_anti, u, lambda_term=None, scale=None) -> GradEstimate:
    """ARM: ``(f_anti - f_true) * (u - 1/2) * scale + lambda_term``.

    ``u`` may be a single draw of shape (V,) or a stack (n, V) with matching
    ``f_true``/``f_anti`` of shape (n,). ``scale`` is the logit Jacobian
    (default 1).
    """
    u, lambda_term = _check_lengths(u, lambda_term)
    diff = np.asarray(f_anti, dtype=np.float64) - np.asarray(f_true, dtype=np.float64)
    if diff.ndim and diff.shape[0] != (u.shape[0] if u.ndim > 1 else 1):
        raise ContractError("one pair of losses is needed per uniform draw")
    data = diff[..., None] * (u - 0.5) if diff.ndim else diff * (u - 0.5)
    if scale is not None:
        data = data * scale
    n = u.shape[0] if u.ndim > 1 else 1
    return GradEstimate(data + lambda_term, 2 * n)


def ar_grad(f_true, u, lambda_term=None, scale=None) -> GradEstimate:
    """AR: ``f_true * (1 - 2u) * scale + lambda_term``; one evaluation per draw."""
    u, lambda_term = _check_lengths(u, lambda_term)
    f = np.asarray(f_true, dtype=np.float64)
    if f.ndim and f.shape[0] != (u.shape[0] if u.ndim > 1 else 1):
        raise ContractError("one loss is needed per uniform draw")
    data = f[..., None] * (1.0 - 2.0 * u) if f.ndim else f * (1.0 - 2.0 * u)
    if scale is not None:
        data = data * scale
    n = u.shape[0] if u.ndim > 1 else 1
    return GradEstimate(data + lambda_term, n)


def reinforce_grad(f_true, z_true, bank: GateBank) -> GradEstimate:
    """Score-function estimator ``f (z - pi) g'(phi) / (pi (1 - pi))``."""
    z = np.asarray(z_true, dtype=np.float64)
    f = np.asarray(f_true, dtype=np.float64)
    pi = bank.probs()
    pc = np.clip(pi, PI_CLAMP, 1.0 - PI_CLAMP)
    weight = bank.gate_fn.grad(bank.phi) / (pc * (1.0 - pc))
    data = (f[..., None] if f.ndim else f) * (z - pi) * weight
    n = z.shape[0] if z.ndim > 1 else 1
    return GradEstimate(data, n)


def _guard(dim):
    if dim > MAX_ENUM_DIM:
        raise ResourceGuardError(f"enumeration over 2^{dim} masks refused (limit V <= {MAX_ENUM_DIM})")


def all_masks(dim: int) -> np.ndarray:
    """Every mask in {0,1}^dim; row i has bit v of i in column v."""
    idx = np.arange(2**dim, dtype=np.int64)
    return ((idx[:, None] >> np.arange(dim)) & 1).astype(np.float64)


def _value_tensor(obj: BinaryObjective) -> np.ndarray:
    values = obj.evaluate_many(all_masks(obj.dim))
    # axis v of the reshaped tensor indexes z_v (C order => reverse the bit order)
    return values.reshape((2,) * obj.dim).transpose(tuple(range(obj.dim - 1, -1, -1)))


def _check_dims(obj, bank):
    _guard(obj.dim)
    if obj.dim != bank.size:
        raise ContractError(f"objective has dim {obj.dim}, bank has {bank.size} gates")


def exact_expectation(obj: BinaryObjective, bank: GateBank) -> float:
    """E_{z ~ Ber(g(phi))}[f(z)] by enumeration."""
    _check_dims(obj, bank)
    T = _value_tensor(obj)
    pi = bank.probs()
    for v in range(obj.dim - 1, -1, -1):
        T = T @ np.array([1.0 - pi[v], pi[v]])
    return float(T)


def exact_grad(obj: BinaryObjective, bank: GateBank) -> np.ndarray:
    """Exact dE/dphi via ``g'(phi_v) (E[f | z_v=1] - E[f | z_v=0])``."""
    _check_dims(obj, bank)
    T = _value_tensor(obj)
    pi = bank.probs()
    dg = bank.gate_fn.grad(bank.phi)
    out = np.empty(obj.dim)
    for v in range(obj.dim):
        R = T
        # contract trailing axes first so axis indices stay valid
        for w in range(obj.dim - 1, -1, -1):
            if w == v:
                continue
            R = np.moveaxis(R, w, -1) @ np.array([1.0 - pi[w], pi[w]])
        out[v] = dg[v] * (R[1] - R[0])
    return out


MAX_MOMENT_DIM = 12


def _intervals(pi: float):
    """Split [0, 1] at pi and 1 - pi; yield (z_true, z_anti, length, int (u-1/2)^2 du)."""
    cuts = sorted({0.0, pi, 1.0 - pi, 1.0})
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b <= a:
            continue
        mid = 0.5 * (a + b)
        m2 = ((b - 0.5) ** 3 - (a - 0.5) ** 3) / 3.0
        yield float(mid < pi), float(mid > 1.0 - pi), b - a, m2


def exact_second_moment(obj: BinaryObjective, bank: GateBank, estimator: str) -> np.ndarray:
    """E[estimate_v^2] for each coordinate, by enumerating uniform-interval cells.

    The masks are piecewise constant in u, so the expectation is a finite sum
    over at most 3^V cells. Independent of any sampling.
    """
    _check_dims(obj, bank)
    if obj.dim > MAX_MOMENT_DIM:
        raise ResourceGuardError(f"exact moments limited to V <= {MAX_MOMENT_DIM}")
    pi = bank.probs()
    cells = [list(_intervals(float(p))) for p in pi]
    scale = bank.gate_fn.logit_jacobian(bank.phi)
    pc = np.clip(pi, PI_CLAMP, 1.0 - PI_CLAMP)
    rf_weight = bank.gate_fn.grad(bank.phi) / (pc * (1.0 - pc))
    out = np.zeros(obj.dim)
    for combo in np.ndindex(*(len(c) for c in cells)):
        picked = [cells[w][i] for w, i in enumerate(combo)]
        zt = np.array([c[0] for c in picked])
        za = np.array([c[1] for c in picked])
        lengths = np.array([c[2] for c in picked])
        m2 = np.array([c[3] for c in picked])
        f_t = obj(zt)
        for v in range(obj.dim):
            others = np.prod(np.delete(lengths, v))
            if estimator == "arm":
                term = (obj(za) - f_t) ** 2 * m2[v] * scale[v] ** 2
            elif estimator == "ar":
                term = f_t**2 * 4.0 * m2[v] * scale[v] ** 2
            elif estimator == "reinforce":
                term = f_t**2 * (zt[v] - pi[v]) ** 2 * rf_weight[v] ** 2 * lengths[v]
            else:
                raise ValueError(f"unknown estimator {estimator!r}")
            out[v] += others * term
    return out


def min_value(obj: BinaryObjective) -> float:
    _guard(obj.dim)
    return float(np.min(obj.evaluate_many(all_masks(obj.dim))))


def sample_estimates(
    obj: BinaryObjective, bank: GateBank, u: np.ndarray, estimator: str
) -> np.ndarray:
    """Per-draw data-term gradient estimates, shape (n, V)."""
    s = masks_from_uniform(bank, u)
    f_true = obj.evaluate_many(s.z_true)
    scale = bank.gate_fn.logit_jacobian(bank.phi)
    if estimator == "arm":
        f_anti = obj.evaluate_many(s.z_anti)
        return arm_grad(f_true, f_anti, u, scale=scale).grad_phi
    if estimator == "ar":
        return ar_grad(f_true, u, scale=scale).grad_phi
    if estimator == "reinforce":
        return reinforce_grad(f_true, s.z_true, bank).grad_phi
    raise ValueError(f"unknown estimator {estimator!r}")


@dataclass
class EstimatorStats:
    """Monte-Carlo summary of one estimator.

    ``se``/``var`` are sample statistics. ``se_exact`` is the standard error
    implied by the exact second moment (when V is small enough to enumerate);
    ``bias_se`` is measured against it when available, since sample SEs
    collapse to zero on near-saturated gates where no informative draw occurs.
    """

    name: str
    mean: np.ndarray
    se: np.ndarray
    var: np.ndarray
    bias_se: np.ndarray
    n_forward_evals: int
    se_exact: np.ndarray | None = None

    @property
    def max_bias_se(self) -> float:
        return float(np.max(self.bias_se)) if self.bias_se.size else 0.0

    @property
    def pooled_var(self) -> float:
        return float(np.mean(self.var))

    def to_dict(self):
        return {
            "mean": self.mean.tolist(),
            "se": self.se.tolist(),
            "var": self.var.tolist(),
            "se_exact": None if self.se_exact is None else self.se_exact.tolist(),
            "bias_se": self.bias_se.tolist(),
            "max_bias_se": self.max_bias_se,
            "pooled_var": self.pooled_var,
            "n_forward_evals": self.n_forward_evals,
        }


@dataclass
class BenchReport:
    exact: np.ndarray
    n_samples: int
    stats: dict[str, EstimatorStats] = field(default_factory=dict)

    def passed(self, tol_se: float = 4.0) -> bool:
        return all(s.max_bias_se <= tol_se for s in self.stats.values())

    def variance_ratio(self, num: str, den: str) -> float:
        a, b = self.stats[num].pooled_var, self.stats[den].pooled_var
        if b == 0.0:
            return 1.0 if a == 0.0 else float("inf")
        return a / b

    def to_dict(self):
        return {
            "n_samples": self.n_samples,
            "exact": self.exact.tolist(),
            "estimators": {k: v.to_dict() for k, v in self.stats.items()},
        }


def _bias_in_se(mean, exact, se):
    err = np.abs(mean - exact)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, err / np.where(se > 0, se, 1.0), np.where(err > 1e-12, np.inf, 0.0))
    return z


def estimator_bench(
    obj: BinaryObjective,
    bank: GateBank,
    n_samples: int,
    estimators: Sequence[str] = ESTIMATORS,
    seed: int = 0,
    case: int = 0,
    u: np.ndarray | None = None,
    chunk: int = 50_000,
    samplers: dict[str, Callable] | None = None,
) -> BenchReport:
    """Monte-Carlo mean/SE/variance of each estimator vs. the exact gradient.

    All estimators share the same uniform draws. Sums are accumulated chunk by
    chunk in a fixed order, so the report is reproducible for a given seed.
    ``samplers`` maps an estimator name to a replacement
    ``fn(obj, bank, u) -> (n, V)`` (used for negative controls).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    _check_dims(obj, bank)
    exact = exact_grad(obj, bank)
    if u is None:
        u = stream(seed, "bench", case).random((n_samples, bank.size))
    elif u.shape != (n_samples, bank.size):
        raise ContractError("u must have shape (n_samples, V)")
    report = BenchReport(exact, n_samples)
    per_eval = {"arm": 2, "ar": 1, "reinforce": 1}
    for name in estimators:
        s1 = np.zeros(bank.size)
        s2 = np.zeros(bank.size)
        for start in range(0, n_samples, chunk):
            block = u[start:start + chunk]
            g = samplers[name](obj, bank, block) if samplers and name in samplers else sample_estimates(obj, bank, block, name)
            s1 += g.sum(0)
            s2 += (g * g).sum(0)
        mean = s1 / n_samples
        var = np.maximum(s2 / n_samples - mean**2, 0.0)
        if n_samples > 1:
            var *= n_samples / (n_samples - 1)
        se = np.sqrt(var / n_samples)
        se_exact = None
        if bank.size <= MAX_MOMENT_DIM and name in per_eval:
            true_var = np.maximum(exact_second_moment(obj, bank, name) - exact**2, 0.0)
            se_exact = np.sqrt(true_var / n_samples)
        ref_se = se if se_exact is None else se_exact
        report.stats[name] = EstimatorStats(
            name, mean, se, var, _bias_in_se(mean, exact, ref_se), per_eval.get(name, 1) * n_samples, se_exact
        )
    return report


def random_table_objective(rng: np.random.Generator, dim: int) -> BinaryObjective:
    return BinaryObjective.from_table(rng.uniform(0.0, 1.0, 2**dim))



@dataclass
class BenchCase:
    """One randomized estimator-bench configuration."""

    dim: int
    family: str
    k: float
    phi: np.ndarray
    table: np.ndarray

    def objective(self) -> BinaryObjective:
        return BinaryObjective.from_table(self.table)

    def bank(self) -> GateBank:
        return GateBank(np.asarray(self.phi, dtype=np.float64), [GateLayer("bench", self.dim, 1)], GateFunction(self.family, self.k))

    def to_dict(self):
        return {"dim": self.dim, "family": self.family, "k": self.k, "phi": list(map(float, self.phi)), "table": list(map(float, self.table))}

    @classmethod
    def from_dict(cls, d):
        dim = int(d["dim"])
        if dim > MAX_ENUM_DIM:
            raise ResourceGuardError(f"V={dim} exceeds the enumeration limit of {MAX_ENUM_DIM}")
        phi = np.asarray(d["phi"], dtype=np.float64)
        table = np.asarray(d["table"], dtype=np.float64)
        if phi.shape != (dim,) or table.shape != (2**dim,):
            raise ContractError(f"case with dim={dim} needs {dim} phi values and {2**dim} table entries")
        return cls(dim, d.get("family", "hard_sigmoid"), float(d.get("k", 7.0)), phi, table)


def random_bench_cases(n: int = 20, seed: int = 0, max_dim: int = 4) -> list[BenchCase]:
    """V ~ U{1..max_dim}, phi ~ U(-2, 2), f table ~ U(0, 1); families and k in {1, 7} cycle."""
    rng = stream(seed, "bench-cases")
    cases = []
    for c in range(n):
        dim = int(rng.integers(1, max_dim + 1))
        family = ("scaled_sigmoid", "hard_sigmoid")[c % 2]
        k = (1.0, 7.0)[(c // 2) % 2]
        phi = rng.uniform(-2.0, 2.0, dim)
        cases.append(BenchCase(dim, family, k, phi, rng.uniform(0.0, 1.0, 2**dim)))
    return cases
