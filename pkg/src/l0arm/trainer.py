"""Training loop: gate initialization, optimizer updates, per-epoch metrics."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .checkpoint import save_checkpoint
from .data import Dataset, batches
from .gates import GateBank, GateFunction
from .nn import GatedNetwork
from .objective import RegularizationSpec, expected_l0, objective_step
from .optim import AdamHyper, NesterovHyper, adam_update, halve_every, init_state, multistep, nesterov_update
from .rng import stream

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_loss", "test_acc", "prune_rate", "exp_flops_fwd", "l0_term", "fwd_passes"]


class DivergenceError(RuntimeError):
    def __init__(self, msg, dump_path=None):
        super().__init__(msg)
        self.dump_path = dump_path


@dataclass
class GateInit:
    """Normal(mean, var) draw for the keep-probability pi of each gate in a layer."""

    mean: float = 0.5
    var: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.mean < 1.0:
            raise ValueError(f"gate init mean must lie in (0, 1), got {self.mean}")
        if self.var < 0:
            raise ValueError("gate init variance must be >= 0")


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    momentum: float = 0.9
    schedule: dict = field(default_factory=lambda: {"kind": "halve_every", "epochs": 100})
    batch_size: int = 100
    epochs: int = 1
    seed: int = 0
    estimator: str = "arm"
    tau: float = 0.5
    loss: str = "cross_entropy"
    weight_decay: float = 0.0
    checkpoint_every: int = 0
    grad_space: str = "phi"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.estimator not in ("arm", "ar"):
            raise ValueError(f"estimator must be 'arm' or 'ar', got {self.estimator!r}")
        if self.optimizer not in ("adam", "nesterov"):
            raise ValueError(f"optimizer must be 'adam' or 'nesterov', got {self.optimizer!r}")

    def lr_at(self, epoch: int) -> float:
        s = self.schedule or {"kind": "constant"}
        if s["kind"] == "halve_every":
            return halve_every(self.lr, epoch, int(s["epochs"]))
        if s["kind"] == "multistep":
            return multistep(self.lr, epoch, s["milestones"], float(s["factor"]))
        if s["kind"] == "constant":
            return self.lr
        raise ValueError(f"unknown schedule {s['kind']!r}")


def init_gates(net: GatedNetwork, init_spec, rng: np.random.Generator, gate_fn: GateFunction | None = None) -> GateBank:
    """Draw pi ~ N(mean, var) per gate, clamp into (0, 1), and invert to phi.

    ``init_spec`` is a single :class:`GateInit`, a list with one per gate
    layer, or a dict keyed by gate-layer name.
    """
    gate_fn = gate_fn or GateFunction()
    layers = net.gate_layers()
    if isinstance(init_spec, GateInit):
        specs = [init_spec] * len(layers)
    elif isinstance(init_spec, dict):
        missing = [l.name for l in layers if l.name not in init_spec]
        if missing:
            raise ValueError(f"no gate init for {missing}")
        specs = [init_spec[l.name] for l in layers]
    else:
        specs = list(init_spec)
        if len(specs) != len(layers):
            raise ValueError(f"{len(specs)} gate inits for {len(layers)} gate layers")
    phi = []
    for layer, s in zip(layers, specs):
        pi = rng.normal(s.mean, np.sqrt(s.var), layer.size)
        phi.append(gate_fn.inverse(np.clip(pi, 0.0, 1.0)))
    return GateBank(np.concatenate(phi) if phi else np.zeros(0), layers, gate_fn)


def paper_gate_init(net: GatedNetwork) -> list[GateInit]:
    """N(0.8, 0.01) for gates on the raw input, N(0.5, 0.01) for every other gate."""
    first_weighted = next(i for i, l in enumerate(net.layers) if l.has_params)
    return [
        GateInit(0.8 if net.layers.index(g) < first_weighted else 0.5, 0.01)
        for g in net.gates
    ]


def accuracy(net: GatedNetwork, bank: GateBank, data: Dataset, tau: float) -> float:
    masks = bank.split(metrics.threshold_mask(bank, tau))
    pred = net.predict(data.inputs, masks)
    return float(np.mean(pred == data.targets))


@dataclass
class TrainResult:
    net: GatedNetwork
    bank: GateBank
    opt_state: dict
    rows: list[dict]
    histograms: list[dict]

    def metrics_csv(self) -> str:
        return format_metrics(self.rows)


def format_metrics(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([r["epoch"]] + [repr(float(r[k])) for k in METRICS_HEADER[1:-1]] + [r["fwd_passes"]])
    return buf.getvalue()


def _param_view(net: GatedNetwork, bank: GateBank):
    params = net.flat_params()
    params["phi"] = bank.phi
    return params


def _dump_state(run_dir, net, bank, epoch, step, info):
    if run_dir is None:
        return None
    path = Path(run_dir) / "divergence"
    save_checkpoint(path, net, bank, meta={"epoch": epoch, "step": step, **info})
    return path


def train(
    net: GatedNetwork,
    bank: GateBank,
    train_data: Dataset,
    test_data: Dataset,
    cfg: TrainConfig,
    reg: RegularizationSpec,
    run_dir=None,
    opt_state=None,
    start_epoch: int = 0,
) -> TrainResult:
    """Optimize weights, biases and gate logits with one shared optimizer.

    Logs one metrics row per epoch (test accuracy uses the thresholded mask)
    and a g(phi) histogram snapshot per epoch, including epoch 0.
    """
    params = _param_view(net, bank)
    if opt_state is None:
        opt_state = init_state(params, cfg.optimizer)
    hyper = (
        AdamHyper(cfg.lr, cfg.betas[0], cfg.betas[1], cfg.eps)
        if cfg.optimizer == "adam"
        else NesterovHyper(cfg.lr, cfg.momentum)
    )
    update = adam_update if cfg.optimizer == "adam" else nesterov_update
    weight_keys = {f"{k}.W" for k in net.params}
    rows: list[dict] = []
    histograms = [{"epoch": start_epoch, "counts": metrics.gate_histogram(bank).tolist()}]
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        _write_progress(run_dir, rows, histograms)
    step = 0
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        lr = cfg.lr_at(epoch)
        gate_rng = stream(cfg.seed, "gates", epoch)
        total, n_batches, passes = 0.0, 0, 0
        for x, y in batches(train_data, cfg.batch_size, cfg.seed, epoch):
            res = objective_step(net, bank, x, y, reg, cfg.estimator, gate_rng, cfg.loss, iteration=step, grad_space=cfg.grad_space)
            if not np.isfinite(res.objective) or not np.all(np.isfinite(res.grad_phi)):
                dump = _dump_state(run_dir, net, bank, epoch, step, {"objective": repr(res.objective)})
                raise DivergenceError(f"non-finite objective at epoch {epoch + 1}, step {step}", dump)
            grads = {f"{k}.{n}": g for k, v in res.grad_params.items() for n, g in v.items()}
            if cfg.weight_decay:
                for k in weight_keys:
                    grads[k] = grads[k] + cfg.weight_decay * params[k]
            grads["phi"] = res.grad_phi
            update(params, grads, opt_state, hyper, lr)
            net.mark_updated()
            # ReLU maps NaN to 0, so a corrupted weight need not show up in the loss
            bad = [k for k, v in params.items() if not np.all(np.isfinite(v))]
            if bad:
                dump = _dump_state(run_dir, net, bank, epoch, step, {"reason": f"non-finite {', '.join(bad)}"})
                raise DivergenceError(f"non-finite parameters {bad} after step {step}", dump)
            total += res.objective
            n_batches += 1
            passes += res.forward_passes
            step += 1

        row = {
            "epoch": epoch + 1,
            "train_loss": total / max(n_batches, 1),
            "test_acc": accuracy(net, bank, test_data, cfg.tau),
            "prune_rate": metrics.prune_rate(net, metrics.threshold_mask(bank, cfg.tau)),
            "exp_flops_fwd": metrics.expected_flops(net, bank.probs()),
            "l0_term": expected_l0(bank, reg),
            "fwd_passes": passes,
        }
        rows.append(row)
        histograms.append({"epoch": epoch + 1, "counts": metrics.gate_histogram(bank).tolist()})
        log.info(
            "epoch %d loss %.4f acc %.4f prune %.4f arch %s",
            row["epoch"], row["train_loss"], row["test_acc"], row["prune_rate"],
            metrics.arch_string(metrics.pruned_architecture(bank, cfg.tau)),
        )
        if run_dir is not None:
            _write_progress(run_dir, rows, histograms)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(
                    Path(run_dir) / "checkpoints" / f"epoch_{epoch + 1:04d}", net, bank, opt_state,
                    {"epoch": epoch + 1, "seed": cfg.seed},
                )
    return TrainResult(net, bank, opt_state, rows, histograms)


def _write_progress(run_dir, rows, histograms):
    run_dir = Path(run_dir)
    (run_dir / "metrics.csv").write_text(format_metrics(rows))
    (run_dir / "histograms.json").write_text(json.dumps({"bins": metrics.HIST_BINS, "range": [0.0, 1.0], "snapshots": histograms}))
