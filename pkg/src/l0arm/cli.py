"""``l0arm`` command line: train, eval, estimator-check, report.

Exit codes: 0 success, 1 usage or config error, 2 verification failure,
3 runtime divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .data import Dataset, load_mnist_dir, make_synthetic
from .estimators import (
    ESTIMATORS,
    MAX_ENUM_DIM,
    BenchCase,
    ContractError,
    ResourceGuardError,
    estimator_bench,
    random_bench_cases,
)
from .gates import GateFunction
from .nn import PRESETS, GatedNetwork, build_mlp, build_preset
from .objective import RegularizationSpec
from .rng import stream
from .trainer import DivergenceError, GateInit, TrainConfig, accuracy, init_gates, paper_gate_init, train

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_DIVERGED = 0, 1, 2, 3
DEFAULT_TAUS = (0.3, 0.4, 0.5, 0.6, 0.7)

log = logging.getLogger("l0arm")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- building


def build_model(name: str, n_classes: int, seed: int = 0) -> GatedNetwork:
    """A preset name, or ``mlp_<in>_<h1>_..._<hn>`` for a gated MLP."""
    if name in PRESETS:
        return build_preset(name, seed=seed)
    m = re.fullmatch(r"mlp((?:_\d+)+)", name)
    if m:
        sizes = [int(s) for s in m.group(1).strip("_").split("_")]
        return build_mlp(sizes, n_classes, seed=seed, name=name)
    raise ConfigError(f"model: unknown model {name!r}; use one of {', '.join(PRESETS)} or mlp_<in>_<h1>_...")


def _fit_inputs(data: Dataset, net: GatedNetwork) -> Dataset:
    shape = tuple(net.input_shape)
    if data.inputs.shape[1:] == shape:
        return data
    if int(np.prod(data.inputs.shape[1:])) == int(np.prod(shape)):
        return Dataset(data.inputs.reshape((data.n,) + shape), data.targets, data.n_classes, data.name, data.normalization)
    raise ConfigError(f"model: input shape {shape} does not fit data of shape {data.inputs.shape[1:]}")


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.kind == "synthetic":
        s = d.synthetic
        kw = {"noise": s.noise, "n_features": s.n_features, "n_classes": s.n_classes}
        train_data = make_synthetic(s.name, s.n_train, seed=cfg.seed, **kw)
        test_data = make_synthetic(s.name, s.n_test, seed=cfg.seed + 1, **kw)
    else:
        path = Path(d.path)
        if not path.is_dir():
            raise ConfigError(f"data.path: {str(path)!r} is not a directory")
        try:
            train_data = load_mnist_dir(path, "train", d.normalize)
            test_data = load_mnist_dir(path, "test", d.normalize)
        except FileNotFoundError as e:
            raise ConfigError(f"data.path: {e}") from None
    if d.train_subset:
        train_data = train_data.subset(d.train_subset)
    if d.test_subset:
        test_data = test_data.subset(d.test_subset)
    return train_data, test_data


def train_config(cfg: RunConfig) -> TrainConfig:
    o = cfg.optimizer
    return TrainConfig(
        optimizer=o.kind,
        lr=o.lr,
        betas=(o.beta1, o.beta2),
        eps=o.eps,
        momentum=o.momentum,
        schedule=o.schedule.model_dump(),
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        seed=cfg.seed,
        estimator=cfg.estimator,
        tau=cfg.tau,
        loss=cfg.loss,
        weight_decay=o.weight_decay,
        checkpoint_every=cfg.checkpoint_every,
        grad_space=cfg.grad_space,
    )


def regularization(cfg: RunConfig, n_train: int) -> RegularizationSpec:
    return RegularizationSpec(
        lambda_l0=(np.asarray(cfg.lambda_scaled, dtype=np.float64) / n_train).tolist(),
        lambda_l1=cfg.lambda_l1_scaled / n_train,
        lambda_l2=cfg.lambda_l2_scaled / n_train,
        group_weighted=cfg.group_weighted,
    )


def setup_run(cfg: RunConfig):
    """Build (net, bank, train_data, test_data, reg) for a config."""
    train_data, test_data = load_data(cfg)
    net = build_model(cfg.model, train_data.n_classes, seed=cfg.seed)
    train_data, test_data = _fit_inputs(train_data, net), _fit_inputs(test_data, net)
    gate_fn = GateFunction(cfg.gate.family, cfg.gate.k)
    if cfg.gate.init is None:
        init = paper_gate_init(net)
    else:
        if len(cfg.gate.init) != len(net.gates):
            raise ConfigError(f"gate.init: {len(cfg.gate.init)} entries for {len(net.gates)} gate layers")
        init = [GateInit(g.mean, g.var) for g in cfg.gate.init]
    bank = init_gates(net, init, stream(cfg.seed, "gate-init"), gate_fn)
    reg = regularization(cfg, train_data.n)
    try:
        reg.per_gate_lambda(bank)
    except ValueError as e:
        raise ConfigError(f"lambda_scaled: {e}") from None
    return net, bank, train_data, test_data, reg


# ---------------------------------------------------------------- commands


def cmd_train(config_path, output_dir=None) -> Path:
    cfg = RunConfig.load(config_path)
    if output_dir is not None:
        cfg.output_dir = str(output_dir)
    run_dir = cfg.resolve_output_dir()
    cfg.output_dir = str(run_dir)
    net, bank, train_data, test_data, reg = setup_run(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json())
    tcfg = train_config(cfg)
    result = train(net, bank, train_data, test_data, tcfg, reg, run_dir=run_dir)
    save_checkpoint(run_dir / "final", net, bank, result.opt_state, {"epochs": cfg.epochs, "config": cfg.to_dict()})
    rep = metrics.sparsity_report(net, bank, cfg.tau)
    rep.extra.update(
        {
            "test_acc": accuracy(net, bank, test_data, cfg.tau),
            "estimator": cfg.estimator,
            "epochs": cfg.epochs,
            "fwd_passes": int(sum(r["fwd_passes"] for r in result.rows)),
            "train_flops_per_example": metrics.training_flops(net, bank.probs(), cfg.estimator),
            "mid_mass": metrics.mid_mass(bank),
        }
    )
    (run_dir / "report.json").write_text(json.dumps(rep.to_dict(), indent=2))
    return run_dir


def _resolve_checkpoint(path: Path):
    if (path / "manifest.json").exists():
        for parent in (path.parent, path.parent.parent):
            if (parent / "config.json").exists():
                return path, parent
        return path, None
    if (path / "final" / "manifest.json").exists():
        return path / "final", path
    raise CheckpointError(f"{path}: neither a checkpoint nor a run directory with final/")


def cmd_eval(checkpoint, data_dir=None, taus=(0.5,)) -> dict:
    ckpt, run_dir = _resolve_checkpoint(Path(checkpoint))
    net, bank, _, meta = load_checkpoint(ckpt)
    cfg_dict = meta.get("config")
    if cfg_dict is None and run_dir is not None:
        cfg_dict = json.loads((run_dir / "config.json").read_text())
    if cfg_dict is None:
        raise ConfigError("checkpoint carries no config; pass a run directory")
    cfg = RunConfig.from_dict(cfg_dict)
    if data_dir is not None:
        cfg.data.path = str(data_dir)
        cfg.data.kind = "mnist"
    _, test_data = load_data(cfg)
    test_data = _fit_inputs(test_data, net)
    out = {"checkpoint": str(ckpt), "n_test": test_data.n, "reports": []}
    for tau in taus:
        rep = metrics.sparsity_report(net, bank, tau)
        rep.extra["test_acc"] = accuracy(net, bank, test_data, tau)
        out["reports"].append(rep.to_dict())
    return out


def load_bench_spec(path=None) -> dict:
    spec = {"n_samples": 200_000, "seed": 0, "estimators": list(ESTIMATORS), "tol_se": 4.0, "random": {"n": 20, "seed": 0, "max_dim": 4}}
    if path is not None:
        user = json.loads(Path(path).read_text())
        unknown = set(user) - set(spec) - {"cases"}
        if unknown:
            raise ConfigError(f"estimator spec: unknown key(s) {sorted(unknown)}")
        spec.update(user)
        if "cases" in user and "random" not in user:
            spec.pop("random")
    return spec


def cmd_estimator_check(spec: dict, samplers=None) -> tuple[dict, bool]:
    """Run the bench over every case; PASS iff every bias is within tol_se standard errors."""
    if spec.get("cases") is not None:
        cases = [BenchCase.from_dict(c) for c in spec["cases"]]
    else:
        r = spec["random"]
        if r.get("max_dim", 4) > MAX_ENUM_DIM:
            raise ResourceGuardError(f"V={r['max_dim']} exceeds the enumeration limit of {MAX_ENUM_DIM}")
        cases = random_bench_cases(r.get("n", 20), r.get("seed", 0), r.get("max_dim", 4))
    n = int(spec["n_samples"])
    if n < 1:
        raise ConfigError("n_samples: must be positive")
    tol = float(spec.get("tol_se", 4.0))
    rows, ok = [], True
    for i, case in enumerate(cases):
        rep = estimator_bench(case.objective(), case.bank(), n, spec["estimators"], seed=spec["seed"], case=i, samplers=samplers)
        passed = rep.passed(tol)
        ok &= passed
        rows.append({"case": i, **{k: case.to_dict()[k] for k in ("dim", "family", "k", "phi")}, "status": "PASS" if passed else "FAIL", **rep.to_dict()})
    return {"status": "PASS" if ok else "FAIL", "tol_se": tol, "n_samples": n, "cases": rows}, ok


def _read_run(run_dir: Path) -> dict:
    needed = ["config.json", "metrics.csv", "report.json"]
    if not run_dir.is_dir():
        raise UsageError(f"{run_dir}: not a directory")
    missing = [n for n in needed if not (run_dir / n).exists()]
    if missing:
        raise UsageError(f"{run_dir}: incomplete run directory, missing {', '.join(missing)}")
    with open(run_dir / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    return {
        "dir": run_dir,
        "config": json.loads((run_dir / "config.json").read_text()),
        "rows": rows,
        "report": json.loads((run_dir / "report.json").read_text()),
    }


def table_row(report: dict) -> str:
    """``arch | prune % | accuracy %`` in the usual two/one-decimal layout."""
    return f"{report['arch']} | {100 * report['prune_rate']:.2f} | {100 * report['test_acc']:.1f}"


def cmd_report(run_dirs) -> dict:
    runs = [_read_run(Path(d)) for d in run_dirs]
    table = [f"{r['dir'].name} | {r['config']['estimator']} | {table_row(r['report'])}" for r in runs]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "estimator", "epoch", "exp_flops_fwd", "exp_flops_train", "fwd_passes"])
    for r in runs:
        est = r["config"]["estimator"]
        for row in r["rows"]:
            fwd = float(row["exp_flops_fwd"])
            w.writerow([r["dir"].name, est, row["epoch"], repr(fwd), repr(fwd * metrics.TRAIN_PASS_FACTOR[est]), row["fwd_passes"]])
    out = {"table": table, "flops_csv": buf.getvalue()}
    passes = {}
    for r in runs:
        passes.setdefault(r["config"]["estimator"], 0)
        passes[r["config"]["estimator"]] += sum(int(x["fwd_passes"]) for x in r["rows"])
    if passes.get("arm") and passes.get("ar"):
        out["fwd_pass_ratio_arm_over_ar"] = passes["arm"] / passes["ar"]
    return out


# ---------------------------------------------------------------- entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="l0arm", description="L0-regularized networks trained with ARM/AR gate gradients.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("config")
    t.add_argument("--output-dir", default=None, help="overrides output_dir / $L0ARM_OUTPUT_ROOT")

    e = sub.add_parser("eval", help="evaluate a checkpoint or run directory")
    e.add_argument("checkpoint")
    e.add_argument("--data-dir", default=None, help="MNIST IDX directory (defaults to the run config)")
    e.add_argument("--tau", type=float, default=0.5)
    e.add_argument("--tau-sweep", nargs="*", type=float, default=None, help=f"report per tau (default {' '.join(map(str, DEFAULT_TAUS))})")

    c = sub.add_parser("estimator-check", help="bias/variance bench against the enumeration oracle")
    c.add_argument("--spec", default=None, help="JSON bench spec")
    c.add_argument("--n-samples", type=int, default=None)
    c.add_argument("--dim", type=int, default=None, help="random cases with V up to this size")
    c.add_argument("--out", default=None, help="write the JSON report here instead of stdout")

    r = sub.add_parser("report", help="tables and FLOPs series from run directories")
    r.add_argument("run_dirs", nargs="+")
    r.add_argument("--csv-out", default=None, help="write the FLOPs-vs-epoch CSV here")
    return p


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "train":
            run_dir = cmd_train(args.config, args.output_dir)
            print(run_dir)
            print(table_row(json.loads((run_dir / "report.json").read_text())))
            return EXIT_OK
        if args.command == "eval":
            taus = args.tau_sweep if args.tau_sweep is not None else None
            if taus is not None and not taus:
                taus = list(DEFAULT_TAUS)
            for t in taus or [args.tau]:
                metrics._check_tau(t)
            print(json.dumps(cmd_eval(args.checkpoint, args.data_dir, taus or [args.tau]), indent=2))
            return EXIT_OK
        if args.command == "estimator-check":
            spec = load_bench_spec(args.spec)
            if args.n_samples is not None:
                spec["n_samples"] = args.n_samples
            if args.dim is not None:
                spec.pop("cases", None)
                spec["random"] = {**spec.get("random", {"n": 20, "seed": 0}), "max_dim": args.dim}
            report, ok = cmd_estimator_check(spec)
            text = json.dumps(report, indent=2)
            if args.out:
                Path(args.out).write_text(text)
            else:
                print(text)
            for row in report["cases"]:
                print(f"case {row['case']:2d} V={row['dim']} {row['family']:<14} k={row['k']:g} {row['status']}", file=sys.stderr)
            print(report["status"], file=sys.stderr)
            return EXIT_OK if ok else EXIT_VERIFY
        if args.command == "report":
            out = cmd_report(args.run_dirs)
            print("run | estimator | pruned arch | prune % | acc %")
            for line in out["table"]:
                print(line)
            if "fwd_pass_ratio_arm_over_ar" in out:
                print(f"fwd-pass ratio (arm/ar): {out['fwd_pass_ratio_arm_over_ar']:.1f}")
            if args.csv_out:
                Path(args.csv_out).write_text(out["flops_csv"])
            else:
                print(out["flops_csv"], end="")
            return EXIT_OK
    except DivergenceError as e:
        print(f"error: {e} (state dumped to {e.dump_path})", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, UsageError, CheckpointError, ResourceGuardError, ContractError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
