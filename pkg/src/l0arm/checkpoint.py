"""Checkpoint container: ``manifest.json`` plus raw little-endian arrays in ``arrays.bin``."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .gates import GateBank, GateFunction, GateLayer
from .nn import GatedNetwork

FORMAT = "l0arm-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _flatten_state(state, prefix="opt"):
    arrays, scalars = {}, {}
    for key, val in (state or {}).items():
        if isinstance(val, dict):
            for name, arr in val.items():
                arrays[f"{prefix}.{key}.{name}"] = arr
        else:
            scalars[key] = val
    return arrays, scalars


def save_checkpoint(path, net: GatedNetwork, bank: GateBank, opt_state=None, meta=None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {f"param.{k}": v for k, v in net.flat_params().items()}
    arrays["phi"] = bank.phi
    opt_arrays, opt_scalars = _flatten_state(opt_state)
    arrays.update(opt_arrays)

    entries, offset = [], 0
    with open(path / "arrays.bin", "wb") as fh:
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            fh.write(raw)
            offset += len(raw)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "network": net.spec(),
        "gate_fn": bank.gate_fn.to_dict(),
        "gate_layers": [{"name": l.name, "size": l.size, "group_size": l.group_size} for l in bank.layers],
        "optimizer": opt_scalars,
        "meta": meta or {},
        "arrays": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path):
    """Return (net, bank, opt_state, meta)."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no manifest.json") from None
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint {manifest.get('format')!r} v{manifest.get('version')} "
            f"(expected {FORMAT} v{VERSION})"
        )
    raw = (path / "arrays.bin").read_bytes()
    arrays = {}
    for e in manifest["arrays"]:
        if e["offset"] + e["nbytes"] > len(raw):
            raise CheckpointError(f"{path}: arrays.bin truncated at {e['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))

    params: dict[str, dict[str, np.ndarray]] = {}
    opt: dict = dict(manifest.get("optimizer", {}))
    for name, arr in arrays.items():
        if name.startswith("param."):
            layer, pname = name[len("param."):].rsplit(".", 1)
            params.setdefault(layer, {})[pname] = arr
        elif name.startswith("opt."):
            _, key, pname = name.split(".", 2)
            opt.setdefault(key, {})[pname] = arr
    net = GatedNetwork.from_spec(manifest["network"], params=params)
    layers = [GateLayer(d["name"], d["size"], d["group_size"]) for d in manifest["gate_layers"]]
    bank = GateBank(arrays["phi"], layers, GateFunction.from_dict(manifest["gate_fn"]))
    return net, bank, (opt or None), manifest.get("meta", {})
