"""A small numpy network engine with manual backprop and group gates.

Layers are plain objects with ``forward``/``backward``. Parameters live on the
network (``net.params[layer_name]["W" | "b"]``) so optimizers can treat them as
a flat dict of arrays. A :class:`Gate` layer multiplies its input by a mask
vector: per feature for 2-D inputs, per channel for 4-D inputs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .gates import GateLayer


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


class Dense:
    kind = "dense"
    has_params = True

    def __init__(self, name, in_features, out_features):
        self.name, self.in_features, self.out_features = name, in_features, out_features

    def out_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ShapeError(f"{self.name}: expected input ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def init_params(self, rng, dtype):
        std = np.sqrt(2.0 / self.in_features)
        W = rng.normal(0.0, std, (self.in_features, self.out_features)).astype(dtype)
        return {"W": W, "b": np.zeros(self.out_features, dtype=dtype)}

    def forward(self, x, p, mask):
        return x @ p["W"] + p["b"], x

    def backward(self, dy, saved, p, mask):
        x = saved
        grads = {"W": x.T @ dy, "b": dy.sum(0)}
        return dy @ p["W"].T, grads

    def spec(self):
        return {"kind": self.kind, "name": self.name, "in": self.in_features, "out": self.out_features}


class Conv2D:
    """Valid, stride-1 convolution. Weights are (out, in, k, k)."""

    kind = "conv"
    has_params = True

    def __init__(self, name, in_channels, out_channels, kernel):
        self.name, self.in_channels, self.out_channels, self.kernel = name, in_channels, out_channels, kernel

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(f"{self.name}: expected ({self.in_channels}, H, W), got {in_shape}")
        _, h, w = in_shape
        if h < self.kernel or w < self.kernel:
            raise ShapeError(f"{self.name}: input {in_shape} smaller than kernel {self.kernel}")
        return (self.out_channels, h - self.kernel + 1, w - self.kernel + 1)

    def init_params(self, rng, dtype):
        fan_in = self.in_channels * self.kernel**2
        W = rng.normal(0.0, np.sqrt(2.0 / fan_in), (self.out_channels, self.in_channels, self.kernel, self.kernel))
        return {"W": W.astype(dtype), "b": np.zeros(self.out_channels, dtype=dtype)}

    def forward(self, x, p, mask):
        win = sliding_window_view(x, (self.kernel, self.kernel), axis=(2, 3))  # N,C,Ho,Wo,k,k
        y = np.tensordot(win, p["W"], axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,O
        y = y.transpose(0, 3, 1, 2) + p["b"][None, :, None, None]
        return np.ascontiguousarray(y), x

    def backward(self, dy, saved, p, mask):
        x = saved
        k = self.kernel
        win = sliding_window_view(x, (k, k), axis=(2, 3))
        dW = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))  # O,C,k,k
        db = dy.sum((0, 2, 3))
        padded = np.pad(dy, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        pwin = sliding_window_view(padded, (k, k), axis=(2, 3))  # N,O,H,W,k,k
        dx = np.tensordot(pwin, p["W"][:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))  # N,H,W,C
        return np.ascontiguousarray(dx.transpose(0, 3, 1, 2)), {"W": dW, "b": db}

    def spec(self):
        return {"kind": self.kind, "name": self.name, "in": self.in_channels, "out": self.out_channels, "kernel": self.kernel}


class MaxPool2D:
    kind = "maxpool"
    has_params = False

    def __init__(self, name, size=2):
        self.name, self.size = name, size

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h % self.size or w % self.size:
            raise ShapeError(f"{self.name}: {h}x{w} not divisible by pool size {self.size}")
        return (c, h // self.size, w // self.size)

    def forward(self, x, p, mask):
        n, c, h, w = x.shape
        s = self.size
        blocks = x.reshape(n, c, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // s, w // s, s * s)
        idx = blocks.argmax(-1)
        y = np.take_along_axis(blocks, idx[..., None], -1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, dy, saved, p, mask):
        idx, shape = saved
        n, c, h, w = shape
        s = self.size
        blocks = np.zeros((n, c, h // s, w // s, s * s), dtype=dy.dtype)
        np.put_along_axis(blocks, idx[..., None], dy[..., None], -1)
        dx = blocks.reshape(n, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(shape)
        return dx, None

    def spec(self):
        return {"kind": self.kind, "name": self.name, "size": self.size}


class ReLU:
    kind = "relu"
    has_params = False

    def __init__(self, name):
        self.name = name

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, p, mask):
        on = x > 0
        return np.where(on, x, 0).astype(x.dtype, copy=False), on

    def backward(self, dy, saved, p, mask):
        return np.where(saved, dy, 0).astype(dy.dtype, copy=False), None

    def spec(self):
        return {"kind": self.kind, "name": self.name}


class Flatten:
    kind = "flatten"
    has_params = False

    def __init__(self, name):
        self.name = name

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, p, mask):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, saved, p, mask):
        return dy.reshape(saved), None

    def spec(self):
        return {"kind": self.kind, "name": self.name}


class Gate:
    """Multiplies features (2-D input) or channels (4-D input) by a mask."""

    kind = "gate"
    has_params = False

    def __init__(self, name, size, group_size=1):
        self.name, self.size, self.group_size = name, size, group_size

    def out_shape(self, in_shape):
        if in_shape[0] != self.size:
            raise ShapeError(f"{self.name}: {self.size} gates for {in_shape[0]} units/channels")
        return in_shape

    def _bcast(self, mask, ndim, dtype):
        mask = np.asarray(mask, dtype=dtype)
        return mask if ndim == 2 else mask[None, :, None, None]

    def forward(self, x, p, mask):
        if mask is None:
            return x, None
        return x * self._bcast(mask, x.ndim, x.dtype), None

    def backward(self, dy, saved, p, mask):
        if mask is None:
            return dy, None
        return dy * self._bcast(mask, dy.ndim, dy.dtype), None

    def spec(self):
        return {"kind": self.kind, "name": self.name, "size": self.size, "group_size": self.group_size}


LAYER_TYPES = {cls.kind: cls for cls in (Dense, Conv2D, MaxPool2D, ReLU, Flatten, Gate)}


def layer_from_spec(d):
    d = dict(d)
    kind = d.pop("kind")
    name = d.pop("name")
    if kind == "dense":
        return Dense(name, d["in"], d["out"])
    if kind == "conv":
        return Conv2D(name, d["in"], d["out"], d["kernel"])
    if kind == "gate":
        return Gate(name, d["size"], d.get("group_size", 1))
    if kind == "maxpool":
        return MaxPool2D(name, d.get("size", 2))
    if kind in LAYER_TYPES:
        return LAYER_TYPES[kind](name)
    raise ValueError(f"unknown layer kind {kind!r}")


_cache_ids = itertools.count()


@dataclass
class Cache:
    net_id: int
    version: int
    saved: list
    masks: dict
    consumed: bool = False


class GatedNetwork:
    """Ordered layer stack with parameters and gate attachment points."""

    def __init__(self, layers, input_shape, params=None, dtype=np.float32, seed=0, name="custom"):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.name = name
        self.version = 0
        self._id = next(_cache_ids)
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        self.shapes = [self.input_shape]
        for layer in self.layers:
            self.shapes.append(layer.out_shape(self.shapes[-1]))
        if params is None:
            rng = np.random.default_rng(seed)
            params = {l.name: l.init_params(rng, self.dtype) for l in self.layers if l.has_params}
        self.params = params
        weighted = [l for l in self.layers if l.has_params]
        if weighted and any(l.kind == "gate" for l in self.layers[self.layers.index(weighted[-1]):]):
            raise ValueError("the output layer must not be gated")

    # -- introspection -------------------------------------------------------
    @property
    def gates(self) -> list[Gate]:
        return [l for l in self.layers if l.kind == "gate"]

    def gate_layers(self) -> list[GateLayer]:
        return [GateLayer(g.name, g.size, g.group_size) for g in self.gates]

    @property
    def n_classes(self) -> int:
        return self.shapes[-1][0]

    def weighted_layers(self):
        """Yield (index, layer, in_gate, out_gate) for every dense/conv layer.

        ``in_gate`` is the nearest gate upstream with no weighted layer in
        between; ``out_gate`` the nearest gate downstream before the next
        weighted layer. Either may be None (ungated side).
        """
        for i, layer in enumerate(self.layers):
            if not layer.has_params:
                continue
            in_gate = out_gate = None
            for prev in reversed(self.layers[:i]):
                if prev.has_params:
                    break
                if prev.kind == "gate":
                    in_gate = prev
                    break
            for nxt in self.layers[i + 1:]:
                if nxt.has_params:
                    break
                if nxt.kind == "gate":
                    out_gate = nxt
                    break
            yield i, layer, in_gate, out_gate

    def gated_weights(self, gate_name: str) -> tuple[str, int]:
        """(param layer, axis) holding the weight group of each gate.

        A gate in front of a dense layer owns that layer's fan-out rows; a gate
        right after a conv layer owns that layer's filters. Both live on axis 0.
        """
        for _, layer, in_gate, out_gate in self.weighted_layers():
            if layer.kind == "dense" and in_gate is not None and in_gate.name == gate_name:
                return layer.name, 0
            if layer.kind == "conv" and out_gate is not None and out_gate.name == gate_name:
                return layer.name, 0
        raise KeyError(f"gate {gate_name!r} does not own a weight group")

    def spec(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "dtype": self.dtype.name,
            "layers": [l.spec() for l in self.layers],
        }

    @classmethod
    def from_spec(cls, spec, params=None):
        layers = [layer_from_spec(d) for d in spec["layers"]]
        return cls(layers, tuple(spec["input_shape"]), params=params, dtype=spec["dtype"], name=spec["name"])

    def copy(self) -> "GatedNetwork":
        params = {k: {n: a.copy() for n, a in v.items()} for k, v in self.params.items()}
        return GatedNetwork.from_spec(self.spec(), params=params)

    def astype(self, dtype) -> "GatedNetwork":
        spec = self.spec()
        spec["dtype"] = np.dtype(dtype).name
        params = {k: {n: a.astype(dtype) for n, a in v.items()} for k, v in self.params.items()}
        return GatedNetwork.from_spec(spec, params=params)

    def flat_params(self) -> dict[str, np.ndarray]:
        return {f"{k}.{n}": a for k, v in self.params.items() for n, a in v.items()}

    def mark_updated(self):
        self.version += 1

    # -- computation ---------------------------------------------------------
    def _check_masks(self, masks):
        masks = dict(masks or {})
        for g in self.gates:
            if g.name in masks and np.shape(masks[g.name]) != (g.size,):
                raise ShapeError(f"mask for {g.name} has shape {np.shape(masks[g.name])}, expected ({g.size},)")
        unknown = set(masks) - {g.name for g in self.gates}
        if unknown:
            raise ShapeError(f"masks given for unknown gates {sorted(unknown)}")
        return masks

    def forward(self, x, masks=None, keep_cache=True):
        """Run the stack. Gates without an entry in ``masks`` pass input through."""
        x = np.asarray(x)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"batch has shape {x.shape[1:]}, network expects {self.input_shape}")
        masks = self._check_masks(masks)
        x = x.astype(self.dtype, copy=False)
        saved = []
        for layer in self.layers:
            x, s = layer.forward(x, self.params.get(layer.name), masks.get(layer.name))
            if keep_cache:
                saved.append(s)
        cache = Cache(self._id, self.version, saved, masks) if keep_cache else None
        return x, cache

    def backward(self, cache: Cache, dout):
        """Gradients of the loss w.r.t. every parameter, masks held fixed."""
        if cache is None or cache.net_id != self._id or cache.version != self.version:
            raise StaleCacheError("cache does not belong to the current parameters of this network")
        if cache.consumed:
            raise StaleCacheError("cache already used for a backward pass")
        cache.consumed = True
        grads = {}
        dy = np.asarray(dout, dtype=self.dtype)
        for layer, s in zip(reversed(self.layers), reversed(cache.saved)):
            dy, g = layer.backward(dy, s, self.params.get(layer.name), cache.masks.get(layer.name))
            if g is not None:
                grads[layer.name] = g
        return grads

    def predict(self, x, masks=None, batch_size=1000):
        out = []
        for i in range(0, len(x), batch_size):
            logits, _ = self.forward(x[i:i + batch_size], masks, keep_cache=False)
            out.append(logits.argmax(1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def loss(logits, targets, kind="cross_entropy"):
    """Batch-mean loss and its gradient w.r.t. ``logits``.

    ``cross_entropy`` takes integer class targets; ``mse`` takes an array of
    the same shape as ``logits`` (integer targets are one-hot encoded).
    """
    logits = np.asarray(logits)
    n = logits.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    targets = np.asarray(targets)
    if kind == "cross_entropy":
        if targets.shape != (n,):
            raise ShapeError(f"targets shape {targets.shape} does not match batch of {n}")
        z = logits - logits.max(1, keepdims=True)
        lse = np.log(np.exp(z).sum(1, keepdims=True))
        logp = z - lse
        value = -logp[np.arange(n), targets].mean()
        d = np.exp(logp)
        d[np.arange(n), targets] -= 1
        return float(value), d / n
    if kind == "mse":
        if targets.ndim == 1 and logits.ndim == 2 and targets.dtype.kind in "iu":
            targets = np.eye(logits.shape[1], dtype=logits.dtype)[targets]
        if targets.shape != logits.shape:
            raise ShapeError(f"targets shape {targets.shape} != outputs shape {logits.shape}")
        diff = logits - targets
        per = diff.reshape(n, -1)
        value = (per**2).sum(1).mean()
        return float(value), 2.0 * diff / n
    raise ValueError(f"unknown loss {kind!r}")


PRESETS = ("mlp_784_300_100", "lenet5_caffe", "toy_dense")


def build_preset(name: str, seed: int = 0, dtype=np.float32) -> GatedNetwork:
    if name == "mlp_784_300_100":
        layers = [
            Flatten("flatten"),
            Gate("gate_in", 784, 300), Dense("fc1", 784, 300), ReLU("relu1"),
            Gate("gate_h1", 300, 100), Dense("fc2", 300, 100), ReLU("relu2"),
            Gate("gate_h2", 100, 10), Dense("fc3", 100, 10),
        ]
        return GatedNetwork(layers, (1, 28, 28), dtype=dtype, seed=seed, name=name)
    if name == "lenet5_caffe":
        layers = [
            Conv2D("conv1", 1, 20, 5), Gate("gate_conv1", 20, 1 * 25), ReLU("relu1"), MaxPool2D("pool1"),
            Conv2D("conv2", 20, 50, 5), Gate("gate_conv2", 50, 20 * 25), ReLU("relu2"), MaxPool2D("pool2"),
            Flatten("flatten"),
            Gate("gate_flat", 800, 500), Dense("fc1", 800, 500), ReLU("relu3"),
            Gate("gate_fc1", 500, 10), Dense("fc2", 500, 10),
        ]
        return GatedNetwork(layers, (1, 28, 28), dtype=dtype, seed=seed, name=name)
    if name == "toy_dense":
        layers = [
            Gate("gate_in", 6, 4), Dense("fc1", 6, 4), ReLU("relu1"),
            Gate("gate_h1", 4, 3), Dense("fc2", 4, 3),
        ]
        return GatedNetwork(layers, (6,), dtype=dtype, seed=seed, name=name)
    raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


def build_mlp(sizes, n_classes, seed=0, dtype=np.float32, name="mlp") -> GatedNetwork:
    """Gated MLP: one gate per input/hidden unit, ungated output layer."""
    layers = []
    dims = list(sizes) + [n_classes]
    for i in range(len(sizes)):
        layers.append(Gate(f"gate{i}", dims[i], dims[i + 1]))
        layers.append(Dense(f"fc{i + 1}", dims[i], dims[i + 1]))
        if i + 1 < len(sizes):
            layers.append(ReLU(f"relu{i + 1}"))
    return GatedNetwork(layers, (sizes[0],), dtype=dtype, seed=seed, name=name)
