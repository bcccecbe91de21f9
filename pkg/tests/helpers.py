"""Shared test utilities: central finite differences and error measures."""

import numpy as np

from l0arm.nn import Conv2D, Flatten, Gate, GatedNetwork, ReLU, Dense, build_preset, loss

FD_STEP = 1e-6
REL_FLOOR = 1e-4


def central_diff(f, x, h=FD_STEP):
    """d f / d x for a scalar f, perturbing ``x`` in place one entry at a time."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return grad


def max_rel_err(a, b, floor=REL_FLOOR):
    """max |a - b| / max(|a|, |b|, floor): relative where gradients are not tiny."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def toy_conv_net(seed=0):
    """2 filters 3x3 on 1x8x8, gated channels, then a dense head."""
    layers = [
        Conv2D("conv", 1, 2, 3), Gate("gate_c", 2, 9), ReLU("relu"),
        Flatten("flat"), Dense("fc", 72, 3),
    ]
    return GatedNetwork(layers, (1, 8, 8), dtype=np.float64, seed=seed, name="toy_conv")


def network_fd_errors(net, x, y, masks):
    """Max relative error of backward vs central differences, per parameter array."""
    out, cache = net.forward(x, masks)
    _, dout = loss(out, y)
    grads = net.backward(cache, dout)

    def f():
        logits, _ = net.forward(x, masks, keep_cache=False)
        return loss(logits, y)[0]

    errs = {}
    for lname, ps in net.params.items():
        for pname, arr in ps.items():
            num = central_diff(f, arr)
            errs[f"{lname}.{pname}"] = max_rel_err(grads[lname][pname], num)
    return errs


def toy_dense_float64(seed=0):
    return build_preset("toy_dense", seed=seed, dtype=np.float64)
