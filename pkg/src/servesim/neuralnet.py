"""Multi-stream neural predictor, implemented from scratch on numpy.

Three input streams are encoded by dedicated pathways and fused:

* resource stream [T,4]  -> two 1-D convolutions (4->16->16, kernel 3,
  same padding, ReLU) -> global average pool -> 16
* performance stream [T,3] -> Elman recurrence (hidden 32, tanh),
  last hidden state -> 32
* deployment vector [8] -> affine 8->32 + batch norm + ReLU -> 32

The 80-dim fusion passes through an affine 80->64 + ReLU into three
scalar heads: load forecast, latency forecast, efficiency score (all in
normalized target units). Training is plain backprop + Adam; gradients
are validated against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import Rng
from .metrics import MetricWindow

CONV_CH = 16
RNN_HIDDEN = 32
DENSE_HIDDEN = 32
FUSE_IN = CONV_CH + RNN_HIDDEN + DENSE_HIDDEN  # 80
FUSE_HIDDEN = 64
N_HEADS = 3
BN_MOMENTUM = 0.9
BN_EPS = 1e-5

PARAM_SHAPES = {
    "conv1_w": (CONV_CH, 4, 3),
    "conv1_b": (CONV_CH,),
    "conv2_w": (CONV_CH, CONV_CH, 3),
    "conv2_b": (CONV_CH,),
    "rnn_wx": (3, RNN_HIDDEN),
    "rnn_wh": (RNN_HIDDEN, RNN_HIDDEN),
    "rnn_b": (RNN_HIDDEN,),
    "dense_w": (8, DENSE_HIDDEN),
    "dense_b": (DENSE_HIDDEN,),
    "bn_gamma": (DENSE_HIDDEN,),
    "bn_beta": (DENSE_HIDDEN,),
    "fuse_w": (FUSE_IN, FUSE_HIDDEN),
    "fuse_b": (FUSE_HIDDEN,),
    "head_w": (FUSE_HIDDEN, N_HEADS),
    "head_b": (N_HEADS,),
}

ARCH_DESCRIPTOR = {
    "conv_channels": CONV_CH,
    "rnn_hidden": RNN_HIDDEN,
    "dense_hidden": DENSE_HIDDEN,
    "fuse_hidden": FUSE_HIDDEN,
    "heads": N_HEADS,
}


@dataclass
class MultiStreamNet:
    params: dict[str, np.ndarray]
    bn_mean: np.ndarray
    bn_var: np.ndarray
    # Per-head target normalization (set at training time, identity before).
    target_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_HEADS))
    target_std: np.ndarray = field(default_factory=lambda: np.ones(N_HEADS))
    trained: bool = False


def _glorot(rng: Rng, shape, fan_in, fan_out) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init(seed: int) -> MultiStreamNet:
    """Glorot-uniform weights from a seeded generator; zero biases."""
    rng = Rng(seed)
    p = {
        "conv1_w": _glorot(rng, PARAM_SHAPES["conv1_w"], 4 * 3, CONV_CH * 3),
        "conv1_b": np.zeros(CONV_CH),
        "conv2_w": _glorot(rng, PARAM_SHAPES["conv2_w"], CONV_CH * 3, CONV_CH * 3),
        "conv2_b": np.zeros(CONV_CH),
        "rnn_wx": _glorot(rng, PARAM_SHAPES["rnn_wx"], 3, RNN_HIDDEN),
        "rnn_wh": _glorot(rng, PARAM_SHAPES["rnn_wh"], RNN_HIDDEN, RNN_HIDDEN),
        "rnn_b": np.zeros(RNN_HIDDEN),
        "dense_w": _glorot(rng, PARAM_SHAPES["dense_w"], 8, DENSE_HIDDEN),
        "dense_b": np.zeros(DENSE_HIDDEN),
        "bn_gamma": np.ones(DENSE_HIDDEN),
        "bn_beta": np.zeros(DENSE_HIDDEN),
        "fuse_w": _glorot(rng, PARAM_SHAPES["fuse_w"], FUSE_IN, FUSE_HIDDEN),
        "fuse_b": np.zeros(FUSE_HIDDEN),
        "head_w": _glorot(rng, PARAM_SHAPES["head_w"], FUSE_HIDDEN, N_HEADS),
        "head_b": np.zeros(N_HEADS),
    }
    return MultiStreamNet(params=p, bn_mean=np.zeros(DENSE_HIDDEN), bn_var=np.ones(DENSE_HIDDEN))


def stack_windows(windows: list[MetricWindow]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    R = np.stack([w.resource for w in windows])
    P = np.stack([w.performance for w in windows])
    D = np.stack([w.deploy for w in windows])
    return R, P, D


def _im2col(x: np.ndarray) -> np.ndarray:
    """Unfold kernel-3 same-padded windows: x [B,T,C] -> [B,T,3C],
    column index k*C + c."""
    B, T, C = x.shape
    xp = np.zeros((B, T + 2, C))
    xp[:, 1:T + 1, :] = x
    return np.concatenate([xp[:, k:k + T, :] for k in range(3)], axis=2)


def _w2d(w: np.ndarray) -> np.ndarray:
    """Kernel [O,C,3] -> matmul form [3C,O] matching _im2col columns."""
    return w.transpose(2, 1, 0).reshape(-1, w.shape[0])


def _conv_same(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """1-D convolution over time, same zero padding. x [B,T,C] -> [B,T,O]."""
    return _im2col(x) @ _w2d(w) + b


def _conv_input_grad(dz: np.ndarray, x_shape, w: np.ndarray) -> np.ndarray:
    """Gradient of _conv_same w.r.t. its input: transposed convolution."""
    B, T, C = x_shape
    dcols = dz @ _w2d(w).T  # [B,T,3C]
    dxp = np.zeros((B, T + 2, C))
    for k in range(3):
        dxp[:, k:k + T, :] += dcols[:, :, k * C:(k + 1) * C]
    return dxp[:, 1:T + 1, :]


def _conv_weight_grad(x: np.ndarray, dz: np.ndarray) -> np.ndarray:
    O = dz.shape[2]
    C = x.shape[2]
    cols = _im2col(x).reshape(-1, 3 * C)
    dw2d = cols.T @ dz.reshape(-1, O)  # [3C,O]
    return dw2d.reshape(3, C, O).transpose(2, 1, 0)


def forward_batch(
    net: MultiStreamNet,
    R: np.ndarray,
    P: np.ndarray,
    D: np.ndarray,
    mode: str = "eval",
    update_running: bool = True,
):
    """Run the network over a batch; returns (preds [B,3], cache)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if R.ndim != 3 or P.ndim != 3 or D.ndim != 2:
        raise ValueError("expected R [B,T,4], P [B,T,3], D [B,8]")
    if R.shape[2] != 4 or P.shape[2] != 3 or D.shape[1] != 8:
        raise ValueError(
            f"channel mismatch: R {R.shape}, P {P.shape}, D {D.shape}"
        )
    p = net.params
    B, T = R.shape[0], R.shape[1]

    z1 = _conv_same(R, p["conv1_w"], p["conv1_b"])
    a1 = np.maximum(z1, 0.0)
    z2 = _conv_same(a1, p["conv2_w"], p["conv2_b"])
    a2 = np.maximum(z2, 0.0)
    gap = a2.mean(axis=1)  # [B,16]

    hs = np.empty((B, T, RNN_HIDDEN))
    h = np.zeros((B, RNN_HIDDEN))
    px = P.reshape(B * T, 3) @ p["rnn_wx"] + p["rnn_b"]
    px = px.reshape(B, T, RNN_HIDDEN)
    for t in range(T):
        h = np.tanh(px[:, t, :] + h @ p["rnn_wh"])
        hs[:, t, :] = h

    zd = D @ p["dense_w"] + p["dense_b"]
    if mode == "train":
        mu = zd.mean(axis=0)
        var = zd.var(axis=0)
        if update_running:
            net.bn_mean = BN_MOMENTUM * net.bn_mean + (1 - BN_MOMENTUM) * mu
            net.bn_var = BN_MOMENTUM * net.bn_var + (1 - BN_MOMENTUM) * var
    else:
        mu, var = net.bn_mean, net.bn_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (zd - mu) * inv_std
    bn_out = p["bn_gamma"] * xhat + p["bn_beta"]
    ad = np.maximum(bn_out, 0.0)

    fuse_in = np.concatenate([gap, h, ad], axis=1)  # [B,80]
    zf = fuse_in @ p["fuse_w"] + p["fuse_b"]
    af = np.maximum(zf, 0.0)
    preds = af @ p["head_w"] + p["head_b"]

    if not np.all(np.isfinite(preds)):
        raise FloatingPointError("non-finite network output")
    cache = {
        "R": R, "P": P, "D": D, "z1": z1, "a1": a1, "z2": z2, "a2": a2,
        "hs": hs, "zd": zd, "xhat": xhat, "inv_std": inv_std, "bn_out": bn_out,
        "ad": ad, "fuse_in": fuse_in, "zf": zf, "af": af, "mode": mode, "T": T,
    }
    return preds, cache


def forward(net: MultiStreamNet, window: MetricWindow, mode: str = "eval"):
    """Single-window forward; returns (load, latency, efficiency), cache."""
    window.validate()
    preds, cache = forward_batch(
        net, window.resource[None], window.performance[None], window.deploy[None], mode
    )
    return tuple(float(v) for v in preds[0]), cache


def loss(preds: np.ndarray, targets: np.ndarray) -> float:
    """Mean squared error over the batch and the three heads."""
    preds = np.asarray(preds, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if preds.shape != targets.shape:
        raise ValueError(f"shape mismatch {preds.shape} vs {targets.shape}")
    return float(np.mean((preds - targets) ** 2))


def backward(net: MultiStreamNet, cache: dict, preds: np.ndarray, targets: np.ndarray):
    """Gradients of the MSE loss w.r.t. every parameter."""
    p = net.params
    B, T = preds.shape[0], cache["T"]
    g = {}

    dpreds = 2.0 * (preds - targets) / preds.size

    g["head_w"] = cache["af"].T @ dpreds
    g["head_b"] = dpreds.sum(axis=0)
    daf = dpreds @ p["head_w"].T

    dzf = daf * (cache["zf"] > 0)
    g["fuse_w"] = cache["fuse_in"].T @ dzf
    g["fuse_b"] = dzf.sum(axis=0)
    dfuse_in = dzf @ p["fuse_w"].T

    dgap = dfuse_in[:, :CONV_CH]
    dh_last = dfuse_in[:, CONV_CH:CONV_CH + RNN_HIDDEN]
    dad = dfuse_in[:, CONV_CH + RNN_HIDDEN:]

    # Conv stream.
    da2 = np.repeat(dgap[:, None, :] / T, T, axis=1)
    dz2 = da2 * (cache["z2"] > 0)
    g["conv2_w"] = _conv_weight_grad(cache["a1"], dz2)
    g["conv2_b"] = dz2.sum(axis=(0, 1))
    da1 = _conv_input_grad(dz2, cache["a1"].shape, p["conv2_w"])
    dz1 = da1 * (cache["z1"] > 0)
    g["conv1_w"] = _conv_weight_grad(cache["R"], dz1)
    g["conv1_b"] = dz1.sum(axis=(0, 1))

    # Recurrent stream: backprop through time.
    hs = cache["hs"]
    g["rnn_wx"] = np.zeros_like(p["rnn_wx"])
    g["rnn_wh"] = np.zeros_like(p["rnn_wh"])
    g["rnn_b"] = np.zeros_like(p["rnn_b"])
    dh = dh_last.copy()
    for t in range(T - 1, -1, -1):
        dpre = dh * (1.0 - hs[:, t, :] ** 2)
        g["rnn_wx"] += cache["P"][:, t, :].T @ dpre
        h_prev = hs[:, t - 1, :] if t > 0 else np.zeros((B, RNN_HIDDEN))
        g["rnn_wh"] += h_prev.T @ dpre
        g["rnn_b"] += dpre.sum(axis=0)
        dh = dpre @ p["rnn_wh"].T

    # Dense + batch-norm stream.
    dbn_out = dad * (cache["bn_out"] > 0)
    xhat = cache["xhat"]
    g["bn_gamma"] = (dbn_out * xhat).sum(axis=0)
    g["bn_beta"] = dbn_out.sum(axis=0)
    dxhat = dbn_out * p["bn_gamma"]
    if cache["mode"] == "train":
        n = float(B)
        dzd = (cache["inv_std"] / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )
    else:
        dzd = dxhat * cache["inv_std"]
    g["dense_w"] = cache["D"].T @ dzd
    g["dense_b"] = dzd.sum(axis=0)

    return g


@dataclass
class OptimizerState:
    """Adaptive moment estimation (Adam) accumulators."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(net: MultiStreamNet, opt: OptimizerState, grads: dict):
    opt.step_count += 1
    t = opt.step_count
    for name, grad in grads.items():
        if name not in opt.m:
            opt.m[name] = np.zeros_like(grad)
            opt.v[name] = np.zeros_like(grad)
        opt.m[name] = opt.beta1 * opt.m[name] + (1 - opt.beta1) * grad
        opt.v[name] = opt.beta2 * opt.v[name] + (1 - opt.beta2) * grad**2
        m_hat = opt.m[name] / (1 - opt.beta1**t)
        v_hat = opt.v[name] / (1 - opt.beta2**t)
        net.params[name] = net.params[name] - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)


def train_step(net: MultiStreamNet, opt: OptimizerState, R, P, D, targets) -> float:
    """One Adam step on a batch; returns the pre-update loss."""
    preds, cache = forward_batch(net, R, P, D, mode="train")
    value = loss(preds, targets)
    grads = backward(net, cache, preds, targets)
    adam_update(net, opt, grads)
    return value


def save_weights(net: MultiStreamNet, path) -> None:
    doc = {
        "arch": ARCH_DESCRIPTOR,
        "layers": [
            {"name": k, "shape": list(v.shape), "values": v.ravel().tolist()}
            for k, v in sorted(net.params.items())
        ],
        "running_stats": {
            "bn_mean": net.bn_mean.tolist(),
            "bn_var": net.bn_var.tolist(),
            "target_mean": net.target_mean.tolist(),
            "target_std": net.target_std.tolist(),
            "trained": net.trained,
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_weights(path) -> MultiStreamNet:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("arch") != ARCH_DESCRIPTOR:
        raise ValueError(f"architecture mismatch: {doc.get('arch')} != {ARCH_DESCRIPTOR}")
    params = {}
    for layer in doc["layers"]:
        name = layer["name"]
        if name not in PARAM_SHAPES:
            raise ValueError(f"unknown layer {name!r}")
        shape = tuple(layer["shape"])
        if shape != PARAM_SHAPES[name]:
            raise ValueError(
                f"layer {name!r}: shape {shape} does not match expected {PARAM_SHAPES[name]}"
            )
        arr = np.array(layer["values"], dtype=float).reshape(shape)
        params[name] = arr
    missing = set(PARAM_SHAPES) - set(params)
    if missing:
        raise ValueError(f"missing layers: {sorted(missing)}")
    rs = doc["running_stats"]
    net = MultiStreamNet(
        params=params,
        bn_mean=np.array(rs["bn_mean"], dtype=float),
        bn_var=np.array(rs["bn_var"], dtype=float),
        target_mean=np.array(rs.get("target_mean", [0, 0, 0]), dtype=float),
        target_std=np.array(rs.get("target_std", [1, 1, 1]), dtype=float),
        trained=bool(rs.get("trained", False)),
    )
    if net.bn_mean.shape != (DENSE_HIDDEN,) or net.bn_var.shape != (DENSE_HIDDEN,):
        raise ValueError("running_stats: batch-norm statistics have the wrong shape")
    return net


# Feature groups for permutation importance: (stream, channel indices).
IMPORTANCE_GROUPS = {
    "resource": [("resource", [0, 1, 2])],          # cpu/mem/gpu channels
    "network": [("resource", [3])],                  # net_util channel
    "performance": [("performance", [0, 2])],        # latency + error rate
    "workload": [("performance", [1]), ("deploy", [2])],  # served history + per-replica rate
}


def permutation_importance(
    net: MultiStreamNet,
    windows: list[MetricWindow],
    targets: np.ndarray,
    seed: int = 0,
) -> dict[str, float]:
    """Loss increase per feature group when shuffled across the eval set,
    normalized to sum to 1."""
    if len(windows) < 100:
        raise ValueError(f"need at least 100 eval windows, got {len(windows)}")
    R, P, D = stack_windows(windows)
    targets = np.asarray(targets, dtype=float)
    base_preds, _ = forward_batch(net, R, P, D, mode="eval")
    base = loss(base_preds, targets)

    rng = Rng(seed)
    increases = {}
    for group, parts in IMPORTANCE_GROUPS.items():
        perm = rng.shuffle_index(len(windows))
        Rp, Pp, Dp = R.copy(), P.copy(), D.copy()
        for stream, chans in parts:
            if stream == "resource":
                Rp[:, :, chans] = Rp[perm][:, :, chans]
            elif stream == "performance":
                Pp[:, :, chans] = Pp[perm][:, :, chans]
            else:
                Dp[:, chans] = Dp[perm][:, chans]
        preds, _ = forward_batch(net, Rp, Pp, Dp, mode="eval")
        increases[group] = max(0.0, loss(preds, targets) - base)

    total = sum(increases.values())
    if total <= 0.0:
        return {g: 1.0 / len(increases) for g in increases}
    return {g: v / total for g, v in increases.items()}
