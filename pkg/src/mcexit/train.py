"""Desk-scale trainer for the dense subset of layer kinds.

Minimizes the sum of per-exit cross-entropy losses with plain mini-batch
gradient descent. Dropout stays active during training exactly as
configured for inference, and every random choice (init, shuffling,
dropout draws) derives from the config seed, so a rerun reproduces the
returned weights byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import netspec
from .datasets import Dataset
from .dropout import DropoutConfig, derive_seed, generate_masks
from .inference import site_feature_count
from .netspec import LayerSpec, MultiExitSpec
from .runtime import WeightStore, init_weights

SUPPORTED_KINDS = ("dense", "relu", "softmax", "flatten", "max_pool", "avg_pool", "dropout_point")


class TrainingError(RuntimeError):
    """Raised when a spec uses layers the toy trainer cannot differentiate."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    epochs: int
    batch: int
    seed: int

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")


def _check_trainable(me: MultiExitSpec) -> None:
    if len(me.trunk.input_shape) != 1:
        raise TrainingError("the toy trainer handles rank-1 inputs only")
    for layer in netspec.all_layers(me):
        if layer.kind not in SUPPORTED_KINDS:
            raise TrainingError(
                f"layer {layer.id!r}: kind {layer.kind!r} is outside the trainable dense subset"
            )
    for ex in me.exits:
        if ex.head_layers[-1].kind != "softmax":
            raise TrainingError(f"exit {ex.exit_index} head must end in softmax")
        if any(l.kind == "softmax" for l in ex.head_layers[:-1]):
            raise TrainingError("softmax is only supported as the terminal head layer")
    if any(l.kind == "softmax" for l in me.trunk.layers):
        raise TrainingError("softmax is only supported as the terminal head layer")


def _pool_indices(layer: LayerSpec, width: int) -> np.ndarray:
    win = layer.params["window"]
    if not isinstance(win, int):
        raise TrainingError(f"layer {layer.id!r}: only integer pooling windows are trainable")
    stride = layer.params["stride"]
    n = (width - win) // stride + 1
    return np.arange(n)[:, None] * stride + np.arange(win)[None, :]


def _forward_layer(
    layer: LayerSpec,
    x: np.ndarray,
    weights: WeightStore,
    draws: Mapping[str, np.ndarray],
) -> tuple[np.ndarray, object]:
    """Batched forward for one layer; returns (output, backward context)."""
    kind = layer.kind
    if kind == "dense":
        w, b = weights[layer.id]["weights"], weights[layer.id]["bias"]
        return x @ w.T + b, x
    if kind == "relu":
        return np.maximum(x, 0), x
    if kind == "flatten":
        return x, None
    if kind == "dropout_point":
        mult = draws[layer.id]
        return x * mult, mult
    if kind in ("max_pool", "avg_pool"):
        idx = _pool_indices(layer, x.shape[1])
        windows = x[:, idx]
        if kind == "max_pool":
            arg = windows.argmax(axis=2)
            return windows.max(axis=2), (idx, arg, x.shape[1])
        return windows.mean(axis=2, dtype=x.dtype), (idx, None, x.shape[1])
    raise TrainingError(f"layer {layer.id!r}: kind {kind!r} has no training rule")


def _backward_layer(
    layer: LayerSpec,
    grad: np.ndarray,
    ctx: object,
    weights: WeightStore,
    grads: dict[str, dict[str, np.ndarray]],
) -> np.ndarray:
    kind = layer.kind
    if kind == "dense":
        x = ctx
        w = weights[layer.id]["weights"]
        g = grads.setdefault(layer.id, {})
        g["weights"] = g.get("weights", 0) + grad.T @ x
        g["bias"] = g.get("bias", 0) + grad.sum(axis=0)
        return grad @ w
    if kind == "relu":
        return grad * (ctx > 0)
    if kind == "flatten":
        return grad
    if kind == "dropout_point":
        return grad * ctx
    if kind in ("max_pool", "avg_pool"):
        idx, arg, width = ctx
        out = np.zeros((grad.shape[0], width), dtype=grad.dtype)
        rows = np.arange(grad.shape[0])[:, None]
        if kind == "max_pool":
            chosen = idx[np.arange(idx.shape[0])[None, :], arg]
            np.add.at(out, (rows, chosen), grad)
        else:
            win = idx.shape[1]
            share = grad / grad.dtype.type(win)
            for j in range(win):
                np.add.at(out, (rows, idx[None, :, j]), share)
        return out
    raise TrainingError(f"layer {layer.id!r}: kind {kind!r} has no training rule")


def make_dropout_draws(
    me: MultiExitSpec,
    batch_size: int,
    epoch_positions: np.ndarray,
    seed: int,
) -> dict[str, np.ndarray]:
    """One dropout realization per site for a whole batch.

    MCD draws a fresh scaled Bernoulli multiplier for every example;
    masksembles assigns example j the mask (epoch position of j) modulo
    num_masks, cycling through the table deterministically.
    """
    cfg = me.dropout
    draws: dict[str, np.ndarray] = {}
    if cfg is None:
        return draws
    for exit_index, site_id in me.dropout_sites:
        f = site_feature_count(me, exit_index, site_id)
        if cfg.kind == "mcd":
            gen = np.random.Generator(
                np.random.Philox(key=derive_seed(seed, "train-drop", site_id))
            )
            u = gen.random((batch_size, f))
            scale = (1.0 / cfg.keep_rate) if cfg.inverted else cfg.keep_rate
            draws[site_id] = np.where(u > cfg.keep_rate, 0.0, scale).astype(np.float32)
        else:
            table = generate_masks(f, cfg.num_masks, cfg.scale)
            rows = epoch_positions % cfg.num_masks
            draws[site_id] = table.masks[rows].astype(np.float32)
    return draws


def loss_and_grads(
    me: MultiExitSpec,
    weights: WeightStore,
    x: np.ndarray,
    y: np.ndarray,
    draws: Mapping[str, np.ndarray],
) -> tuple[float, dict[str, dict[str, np.ndarray]]]:
    """Summed per-exit cross-entropy and its analytic gradients.

    The dropout realization is supplied explicitly so the loss is a
    deterministic, differentiable function of the weights; that is what
    makes finite-difference checks of these gradients meaningful.
    """
    _check_trainable(me)
    x = np.asarray(x)
    y = np.asarray(y)
    batch = x.shape[0]
    classes = me.class_count
    onehot = np.zeros((batch, classes), dtype=x.dtype)
    onehot[np.arange(batch), y] = 1

    deepest = netspec.deepest_attach(me)
    trunk_tape: list[tuple[LayerSpec, object]] = []
    trunk_acts: dict[str | None, np.ndarray] = {None: x}
    cur = x
    for layer in me.trunk.layers[: deepest + 1]:
        cur, ctx = _forward_layer(layer, cur, weights, draws)
        trunk_tape.append((layer, ctx))
        trunk_acts[layer.id] = cur

    grads: dict[str, dict[str, np.ndarray]] = {}
    attach_grads: dict[str | None, np.ndarray] = {}
    total_loss = 0.0
    for ex in me.exits:
        feat = trunk_acts[ex.attach_after]
        tape: list[tuple[LayerSpec, object]] = []
        h = feat
        for layer in ex.head_layers[:-1]:
            h, ctx = _forward_layer(layer, h, weights, draws)
            tape.append((layer, ctx))
        # fused softmax + cross-entropy on the terminal layer
        logits = h
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        total_loss += float(-(onehot * logz).sum() / batch)
        g = (np.exp(logz) - onehot) / x.dtype.type(batch)
        for layer, ctx in reversed(tape):
            g = _backward_layer(layer, g, ctx, weights, grads)
        prev = attach_grads.get(ex.attach_after)
        attach_grads[ex.attach_after] = g if prev is None else prev + g

    g = None
    for pos in range(len(trunk_tape) - 1, -1, -1):
        layer, ctx = trunk_tape[pos]
        arriving = attach_grads.get(layer.id)
        if arriving is not None:
            g = arriving if g is None else g + arriving
        if g is None:
            continue
        g = _backward_layer(layer, g, ctx, weights, grads)
    return total_loss, grads


def train_toy(me: MultiExitSpec, data: Dataset, cfg: TrainConfig) -> WeightStore:
    """Train and return float32 weights; same seed, same bytes out."""
    _check_trainable(me)
    weights = init_weights(netspec.all_layers(me), cfg.seed)
    x_all = np.asarray(data.features, dtype=np.float32)
    y_all = np.asarray(data.labels)
    n = len(x_all)
    lr = np.float32(cfg.lr)
    for epoch in range(cfg.epochs):
        gen = np.random.Generator(np.random.Philox(key=derive_seed(cfg.seed, "shuffle", epoch)))
        order = gen.permutation(n)
        for start in range(0, n, cfg.batch):
            take = order[start : start + cfg.batch]
            draws = make_dropout_draws(
                me,
                len(take),
                epoch_positions=np.arange(start, start + len(take)),
                seed=derive_seed(cfg.seed, "epoch", epoch, "batch", start),
            )
            _, grads = loss_and_grads(me, weights, x_all[take], y_all[take], draws)
            for lid, named in grads.items():
                for name, g in named.items():
                    weights[lid][name] = weights[lid][name] - lr * g.astype(np.float32)
    return weights
