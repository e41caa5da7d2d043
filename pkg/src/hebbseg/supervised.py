"""Supervised stage: cross-entropy training with explicit reverse-mode
gradients (no autodiff framework) plus the frozen-backbone linear probe.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import augment
from .layers import LayerWeights
from .metrics import dice
from .network import HebbianUNet, forward
from .ops import (
    FLOAT,
    ConvGeometry,
    conv2d_forward,
    conv2d_input_grad,
    conv2d_weight_grad,
    maxpool2x2_backward,
    relu_backward,
    tconv2d_input_grad,
    tconv2d_weight_grad,
)


@dataclass(frozen=True)
class SGDConfig:
    """Multi-step SGD schedule: lr(epoch) = lr0 * decay^(epoch // every)."""

    lr0: float = 0.5
    decay_every: int = 50
    decay_factor: float = 0.1
    epochs: int = 200
    momentum: float = 0.9
    batch_size: int = 8

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.decay_every < 1:
            raise ValueError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.decay_factor ** (epoch // self.decay_every)


def softmax_ce_loss(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean pixel-wise cross entropy and its gradient w.r.t. the logits.

    ``target`` holds integer class indices in [0, K).
    """
    n, k, h, w = logits.shape
    t = np.asarray(target)
    if t.shape != (n, h, w):
        raise ValueError(f"target shape {t.shape} does not match logits {logits.shape}")
    if t.min() < 0 or t.max() >= k:
        raise ValueError(
            f"target classes must lie in [0, {k}), found range "
            f"[{t.min()}, {t.max()}]"
        )
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    idx_n, idx_h, idx_w = np.ogrid[:n, :h, :w]
    picked = p[idx_n, t, idx_h, idx_w]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    onehot = np.zeros_like(p)
    onehot[idx_n, t, idx_h, idx_w] = 1.0
    dlogits = ((p - onehot) / (n * h * w)).astype(FLOAT)
    return loss, dlogits


def backward(net: HebbianUNet, cache: dict, dlogits: np.ndarray) -> dict:
    """Exact reverse-mode weight gradients for every layer.

    ``cache`` must come from the forward pass that produced the logits the
    gradient refers to.
    """
    if "logits" not in cache or cache["logits"].shape != dlogits.shape:
        raise ValueError(
            "stale cache: gradient shape does not match the cached forward pass"
        )
    spec = net.spec
    grads = {}
    head = net.layer("head")
    head_in = cache["head_in"]
    grads["head"] = conv2d_weight_grad(head_in, dlogits, head.geom)
    grads["head.bias"] = dlogits.astype(np.float64).sum(axis=(0, 2, 3)).astype(FLOAT)
    cur = conv2d_input_grad(dlogits, head.weights, head.geom, head_in.shape[2:])
    skip_grads = {}
    # decoder entries were appended deepest first; the last one feeds the head
    for entry in reversed(cache["dec"]):
        i = entry["stage"]
        clayer = net.layer(f"dec{i}.conv")
        tlayer = net.layer(f"dec{i}.tconv")
        dcpre = relu_backward(cur, entry["cpre"])
        grads[f"dec{i}.conv"] = conv2d_weight_grad(entry["cat"], dcpre, clayer.geom)
        dcat = conv2d_input_grad(
            dcpre, clayer.weights, clayer.geom, entry["cat"].shape[2:]
        )
        t_channels = entry["tact"].shape[1]
        dtact = dcat[:, :t_channels]
        skip_grads[i] = dcat[:, t_channels:]
        dtpre = relu_backward(dtact, entry["tpre"])
        grads[f"dec{i}.tconv"] = tconv2d_weight_grad(
            entry["tconv_in"], dtpre, tlayer.geom
        )
        cur = tconv2d_input_grad(dtpre, tlayer.weights, tlayer.geom)
    for i in range(spec.stages, 0, -1):
        entry = cache["enc"][i - 1]
        layer = net.layer(f"enc{i}.conv")
        act_hw = entry["act"].shape[2:]
        dact = maxpool2x2_backward(cur, entry["pool_idx"], act_hw)
        if i in skip_grads:
            dact = dact + skip_grads[i]
        dpre = relu_backward(dact, entry["pre"])
        grads[f"enc{i}.conv"] = conv2d_weight_grad(entry["in"], dpre, layer.geom)
        cur = conv2d_input_grad(dpre, layer.weights, layer.geom, entry["in"].shape[2:])
    return grads


def predict_classes(net: HebbianUNet, images: np.ndarray,
                    batch_size: int = 16) -> np.ndarray:
    """Argmax class map [N, H, W] for a stack of images."""
    outs = []
    for start in range(0, len(images), batch_size):
        logits, _ = forward(net, images[start : start + batch_size])
        outs.append(logits.argmax(axis=1))
    return np.concatenate(outs)


def mean_foreground_dice(pred_classes: np.ndarray, masks: np.ndarray,
                         num_classes: int) -> float:
    """Per-class dice over foreground classes, averaged, then over images."""
    scores = []
    for pred, mask in zip(pred_classes, masks):
        per_class = [
            dice((pred == c).astype(np.uint8), (mask == c).astype(np.uint8))
            for c in range(1, num_classes)
        ]
        scores.append(float(np.mean(per_class)))
    return float(np.mean(scores))


def evaluate_dc(net: HebbianUNet, images: np.ndarray, masks: np.ndarray) -> float:
    preds = predict_classes(net, images)
    return mean_foreground_dice(preds, masks, net.spec.num_classes)


def _stack_pairs(items):
    images = np.stack([img for img, _ in items])
    masks = np.stack([m for _, m in items]).astype(np.int64)
    return images, masks


def _sgd_apply(net: HebbianUNet, grads: dict, velocity: dict, lr: float,
               momentum: float, names) -> None:
    for name in names:
        v = momentum * velocity[name] - lr * grads[name].astype(np.float64)
        velocity[name] = v
        if name == "head.bias":
            net.head_bias = (net.head_bias.astype(np.float64) + v).astype(FLOAT)
            continue
        lw = net.layer(name)
        net.layers[name] = LayerWeights(
            lw.kind, (lw.weights.astype(np.float64) + v).astype(FLOAT),
            lw.geom, lw.name,
        )


def finetune(net: HebbianUNet, train_items: list, val_items: list,
             cfg: SGDConfig, augment_on: bool, seed: int
             ) -> tuple[HebbianUNet, list]:
    """Supervised training; returns the best-validation-dice snapshot.

    ``train_items`` and ``val_items`` are (image, mask) pairs. History rows
    are (epoch, lr, train_loss, val_dc).
    """
    if not train_items:
        raise ValueError("finetune requires a non-empty labeled set")
    if cfg.epochs < 1:
        raise ValueError("finetune requires epochs >= 1")
    rng = np.random.default_rng(seed)
    net = net.copy()
    names = list(net.layers) + ["head.bias"]
    velocity = {
        n: np.zeros(
            net.head_bias.shape if n == "head.bias" else net.layer(n).weights.shape,
            np.float64,
        )
        for n in names
    }
    val_images, val_masks = _stack_pairs(val_items)
    best_dc = -1.0
    best = net.copy()
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(train_items))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_items[i] for i in order[start : start + cfg.batch_size]]
            if augment_on:
                chunk = [augment(img, mask, rng) for img, mask in chunk]
            images, masks = _stack_pairs(chunk)
            logits, cache = forward(net, images)
            loss, dlogits = softmax_ce_loss(logits, masks)
            if not np.isfinite(loss):
                raise ValueError(f"non-finite training loss at epoch {epoch}")
            grads = backward(net, cache, dlogits)
            _sgd_apply(net, grads, velocity, lr, cfg.momentum, names)
            losses.append(loss)
        val_dc = evaluate_dc(net, val_images, val_masks)
        history.append((epoch, lr, float(np.mean(losses)), val_dc))
        if val_dc > best_dc:
            best_dc = val_dc
            best = net.copy()
    return best, history


def linear_probe(net: HebbianUNet, train_items: list, val_items: list,
                 cfg: SGDConfig, seed: int) -> tuple[LayerWeights, float, list]:
    """Train only a fresh 1x1 classifier over frozen features.

    Backbone weights are never written; features are computed once. With
    ``cfg.epochs == 0`` the returned score is the initialization's.
    """
    if not train_items:
        raise ValueError("probe requires a non-empty labeled set")
    rng = np.random.default_rng(seed)
    spec = net.spec
    train_images, train_masks = _stack_pairs(train_items)
    val_images, val_masks = _stack_pairs(val_items)

    def feature_stack(images):
        feats = []
        for start in range(0, len(images), 16):
            _, cache = forward(net, images[start : start + 16])
            feats.append(cache["head_in"])
        return np.concatenate(feats)

    train_feats = feature_stack(train_images)
    val_feats = feature_stack(val_images)
    geom = ConvGeometry(train_feats.shape[1], spec.num_classes, 1, 1, 1, 0)
    w = (rng.standard_normal(
        (spec.num_classes, train_feats.shape[1], 1, 1)) * 0.1).astype(FLOAT)
    b = np.zeros(spec.num_classes, FLOAT)
    vel_w = np.zeros(w.shape, np.float64)
    vel_b = np.zeros(b.shape, np.float64)
    history = []

    def probe_logits(feats, weights, bias):
        return conv2d_forward(feats, weights, geom) + bias[None, :, None, None]

    def probe_dc(weights, bias):
        logits = probe_logits(val_feats, weights, bias)
        return mean_foreground_dice(
            logits.argmax(axis=1), val_masks, spec.num_classes
        )

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(train_feats))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            feats, masks = train_feats[sel], train_masks[sel]
            logits = probe_logits(feats, w, b)
            loss, dlogits = softmax_ce_loss(logits, masks)
            if not np.isfinite(loss):
                raise ValueError(f"non-finite probe loss at epoch {epoch}")
            grad_w = conv2d_weight_grad(feats, dlogits, geom)
            grad_b = dlogits.astype(np.float64).sum(axis=(0, 2, 3))
            vel_w = cfg.momentum * vel_w - lr * grad_w.astype(np.float64)
            vel_b = cfg.momentum * vel_b - lr * grad_b
            w = (w.astype(np.float64) + vel_w).astype(FLOAT)
            b = (b.astype(np.float64) + vel_b).astype(FLOAT)
            losses.append(loss)
        history.append((epoch, lr, float(np.mean(losses)), probe_dc(w, b)))
    head = LayerWeights("conv", w, geom, "probe_head")
    return head, probe_dc(w, b), history


def write_history_csv(path, history: list) -> None:
    lines = ["epoch,lr,train_loss,val_dc"]
    for epoch, lr, loss, val_dc in history:
        lines.append(f"{epoch},{lr:.10g},{loss:.10g},{val_dc:.10g}")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
