"""Local competitive/decorrelating weight-update rules for a dense layer.

Two rule families are provided. The soft-competition rule moves each weight
vector toward the inputs it responds to, scaled by a temperature softmax over
the neuron outputs, so weight vectors drift toward cluster centroids. The
cumulative-reconstruction rule subtracts the part of the input already
explained by earlier neurons, so weight rows align with the leading
eigenvectors of the input covariance.

Both decompose into the same three blocks: a gate over neuron outputs, a
reconstruction of the input from outputs and weights, and a plasticity step
``delta_w[j, i] = eta * g[j] * (s[i] - s_star[j, i])`` averaged over samples.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import FLOAT, softmax_t

RULE_SWTA = "swta"
RULE_HPCA = "hpca"
VARIANT_S = "s"
VARIANT_TSA = "tsa"


@dataclass(frozen=True)
class HebbianConfig:
    """Rule selection and hyperparameters for unsupervised updates.

    ``temperature`` only affects the softmax gate; it is ignored by the
    identity-gated rule.
    """

    rule: str = RULE_SWTA
    tconv_variant: str = VARIANT_TSA
    eta: float = 0.01
    temperature: float = 1.0

    def __post_init__(self):
        if self.rule not in (RULE_SWTA, RULE_HPCA):
            raise ValueError(f"unknown rule {self.rule!r}")
        if self.tconv_variant not in (VARIANT_S, VARIANT_TSA):
            raise ValueError(f"unknown t-conv variant {self.tconv_variant!r}")
        if not self.eta > 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


@dataclass
class UpdateSignals:
    """Inputs to the plasticity step.

    target: samples s, shape [..., D]
    reconstruction: per-neuron reconstructions s*, shape [..., K, D] or [K, D]
    gate: per-neuron step modulation g, shape [..., K]
    """

    target: np.ndarray
    reconstruction: np.ndarray
    gate: np.ndarray

    def __post_init__(self):
        k = self.gate.shape[-1]
        if self.reconstruction.shape[-2] != k:
            raise ValueError(
                f"gate has {k} neurons but reconstruction has "
                f"{self.reconstruction.shape[-2]} rows"
            )
        if self.reconstruction.shape[-1] != self.target.shape[-1]:
            raise ValueError(
                f"target dimension {self.target.shape[-1]} does not match "
                f"reconstruction dimension {self.reconstruction.shape[-1]}"
            )
        if self.gate.shape[:-1] != self.target.shape[:-1]:
            raise ValueError(
                f"gate batch shape {self.gate.shape[:-1]} does not match "
                f"target batch shape {self.target.shape[:-1]}"
            )


def gate_swta(y: np.ndarray, t: float) -> np.ndarray:
    """Temperature softmax over the neuron axis (last axis)."""
    return softmax_t(y, t, axis=-1)


def gate_hpca(y: np.ndarray) -> np.ndarray:
    """Identity gate."""
    return y


def reconstruct_swta(weights: np.ndarray) -> np.ndarray:
    """Each neuron reconstructs the input as its own weight vector."""
    return weights


def reconstruct_hpca(y: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Cumulative reconstruction: row j is sum_{k<=j} y_k * w_k.

    ``y`` may carry leading batch axes ([..., K] with weights [K, D] giving
    [..., K, D]).
    """
    if y.shape[-1] != weights.shape[0]:
        raise ValueError(
            f"y has {y.shape[-1]} outputs but weights have {weights.shape[0]} rows"
        )
    terms = y[..., :, None].astype(np.float64) * weights.astype(np.float64)
    return np.cumsum(terms, axis=-2).astype(FLOAT)


def plasticity(signals: UpdateSignals, eta: float) -> np.ndarray:
    """General update: delta[j, i] = eta * g[j] * (s[i] - s*[j, i]).

    Leading batch axes are averaged; eta is applied after the mean so the
    result is exactly linear in eta.
    """
    s = signals.target.astype(np.float64)
    s_star = signals.reconstruction.astype(np.float64)
    g = signals.gate.astype(np.float64)
    per = g[..., :, None] * (s[..., None, :] - s_star)
    batch_axes = tuple(range(per.ndim - 2))
    if batch_axes:
        per = per.mean(axis=batch_axes)
    return (eta * per).astype(FLOAT)


def _check_dense_shapes(x: np.ndarray, weights: np.ndarray) -> None:
    if x.ndim != 2 or weights.ndim != 2:
        raise ValueError(
            f"expected 2-d samples and weights, got {x.shape} and {weights.shape}"
        )
    if x.shape[1] != weights.shape[1]:
        raise ValueError(
            f"sample dimension {x.shape[1]} does not match weight dimension "
            f"{weights.shape[1]}"
        )


def swta_update(x: np.ndarray, y: np.ndarray, weights: np.ndarray,
                cfg: HebbianConfig, gates: np.ndarray | None = None) -> np.ndarray:
    """Soft-competition update given precomputed outputs ``y`` [B, K].

    Equal to composing the softmax gate, own-weight reconstruction, and
    plasticity blocks, evaluated in a factored form that never materializes
    the per-sample [B, K, D] difference.
    """
    _check_dense_shapes(x, weights)
    b = x.shape[0]
    if gates is None:
        gates = gate_swta(y, cfg.temperature)
    g = np.ascontiguousarray(gates.T, dtype=np.float64)
    x64 = x if x.dtype == np.float64 else x.astype(np.float64)
    w64 = weights.astype(np.float64)
    delta = g @ x64 / b - (g.mean(axis=1))[:, None] * w64
    return (cfg.eta * delta).astype(FLOAT)


def hpca_update(x: np.ndarray, y: np.ndarray, weights: np.ndarray,
                cfg: HebbianConfig) -> np.ndarray:
    """Cumulative-reconstruction update given outputs ``y`` [B, K].

    Factored form of gate/reconstruction/plasticity:
    delta = (y^T x - lower_tri(y^T y) w) / B, scaled by eta.
    """
    _check_dense_shapes(x, weights)
    b = x.shape[0]
    y64 = np.ascontiguousarray(y.T, dtype=np.float64)
    x64 = x if x.dtype == np.float64 else x.astype(np.float64)
    w64 = weights.astype(np.float64)
    corr = y64 @ x64 / b
    lateral = np.tril(y64 @ y64.T / b)
    delta = corr - lateral @ w64
    return (cfg.eta * delta).astype(FLOAT)


def swta_step(x: np.ndarray, weights: np.ndarray,
              cfg: HebbianConfig) -> np.ndarray:
    """One batch-mean update of a dense layer under soft competition."""
    if cfg.rule != RULE_SWTA:
        raise ValueError(f"config selects rule {cfg.rule!r}, expected {RULE_SWTA!r}")
    _check_dense_shapes(x, weights)
    y = (x.astype(np.float64) @ weights.astype(np.float64).T).astype(FLOAT)
    return swta_update(x, y, weights, cfg)


def hpca_step(x: np.ndarray, weights: np.ndarray,
              cfg: HebbianConfig) -> np.ndarray:
    """One batch-mean update of a dense layer under cumulative reconstruction."""
    if cfg.rule != RULE_HPCA:
        raise ValueError(f"config selects rule {cfg.rule!r}, expected {RULE_HPCA!r}")
    _check_dense_shapes(x, weights)
    y = (x.astype(np.float64) @ weights.astype(np.float64).T).astype(FLOAT)
    return hpca_update(x, y, weights, cfg)


def init_weights(k: int, d: int, rng: np.random.Generator,
                 std: float = 0.1) -> np.ndarray:
    """Seeded zero-mean Gaussian initialization."""
    return (rng.standard_normal((k, d)) * std).astype(FLOAT)


def train_dense(x: np.ndarray, k: int, cfg: HebbianConfig, epochs: int,
                seed: int, batch_size: int | None = None) -> np.ndarray:
    """Train a dense layer of ``k`` units on samples ``x`` [N, D].

    Full-batch when ``batch_size`` is None, otherwise seeded shuffled
    minibatches each epoch. Returns the trained weights [k, D].
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    rng = np.random.default_rng(seed)
    w = init_weights(k, x.shape[1], rng)
    step = swta_step if cfg.rule == RULE_SWTA else hpca_step
    n = x.shape[0]
    for _ in range(epochs):
        if batch_size is None:
            w = (w.astype(np.float64) + step(x, w, cfg)).astype(FLOAT)
        else:
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                batch = x[order[start : start + batch_size]]
                w = (w.astype(np.float64) + step(batch, w, cfg)).astype(FLOAT)
    return w


def gate_entropy(g: np.ndarray) -> float:
    """Mean entropy (nats) of gate rows normalized by absolute mass.

    Rows with zero mass contribute zero entropy. Used as telemetry only.
    """
    mass = np.abs(np.asarray(g, dtype=FLOAT))
    total = mass.sum(axis=-1, keepdims=True)
    p = mass / np.where(total > 0, total, FLOAT(1.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), FLOAT(0.0))
    return float(-plogp.sum(axis=-1).mean())
