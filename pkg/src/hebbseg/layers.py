"""Patch-wise unsupervised updates for conv and transpose-conv layers.

A conv layer is updated by unfolding its input into patches and running the
dense rule on the patch matrix, so channels compete per spatial offset and
every patch counts as one sample.

Transpose-conv layers need special handling because the reconstruction block
of the dense rule maps the wrong way (it produces upsampled-shaped output
from downsampled activations). Two strategies are implemented:

* the role-swap strategy ("s"): patches of the upsampled output map are the
  targets, while gate and reconstruction come from the downsampled activation
  vector at the matching grid offset;
* the structure-aware strategy ("tsa"): the downsampled map is the target,
  and a redesigned reconstruction maps the upsampled output back to
  downsampled space (per-neuron channel transform, unfold, then weight-matrix
  multiply, which collapses to an ordinary convolution).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .ops import (
    FLOAT,
    ConvGeometry,
    conv_output_hw,
    softmax_t,
    tconv2d_forward,
    tconv_output_hw,
    unfold,
)
from .rules import (
    RULE_SWTA,
    HebbianConfig,
    gate_entropy,
    gate_swta,
    hpca_update,
    swta_update,
)

KIND_CONV = "conv"
KIND_TCONV = "tconv"


@dataclass
class LayerWeights:
    """Weight array plus geometry for a conv or transpose-conv layer.

    Conv weights are [Cout, Cin, kh, kw]; transpose-conv weights are
    [Cin, Cout, kh, kw].
    """

    kind: str
    weights: np.ndarray
    geom: ConvGeometry
    name: str = ""

    def __post_init__(self):
        if self.kind not in (KIND_CONV, KIND_TCONV):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        g = self.geom
        if self.kind == KIND_CONV:
            expected = (g.out_channels, g.in_channels, g.kernel_h, g.kernel_w)
        else:
            expected = (g.in_channels, g.out_channels, g.kernel_h, g.kernel_w)
        if self.weights.shape != expected:
            raise ValueError(
                f"{self.kind} layer {self.name!r}: weight shape "
                f"{self.weights.shape} does not match geometry {expected}"
            )


@dataclass
class HebbianStepReport:
    """Computed update plus convergence telemetry for one batch."""

    delta: np.ndarray
    mean_update_norm: float
    mean_gate_entropy: float


def _make_report(delta: np.ndarray, gates: np.ndarray) -> HebbianStepReport:
    norm = float(np.linalg.norm(delta.astype(np.float64)) / delta.size)
    return HebbianStepReport(
        delta=delta,
        mean_update_norm=norm,
        mean_gate_entropy=gate_entropy(gates.reshape(-1, gates.shape[-1])),
    )


def _dense_update(samples: np.ndarray, y: np.ndarray, w_mat: np.ndarray,
                  cfg: HebbianConfig) -> tuple[np.ndarray, np.ndarray]:
    """Run the configured dense rule; returns (delta, gates)."""
    if cfg.rule == RULE_SWTA:
        gates = gate_swta(y, cfg.temperature)
        delta = swta_update(samples, y, w_mat, cfg, gates=gates)
    else:
        gates = y
        delta = hpca_update(samples, y, w_mat, cfg)
    return delta, gates


def conv_hebbian_step(x: np.ndarray, layer: LayerWeights, cfg: HebbianConfig,
                      pre: np.ndarray | None = None) -> HebbianStepReport:
    """Batch update for a conv layer from its input map [N, Cin, H, W].

    Every patch at every offset is one sample of the dense rule; the update
    is the mean over all patches and batch elements. ``pre`` may carry the
    already-computed linear response map [N, Cout, H', W'] (the conv output
    before any activation) to avoid recomputing it.
    """
    if layer.kind != KIND_CONV:
        raise ValueError(f"layer {layer.name!r} is {layer.kind}, expected conv")
    geom = layer.geom
    if x.shape[1] != geom.in_channels:
        raise ValueError(
            f"layer {layer.name!r}: input has {x.shape[1]} channels, "
            f"geometry expects {geom.in_channels}"
        )
    cols = unfold(x, geom, np.float64)
    samples = cols.reshape(-1, cols.shape[-1])
    w_mat = layer.weights.reshape(geom.out_channels, -1)
    if pre is None:
        y = (samples @ w_mat.astype(np.float64).T).astype(FLOAT)
    else:
        k = geom.out_channels
        y = np.ascontiguousarray(
            pre.reshape(pre.shape[0], k, -1).transpose(0, 2, 1), dtype=FLOAT
        ).reshape(-1, k)
    delta, gates = _dense_update(samples, y, w_mat, cfg)
    return _make_report(delta.reshape(layer.weights.shape), gates)


def _upsampled_view_geom(geom: ConvGeometry) -> ConvGeometry:
    """Conv-sense geometry over the upsampled map of a transpose-conv layer."""
    return ConvGeometry(
        geom.out_channels, geom.in_channels, geom.kernel_h, geom.kernel_w,
        geom.stride, geom.padding,
    )


def tconv_hebbian_step_s(x: np.ndarray, y_up: np.ndarray, layer: LayerWeights,
                         cfg: HebbianConfig) -> HebbianStepReport:
    """Role-swap update for a transpose-conv layer.

    ``x`` is the downsampled input map [N, Cin, h, w] and ``y_up`` the
    upsampled output map [N, Cout, H, W]. Each grid offset pairs one
    upsampled patch (the target) with the downsampled activation vector that
    generated it (the neuron outputs feeding gate and reconstruction).
    """
    if layer.kind != KIND_TCONV:
        raise ValueError(f"layer {layer.name!r} is {layer.kind}, expected tconv")
    geom = layer.geom
    n, ci, h, w = x.shape
    if ci != geom.in_channels:
        raise ValueError(
            f"layer {layer.name!r}: input has {ci} channels, geometry "
            f"expects {geom.in_channels}"
        )
    oh, ow = tconv_output_hw(geom, h, w)
    if y_up.shape != (n, geom.out_channels, oh, ow):
        raise ValueError(
            f"layer {layer.name!r}: upsampled map shape {y_up.shape} does not "
            f"match expected {(n, geom.out_channels, oh, ow)}"
        )
    targets = unfold(y_up, _upsampled_view_geom(geom), np.float64)
    samples = targets.reshape(-1, targets.shape[-1])
    acts = np.ascontiguousarray(
        x.reshape(n, ci, h * w).transpose(0, 2, 1), dtype=FLOAT
    ).reshape(-1, ci)
    w_mat = layer.weights.reshape(ci, -1)
    delta, gates = _dense_update(samples, acts, w_mat, cfg)
    return _make_report(delta.reshape(layer.weights.shape), gates)


def tsa_reconstruction(y_up: np.ndarray, weights: np.ndarray,
                       geom: ConvGeometry, rule: str) -> np.ndarray:
    """Redesigned reconstruction for transpose-conv layers (fast path).

    For each output neuron j the upsampled map [N, Cout, H, W] is channel
    transformed (one-hot ones map for the competitive rule, channels up to j
    for the cumulative rule), unfolded, and multiplied by the weight matrix.
    Returns [N, Cout, Cin, h, w]: one downsampled-shaped reconstruction per
    neuron, computed without the per-neuron loop.
    """
    n, cout, uh, uw = y_up.shape
    cin = weights.shape[0]
    view = _upsampled_view_geom(geom)
    oh, ow = conv_output_hw(view, uh, uw)
    khw = geom.kernel_h * geom.kernel_w
    w64 = weights.reshape(cin, cout, khw).astype(np.float64)
    if rule == RULE_SWTA:
        ones = np.ones((1, 1, uh, uw), dtype=FLOAT)
        mask_geom = ConvGeometry(1, 1, geom.kernel_h, geom.kernel_w,
                                 geom.stride, geom.padding)
        mask = unfold(ones, mask_geom)[0].astype(np.float64)
        base = np.einsum("pv,cjv->jcp", mask, w64)
        rec = np.broadcast_to(base[None], (n, cout, cin, oh * ow))
    else:
        cols = unfold(y_up, view, np.float64).reshape(n, oh * ow, cout, khw)
        per_channel = np.einsum("npkv,ckv->npkc", cols, w64)
        rec = np.cumsum(per_channel, axis=2).transpose(0, 2, 3, 1)
    return rec.reshape(n, cout, cin, oh, ow).astype(FLOAT)


def tsa_reconstruction_literal(y_up: np.ndarray, weights: np.ndarray,
                               geom: ConvGeometry, rule: str) -> np.ndarray:
    """Reference path: explicit per-neuron transform, unfold, and matmul."""
    n, cout, uh, uw = y_up.shape
    cin = weights.shape[0]
    view = _upsampled_view_geom(geom)
    oh, ow = conv_output_hw(view, uh, uw)
    w_mat = weights.reshape(cin, -1).astype(np.float64)
    out = np.empty((n, cout, cin, oh, ow), dtype=FLOAT)
    for j in range(cout):
        transformed = np.zeros_like(y_up)
        if rule == RULE_SWTA:
            transformed[:, j] = 1.0
        else:
            transformed[:, : j + 1] = y_up[:, : j + 1]
        cols = unfold(transformed, view).astype(np.float64)
        rec = cols @ w_mat.T
        out[:, j] = rec.transpose(0, 2, 1).reshape(n, cin, oh, ow).astype(FLOAT)
    return out


def tsa_gates(y_up: np.ndarray, geom: ConvGeometry,
              cfg: HebbianConfig) -> np.ndarray:
    """Per-neuron gates pooled back to downsampled grid offsets.

    The gate function is applied across channels at every upsampled pixel,
    then averaged over the kernel window each downsampled location generated.
    Returns [N, P, Cout].
    """
    n, cout = y_up.shape[0], y_up.shape[1]
    if cfg.rule == RULE_SWTA:
        gmap = softmax_t(y_up, cfg.temperature, axis=1)
    else:
        gmap = y_up
    view = _upsampled_view_geom(geom)
    cols = unfold(gmap, view)
    p = cols.shape[1]
    khw = geom.kernel_h * geom.kernel_w
    pooled = cols.reshape(n, p, cout, khw).astype(np.float64).mean(axis=3)
    return pooled.astype(FLOAT)


def tconv_hebbian_step_tsa(x: np.ndarray, layer: LayerWeights,
                           cfg: HebbianConfig) -> HebbianStepReport:
    """Structure-aware update for a transpose-conv layer.

    The downsampled input map is the target signal; reconstructions and
    gates come from the upsampled map the layer produces. The per-location
    update delta[c, j] = mean(g_j * (s_c - s*_{c,j})) is shared across kernel
    positions of neuron j (gates are window averaged, so kernel positions are
    not distinguished).
    """
    if layer.kind != KIND_TCONV:
        raise ValueError(f"layer {layer.name!r} is {layer.kind}, expected tconv")
    geom = layer.geom
    n, ci, h, w = x.shape
    if ci != geom.in_channels:
        raise ValueError(
            f"layer {layer.name!r}: input has {ci} channels, geometry "
            f"expects {geom.in_channels}"
        )
    y_up = tconv2d_forward(x, layer.weights, geom)
    s_star = tsa_reconstruction(y_up, layer.weights, geom, cfg.rule)
    gates = tsa_gates(y_up, geom, cfg)
    p = h * w
    s = x.reshape(n, ci, p).transpose(0, 2, 1).astype(np.float64)
    g64 = gates.astype(np.float64)
    rec = s_star.reshape(n, geom.out_channels, ci, p).astype(np.float64)
    total = n * p
    term_target = np.einsum("npj,npc->cj", g64, s) / total
    term_rec = np.einsum("npj,njcp->cj", g64, rec) / total
    delta_cj = cfg.eta * (term_target - term_rec)
    delta = np.broadcast_to(
        delta_cj[:, :, None, None].astype(FLOAT), layer.weights.shape
    ).copy()
    return _make_report(delta, gates)


def apply_update(layer: LayerWeights, report: HebbianStepReport) -> LayerWeights:
    """Add the computed delta to the layer weights."""
    if report.delta.shape != layer.weights.shape:
        raise ValueError(
            f"layer {layer.name!r}: delta shape {report.delta.shape} does not "
            f"match weights {layer.weights.shape}"
        )
    new_w = (
        layer.weights.astype(np.float64) + report.delta.astype(np.float64)
    ).astype(FLOAT)
    if not np.all(np.isfinite(new_w)):
        raise ValueError(f"non-finite weights after update in layer {layer.name!r}")
    return replace(layer, weights=new_w)
