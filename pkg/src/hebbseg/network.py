"""Encoder-decoder segmentation network built from locally-trainable layers.

The downsampling path is conv (3x3, pad 1) + ReLU + 2x2 max-pool per stage;
the upsampling path mirrors it with transpose conv (2x2, stride 2) + ReLU,
concatenation of the same-resolution encoder features, and a conv block. A
1x1 conv head produces per-pixel class logits. There is no normalization and
there are no biases; every layer except the head can be updated with the
unsupervised rules.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .layers import (
    KIND_CONV,
    KIND_TCONV,
    LayerWeights,
    apply_update,
    conv_hebbian_step,
    tconv_hebbian_step_s,
    tconv_hebbian_step_tsa,
)
from .ops import (
    FLOAT,
    ConvGeometry,
    conv2d_forward,
    maxpool2x2,
    relu,
    tconv2d_forward,
)
from .rules import VARIANT_S, HebbianConfig

CHECKPOINT_MAGIC = b"HEBB"
CHECKPOINT_VERSION = 1

TELEMETRY_HEADER = "epoch,layer,mean_update_norm,mean_gate_entropy"


class CheckpointError(ValueError):
    """Checkpoint file problem; ``code`` distinguishes the failure kind."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description: stage widths and the classifier size."""

    in_channels: int = 1
    widths: tuple = (16, 32, 64)
    num_classes: int = 2
    conv_kernel: int = 3
    conv_padding: int = 1
    tconv_kernel: int = 2
    tconv_stride: int = 2

    def __post_init__(self):
        if self.in_channels < 1 or self.num_classes < 2 or not self.widths:
            raise ValueError(f"invalid network spec {self}")
        if any(w < 1 for w in self.widths):
            raise ValueError("stage widths must be >= 1")

    @property
    def stages(self) -> int:
        return len(self.widths)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "widths": list(self.widths),
            "num_classes": self.num_classes,
            "conv_kernel": self.conv_kernel,
            "conv_padding": self.conv_padding,
            "tconv_kernel": self.tconv_kernel,
            "tconv_stride": self.tconv_stride,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkSpec":
        return NetworkSpec(
            in_channels=d["in_channels"],
            widths=tuple(d["widths"]),
            num_classes=d["num_classes"],
            conv_kernel=d.get("conv_kernel", 3),
            conv_padding=d.get("conv_padding", 1),
            tconv_kernel=d.get("tconv_kernel", 2),
            tconv_stride=d.get("tconv_stride", 2),
        )


def _layer_plan(spec: NetworkSpec):
    """Ordered (name, kind, geometry) triples for the architecture."""
    plan = []
    widths = spec.widths
    s = spec.stages
    cin = spec.in_channels
    for i in range(1, s + 1):
        plan.append((
            f"enc{i}.conv", KIND_CONV,
            ConvGeometry(cin, widths[i - 1], spec.conv_kernel, spec.conv_kernel,
                         1, spec.conv_padding),
        ))
        cin = widths[i - 1]
    cur = widths[-1]
    for i in range(s, 0, -1):
        t_out = widths[max(i - 2, 0)]
        plan.append((
            f"dec{i}.tconv", KIND_TCONV,
            ConvGeometry(cur, t_out, spec.tconv_kernel, spec.tconv_kernel,
                         spec.tconv_stride, 0),
        ))
        plan.append((
            f"dec{i}.conv", KIND_CONV,
            ConvGeometry(t_out + widths[i - 1], t_out, spec.conv_kernel,
                         spec.conv_kernel, 1, spec.conv_padding),
        ))
        cur = t_out
    plan.append((
        "head", KIND_CONV, ConvGeometry(cur, spec.num_classes, 1, 1, 1, 0)
    ))
    return plan


@dataclass
class HebbianUNet:
    spec: NetworkSpec
    layers: dict = field(default_factory=dict)
    # the head is the one non-locally-trained layer, so it alone carries a
    # bias; without any affine term the bias-free stack is positively
    # homogeneous and cannot threshold flat-intensity regions
    head_bias: np.ndarray | None = None

    def __post_init__(self):
        if self.head_bias is None:
            self.head_bias = np.zeros(self.spec.num_classes, FLOAT)

    def layer(self, name: str) -> LayerWeights:
        return self.layers[name]

    def copy(self) -> "HebbianUNet":
        copied = {
            name: LayerWeights(lw.kind, lw.weights.copy(), lw.geom, lw.name)
            for name, lw in self.layers.items()
        }
        return HebbianUNet(self.spec, copied, self.head_bias.copy())

    def hebbian_layer_names(self) -> list:
        return [n for n in self.layers if n != "head"]


def build_network(spec: NetworkSpec, seed: int, init_std: float = 0.1) -> HebbianUNet:
    """Seeded Gaussian initialization of every layer, in plan order."""
    rng = np.random.default_rng(seed)
    layers = {}
    for name, kind, geom in _layer_plan(spec):
        if kind == KIND_CONV:
            shape = (geom.out_channels, geom.in_channels, geom.kernel_h, geom.kernel_w)
        else:
            shape = (geom.in_channels, geom.out_channels, geom.kernel_h, geom.kernel_w)
        w = (rng.standard_normal(shape) * init_std).astype(FLOAT)
        layers[name] = LayerWeights(kind, w, geom, name)
    return HebbianUNet(spec, layers)


def forward(net: HebbianUNet, x: np.ndarray) -> tuple[np.ndarray, dict]:
    """Full forward pass; the cache holds every intermediate needed for
    unsupervised steps and for the hand-written backward pass."""
    spec = net.spec
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ValueError(
            f"input has {c} channels, network expects {spec.in_channels}"
        )
    div = 2 ** spec.stages
    if h % div or w % div:
        raise ValueError(
            f"input {h}x{w} not divisible by 2^{spec.stages} = {div}"
        )
    cache: dict = {"input": x, "enc": [], "dec": []}
    cur = x
    for i in range(1, spec.stages + 1):
        layer = net.layer(f"enc{i}.conv")
        pre = conv2d_forward(cur, layer.weights, layer.geom)
        act = relu(pre)
        pooled, idx = maxpool2x2(act)
        cache["enc"].append(
            {"in": cur, "pre": pre, "act": act, "pool_idx": idx}
        )
        cur = pooled
    for i in range(spec.stages, 0, -1):
        tlayer = net.layer(f"dec{i}.tconv")
        clayer = net.layer(f"dec{i}.conv")
        tpre = tconv2d_forward(cur, tlayer.weights, tlayer.geom)
        tact = relu(tpre)
        skip = cache["enc"][i - 1]["act"]
        cat = np.concatenate([tact, skip], axis=1)
        cpre = conv2d_forward(cat, clayer.weights, clayer.geom)
        cact = relu(cpre)
        cache["dec"].append(
            {
                "stage": i, "tconv_in": cur, "tpre": tpre, "tact": tact,
                "cat": cat, "cpre": cpre, "cact": cact,
            }
        )
        cur = cact
    head = net.layer("head")
    cache["head_in"] = cur
    logits = conv2d_forward(cur, head.weights, head.geom)
    logits = logits + net.head_bias[None, :, None, None]
    cache["logits"] = logits
    return logits, cache


def features(net: HebbianUNet, x: np.ndarray) -> np.ndarray:
    """Last pre-head feature map (the linear-probe input)."""
    _, cache = forward(net, x)
    return cache["head_in"]


def hebbian_batch_step(net: HebbianUNet, x: np.ndarray, cfg: HebbianConfig,
                       cache: dict | None = None) -> dict:
    """Compute and apply one unsupervised update for every non-head layer.

    All step computations read the activations produced by the current
    weights; updates apply after every layer's step is computed. Returns the
    per-layer step reports.
    """
    if cache is None:
        _, cache = forward(net, x)
    reports = {}
    for i, entry in enumerate(cache["enc"], start=1):
        name = f"enc{i}.conv"
        reports[name] = conv_hebbian_step(
            entry["in"], net.layer(name), cfg, pre=entry["pre"]
        )
    for entry in cache["dec"]:
        i = entry["stage"]
        tname = f"dec{i}.tconv"
        tlayer = net.layer(tname)
        if cfg.tconv_variant == VARIANT_S:
            reports[tname] = tconv_hebbian_step_s(
                entry["tconv_in"], entry["tpre"], tlayer, cfg
            )
        else:
            reports[tname] = tconv_hebbian_step_tsa(entry["tconv_in"], tlayer, cfg)
        cname = f"dec{i}.conv"
        reports[cname] = conv_hebbian_step(
            entry["cat"], net.layer(cname), cfg, pre=entry["cpre"]
        )
    for name, report in reports.items():
        net.layers[name] = apply_update(net.layer(name), report)
    return reports


def pretrain(net: HebbianUNet, images: np.ndarray, cfg: HebbianConfig,
             epochs: int, seed: int, batch_size: int = 16,
             eta_decay_every: int | None = None,
             eta_decay_factor: float = 0.1) -> list:
    """Unsupervised stage: every conv and transpose-conv layer takes one
    local update per batch; the classifier head stays at initialization.

    ``eta_decay_every`` enables an optional multi-step schedule for the
    unsupervised learning rate (eta multiplied by ``eta_decay_factor`` every
    that many epochs). Returns telemetry rows (epoch, layer,
    mean_update_norm, mean_gate_entropy), one per layer per epoch.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if len(images) == 0:
        raise ValueError("pre-training requires a non-empty image set")
    if eta_decay_every is not None and eta_decay_every < 1:
        raise ValueError("eta_decay_every must be >= 1 when set")
    rng = np.random.default_rng(seed)
    telemetry = []
    names = net.hebbian_layer_names()
    for epoch in range(epochs):
        if eta_decay_every is None:
            epoch_cfg = cfg
        else:
            scale = eta_decay_factor ** (epoch // eta_decay_every)
            epoch_cfg = replace(cfg, eta=cfg.eta * scale)
        order = rng.permutation(len(images))
        sums = {n: np.zeros(2) for n in names}
        batches = 0
        for start in range(0, len(images), batch_size):
            batch = images[order[start : start + batch_size]]
            try:
                reports = hebbian_batch_step(net, batch, epoch_cfg)
            except ValueError as exc:
                raise ValueError(f"epoch {epoch}: {exc}") from exc
            for n, rep in reports.items():
                sums[n] += (rep.mean_update_norm, rep.mean_gate_entropy)
            batches += 1
        for n in names:
            telemetry.append(
                (epoch, n, sums[n][0] / batches, sums[n][1] / batches)
            )
    return telemetry


def write_telemetry_csv(path, telemetry: list) -> None:
    lines = [TELEMETRY_HEADER]
    for epoch, layer_name, norm, entropy in telemetry:
        lines.append(f"{epoch},{layer_name},{norm:.10g},{entropy:.10g}")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Checkpoint format: magic, version, layer records (name, shape, raw little-
# endian float32 data), trailing CRC32 over everything before it.
# ---------------------------------------------------------------------------

def _records(net: HebbianUNet) -> list:
    recs = [(name, lw.weights) for name, lw in net.layers.items()]
    recs.append(("head.bias", net.head_bias))
    return recs


def _serialize(net: HebbianUNet) -> bytes:
    recs = _records(net)
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += struct.pack("<I", len(recs))
    for name, array in recs:
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<B", array.ndim)
        for dim in array.shape:
            out += struct.pack("<I", dim)
        out += np.ascontiguousarray(array, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def save_checkpoint(net: HebbianUNet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_serialize(net))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated", "checkpoint file is truncated")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk


def load_checkpoint(path, spec: NetworkSpec) -> HebbianUNet:
    """Load weights for the architecture described by ``spec``.

    Raises :class:`CheckpointError` with codes "magic", "version",
    "truncated", "crc", or "shape".
    """
    blob = open(path, "rb").read()
    if len(blob) < 12:
        raise CheckpointError("truncated", "checkpoint file is truncated")
    body, crc_bytes = blob[:-4], blob[-4:]
    if zlib.crc32(body) & 0xFFFFFFFF != struct.unpack("<I", crc_bytes)[0]:
        raise CheckpointError("crc", "checkpoint CRC mismatch")
    r = _Reader(body)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("magic", "not a checkpoint file (bad magic)")
    version = struct.unpack("<I", r.take(4))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            "version", f"unsupported checkpoint version {version}"
        )
    n_records = struct.unpack("<I", r.take(4))[0]
    net = build_network(spec, seed=0)
    expected = [(name, lw.weights.shape) for name, lw in net.layers.items()]
    expected.append(("head.bias", net.head_bias.shape))
    if n_records != len(expected):
        raise CheckpointError(
            "shape",
            f"checkpoint has {n_records} records, architecture has "
            f"{len(expected)}",
        )
    for name, want_shape in expected:
        name_len = struct.unpack("<H", r.take(2))[0]
        stored = r.take(name_len).decode("utf-8")
        ndim = struct.unpack("<B", r.take(1))[0]
        shape = tuple(
            struct.unpack("<I", r.take(4))[0] for _ in range(ndim)
        )
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        if stored != name or shape != want_shape:
            raise CheckpointError(
                "shape",
                f"layer {stored!r} with shape {shape} does not match "
                f"architecture layer {name!r} {want_shape}",
            )
        arr = np.ascontiguousarray(data, dtype=FLOAT)
        if name == "head.bias":
            net.head_bias = arr
        else:
            target = net.layers[name]
            net.layers[name] = LayerWeights(target.kind, arr, target.geom, name)
    return net


def crc_bitwise_equal(net_a: HebbianUNet, net_b: HebbianUNet) -> bool:
    return _serialize(net_a) == _serialize(net_b)
