"""Command-line interface for the two-stage segmentation pipeline.

Subcommands: synth, pretrain, finetune, probe, eval, verify-oracles,
inspect. Every command is deterministic under --seed; outputs land next to
the requested paths together with a run.json recording the resolved
configuration. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import (
    BlobSpec,
    CovarianceSpec,
    DataError,
    GaussianClustersSpec,
    RegimeSpec,
    gen_synthetic,
    load_images,
    load_mask_file,
    split_regime,
    train_val_split,
)
from .metrics import evaluate_pair, write_metrics_csv
from .network import (
    NetworkSpec,
    build_network,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    write_telemetry_csv,
)
from .rules import RULE_HPCA, HebbianConfig
from .supervised import SGDConfig, finetune, linear_probe, write_history_csv
from .verify import run_all_claims

DEFAULT_WIDTHS = "16,32,64"


def _parse_widths(text: str) -> tuple:
    try:
        widths = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad widths {text!r}")
    if not widths or any(w < 1 for w in widths):
        raise argparse.ArgumentTypeError(f"bad widths {text!r}")
    return widths


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _write_run_json(out_dir: Path, command: str, args: argparse.Namespace) -> None:
    config = {
        k: (list(v) if isinstance(v, tuple) else v)
        for k, v in sorted(vars(args).items())
        if k not in ("func", "config")
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(
        json.dumps({"command": command, "config": config}, indent=2,
                   sort_keys=True) + "\n"
    )


def _network_spec(args, in_channels: int) -> NetworkSpec:
    return NetworkSpec(
        in_channels=in_channels, widths=tuple(args.widths),
        num_classes=args.classes,
    )


def _labeled_items(dataset, size_check: str):
    items = [(it.image, it.mask) for it in dataset.labeled]
    if not items:
        raise DataError(f"no labeled image/mask pairs found in {size_check}")
    return items


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def _spec_from_json(payload: dict, seed_override):
    kind = payload.get("kind")
    params = {k: v for k, v in payload.items() if k != "kind"}
    if "blob_range" in params:
        params["blob_range"] = tuple(params["blob_range"])
    if "spectrum" in params:
        params["spectrum"] = tuple(params["spectrum"])
    if seed_override is not None:
        params["seed"] = seed_override
    if kind == "blobs":
        return BlobSpec(**params)
    if kind == "clusters":
        return GaussianClustersSpec(**params)
    if kind == "covariance":
        return CovarianceSpec(**params)
    raise DataError(f"unknown synthetic kind {kind!r}")


def cmd_synth(args) -> int:
    payload = json.loads(Path(args.spec).read_text())
    spec = _spec_from_json(payload, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = gen_synthetic(spec)
    entries = []
    if isinstance(spec, BlobSpec):
        for i in range(spec.count):
            img_name = f"img_{i:04d}.png"
            mask_name = f"img_{i:04d}_mask.png"
            data_mod.save_image(out / img_name, result.images[i, 0])
            data_mod.save_mask(out / mask_name, result.masks[i])
            entries.append({"id": f"img_{i:04d}", "image": img_name,
                            "mask": mask_name, "split": "train"})
    else:
        np.savez(out / "samples.npz", samples=result.samples)
        if isinstance(spec, GaussianClustersSpec):
            truth = {"centroids": result.centroids.tolist(),
                     "labels": result.labels.tolist()}
        else:
            truth = {"eigenvalues": result.eigenvalues.tolist(),
                     "eigenvectors": result.eigenvectors.tolist()}
        (out / "ground_truth.json").write_text(
            json.dumps(truth, indent=2, sort_keys=True) + "\n"
        )
        entries.append({"id": "samples", "file": "samples.npz"})
    data_mod.write_manifest(out / "manifest.json", entries)
    _write_run_json(out, "synth", args)
    print(f"wrote {len(entries)} entries to {out}")
    return 0


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    dataset = load_images(args.data, args.size)
    images = dataset.images()
    spec = _network_spec(args, images.shape[1])
    net = build_network(spec, seed=args.seed)
    if args.rule == RULE_HPCA and args.temp is not None:
        print("warning: --temp is ignored for the hpca rule", file=sys.stderr)
    cfg = HebbianConfig(
        rule=args.rule,
        tconv_variant=args.variant,
        eta=args.eta,
        temperature=args.temp if args.temp is not None else 1.0,
    )
    telemetry = pretrain(
        net, images, cfg, epochs=args.epochs, seed=args.seed,
        batch_size=args.batch_size,
        eta_decay_every=args.eta_decay_every,
        eta_decay_factor=args.eta_decay,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, out)
    write_telemetry_csv(out.with_name("telemetry.csv"), telemetry)
    _write_run_json(out.parent, "pretrain", args)
    print(f"checkpoint written to {out}")
    return 0


# ---------------------------------------------------------------------------
# finetune / probe
# ---------------------------------------------------------------------------

def _prepare_supervised(args):
    dataset = load_images(args.data, args.size)
    items = _labeled_items(dataset, args.data)
    train_pool, val_items = train_val_split(items, args.val_frac, args.seed)
    regime = RegimeSpec(r=args.regime, seed=args.seed)
    labeled, _ = split_regime(train_pool, regime)
    return labeled, val_items


def _load_or_init(args, in_channels: int):
    spec = _network_spec(args, in_channels)
    if args.init == "random":
        return build_network(spec, seed=args.seed)
    return load_checkpoint(args.init, spec)


def cmd_finetune(args) -> int:
    labeled, val_items = _prepare_supervised(args)
    net = _load_or_init(args, labeled[0][0].shape[0])
    cfg = SGDConfig(
        lr0=args.lr0, decay_every=args.decay_every, decay_factor=args.decay,
        epochs=args.epochs, momentum=args.momentum, batch_size=args.batch_size,
    )
    best, history = finetune(
        net, labeled, val_items, cfg, augment_on=args.augment, seed=args.seed
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(best, out)
    write_history_csv(out.with_name("history.csv"), history)
    _write_run_json(out.parent, "finetune", args)
    best_dc = max(h[3] for h in history)
    print(f"best validation dice {best_dc:.4f}; checkpoint written to {out}")
    return 0


def cmd_probe(args) -> int:
    labeled, val_items = _prepare_supervised(args)
    net = _load_or_init(args, labeled[0][0].shape[0])
    cfg = SGDConfig(
        lr0=args.lr0, decay_every=args.decay_every, decay_factor=args.decay,
        epochs=args.epochs, momentum=args.momentum, batch_size=args.batch_size,
    )
    head, val_dc, history = linear_probe(net, labeled, val_items, cfg,
                                         seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "probe_head.npz", weights=head.weights)
    write_history_csv(out / "probe_history.csv", history)
    _write_run_json(out, "probe", args)
    print(f"probe validation dice {val_dc:.4f}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    pred_dir, target_dir = Path(args.pred), Path(args.target)
    names = sorted(p.name for p in pred_dir.glob("*.png"))
    names += sorted(p.name for p in pred_dir.glob("*.pgm"))
    if not names:
        raise DataError(f"no mask images found in {pred_dir}")
    rows = []
    for name in names:
        target_path = target_dir / name
        if not target_path.exists():
            raise DataError(f"no matching target mask for {name}")
        pred = load_mask_file(pred_dir / name)
        target = load_mask_file(target_path)
        rows.append((Path(name).stem, evaluate_pair(pred, target)))
    write_metrics_csv(args.out, rows)
    mean_dc = float(np.mean([r.dc for _, r in rows]))
    print(f"evaluated {len(rows)} pairs; mean dice {mean_dc:.4f}; wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# verify-oracles / inspect
# ---------------------------------------------------------------------------

def cmd_verify_oracles(args) -> int:
    results = run_all_claims(seeds=args.seeds)
    all_ok = True
    for res in results:
        state = "PASS" if res.passed else "FAIL"
        values = ", ".join(f"{v:.4f}" for v in res.per_seed)
        print(f"[{state}] {res.name}: {res.passed_seeds}/{len(res.per_seed)} "
              f"seeds ok (need {res.required_seeds}); per-seed [{values}]")
        all_ok &= res.passed
    return 0 if all_ok else 1


def _write_pgm(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    lo, hi = float(arr.min()), float(arr.max())
    scaled = np.zeros_like(arr) if hi == lo else (arr - lo) / (hi - lo)
    img = np.rint(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def cmd_inspect(args) -> int:
    spec = NetworkSpec(in_channels=args.in_channels, widths=args.widths,
                       num_classes=args.classes)
    net = load_checkpoint(args.ckpt, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stats = {}
    for name, lw in net.layers.items():
        w = lw.weights.astype(np.float64)
        stats[name] = {
            "shape": list(lw.weights.shape),
            "min": float(w.min()),
            "max": float(w.max()),
            "mean": float(w.mean()),
            "std": float(w.std()),
            "frobenius": float(np.linalg.norm(w)),
        }
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    first = net.layer("enc1.conv").weights
    co, ci, kh, kw = first.shape
    pad = 1
    tile = np.zeros((co * (kh + pad) + pad, ci * (kw + pad) + pad), np.float64)
    for o in range(co):
        for c in range(ci):
            tile[
                pad + o * (kh + pad) : pad + o * (kh + pad) + kh,
                pad + c * (kw + pad) : pad + c * (kw + pad) + kw,
            ] = first[o, c]
    _write_pgm(out / "first_layer_kernels.pgm", tile)
    for name, s in stats.items():
        print(f"{name}: shape={s['shape']} mean={s['mean']:.4f} "
              f"std={s['std']:.4f} |W|={s['frobenius']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser assembly
# ---------------------------------------------------------------------------

def _add_arch_flags(p):
    p.add_argument("--widths", type=_parse_widths, default=_parse_widths(DEFAULT_WIDTHS),
                   help="comma-separated stage widths")
    p.add_argument("--classes", type=_positive_int, default=2)
    p.add_argument("--size", type=_positive_int, default=128,
                   help="square resize applied to loaded images")


def _add_sgd_flags(p):
    p.add_argument("--lr0", type=float, default=0.5)
    p.add_argument("--decay-every", type=_positive_int, default=50)
    p.add_argument("--decay", type=float, default=0.1)
    p.add_argument("--epochs", type=_positive_int, default=200)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=_positive_int, default=8)
    p.add_argument("--val-frac", type=float, default=0.2)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hebbseg",
        description="Two-stage semi-supervised segmentation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="JSON task description")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the seed in the spec file")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="unsupervised stage-1 training")
    p.add_argument("--data", required=True)
    p.add_argument("--rule", choices=("swta", "hpca"), default="swta")
    p.add_argument("--variant", choices=("s", "tsa"), default="tsa")
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--temp", type=float, default=None,
                   help="softmax temperature (swta only)")
    p.add_argument("--epochs", type=_positive_int, default=10)
    p.add_argument("--batch-size", type=_positive_int, default=16)
    p.add_argument("--eta-decay-every", type=_positive_int, default=None)
    p.add_argument("--eta-decay", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", default=None)
    _add_arch_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised stage-2 training")
    p.add_argument("--data", required=True)
    p.add_argument("--regime", type=float, default=100.0,
                   help="labeled percentage in (0, 100]")
    p.add_argument("--init", default="random",
                   help="checkpoint path or 'random'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction,
                   default=True)
    p.add_argument("--out", required=True, help="best checkpoint path")
    p.add_argument("--config", default=None)
    _add_sgd_flags(p)
    _add_arch_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("probe", help="linear probe over frozen features")
    p.add_argument("--data", required=True)
    p.add_argument("--regime", type=float, default=100.0)
    p.add_argument("--init", required=True, help="backbone checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None)
    _add_sgd_flags(p)
    _add_arch_flags(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", help="segmentation metrics for mask pairs")
    p.add_argument("--pred", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-oracles",
                       help="check the rule convergence claims")
    p.add_argument("--seeds", type=_positive_int, default=5)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_verify_oracles)

    p = sub.add_parser("inspect", help="dump weight statistics and kernels")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--in-channels", type=_positive_int, default=1)
    p.add_argument("--config", default=None)
    _add_arch_flags(p)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        defaults = json.loads(Path(args.config).read_text())
        token = args.command
        fresh = build_parser()
        for action in fresh._subparsers._group_actions:
            sub_parser = action.choices[token]
            sub_parser.set_defaults(**defaults)
        args = fresh.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
