#!/usr/bin/env python3
"""Paired two-stage experiment on the synthetic blob task.

Trains the same architecture twice per seed, once from unsupervised
pre-training on the unlabeled pool and once from random initialization,
fine-tunes both with an identical SGD protocol on the labeled regime, and
prints best-validation-dice tables with 90% confidence intervals.
"""
import argparse
import time

import numpy as np

from hebbseg.data import BlobSpec, RegimeSpec, gen_synthetic, split_regime
from hebbseg.metrics import mean_ci90
from hebbseg.network import NetworkSpec, build_network, pretrain
from hebbseg.rules import HebbianConfig
from hebbseg.supervised import SGDConfig, finetune


def parse_args():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--train-images", type=int, default=200)
    p.add_argument("--val-images", type=int, default=12)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--regime", type=float, default=5.0)
    p.add_argument("--noise", type=float, default=0.55)
    p.add_argument("--contrast", type=float, default=0.5)
    p.add_argument("--background", type=float, default=0.0)
    p.add_argument("--widths", default="12,24")
    p.add_argument("--rule", default="swta", choices=("swta", "hpca"))
    p.add_argument("--variant", default="tsa", choices=("s", "tsa"))
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--temp", type=float, default=0.3)
    p.add_argument("--pre-epochs", type=int, default=5)
    p.add_argument("--pre-batch", type=int, default=32)
    p.add_argument("--lr0", type=float, default=0.3)
    p.add_argument("--ft-epochs", type=int, default=30)
    p.add_argument("--seeds", type=int, default=5)
    return p.parse_args()


def main():
    args = parse_args()
    widths = tuple(int(v) for v in args.widths.split(","))
    net_spec = NetworkSpec(in_channels=1, widths=widths, num_classes=2)
    task = dict(size=args.size, contrast=args.contrast,
                noise_sigma=args.noise, background=args.background,
                clip=args.background > 0, blob_range=(2, 4))
    train = gen_synthetic(BlobSpec(count=args.train_images, seed=101, **task))
    val = gen_synthetic(BlobSpec(count=args.val_images, seed=202, **task))
    val_items = list(zip(val.images, val.masks))
    pool = [(train.images[i], train.masks[i]) for i in range(len(train.images))]
    labeled, unlabeled_items = split_regime(
        pool, RegimeSpec(r=args.regime, seed=0)
    )
    unlabeled = np.stack([img for img, _ in unlabeled_items])
    sgd = SGDConfig(lr0=args.lr0, decay_every=25, decay_factor=0.2,
                    epochs=args.ft_epochs, momentum=0.9, batch_size=5)
    print(f"labeled {len(labeled)} / unlabeled {len(unlabeled)} images; "
          f"net widths {widths}")

    results = {"pretrained": [], "scratch": []}
    start = time.time()
    for seed in range(args.seeds):
        for arm in ("scratch", "pretrained"):
            net = build_network(net_spec, seed=seed)
            if arm == "pretrained":
                cfg = HebbianConfig(rule=args.rule, tconv_variant=args.variant,
                                    eta=args.eta, temperature=args.temp)
                pretrain(net, unlabeled, cfg, epochs=args.pre_epochs,
                         seed=seed, batch_size=args.pre_batch)
            _, history = finetune(net, labeled, val_items, sgd,
                                  augment_on=True, seed=seed + 1000)
            best = max(h[3] for h in history)
            results[arm].append(best)
            print(f"seed {seed} {arm:10s}: best val dice {best:.3f} "
                  f"({time.time() - start:.0f}s elapsed)")

    print("\narm           mean   ci90   per-seed")
    for arm in ("pretrained", "scratch"):
        mean, ci = mean_ci90(results[arm])
        per_seed = " ".join(f"{v:.3f}" for v in results[arm])
        print(f"{arm:12s} {mean:6.3f} {ci:6.3f}   {per_seed}")
    margin = np.mean(results["pretrained"]) - np.mean(results["scratch"])
    print(f"\nmargin (pretrained - scratch): {margin:+.3f}")


if __name__ == "__main__":
    main()
