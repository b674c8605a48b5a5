"""Does a pretrained encoder make early validation loss less seed-dependent?

Trains the full model for one epoch from several seeds, once with random
initialisation and once starting from a pretext-trained encoder, and
compares the spread of the epoch-1 validation losses.

    python3 scripts/transfer_variance.py --dataset runs/demo/dataset --fold 0
"""
import argparse
import json
import logging
import time

import numpy as np

from contourqa import autodiff as ad
from contourqa.dataset import Dataset
from contourqa.network import ModelConfig, PretextPool, TrainConfig, encoder_state, pretrain_encoder, train_error_net


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dataset", required=True)
    ap.add_argument("--fold", type=int, default=0)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--per-image", type=int, default=25, help="perturbations per structure in the epoch")
    ap.add_argument("--encoder", help="encoder checkpoint; pretrained on the fold when omitted")
    ap.add_argument("--out", help="write the losses as JSON here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    ds = Dataset(args.dataset)
    train_ids, val_ids, _ = ds.folds.split(args.fold)
    if args.encoder:
        enc, _, _ = ad.load_checkpoint(args.encoder)
    else:
        pools = lambda ids: [PretextPool.from_phantom(*ds.phantom(i)) for i in ids]
        model, _, acc = pretrain_encoder(pools(train_ids), pools(val_ids), ModelConfig(), TrainConfig())
        enc = encoder_state(model)
        print(f"pretext accuracy {acc:.3f}")

    train = {i: ds.samples_for(i) for i in train_ids}
    val = [s for i in val_ids for s in ds.samples_for(i)]
    losses = {"random": [], "pretrained": []}
    for seed in range(args.seeds):
        cfg = TrainConfig(seed=seed, perturbations_per_image=args.per_image)
        for name, init in (("random", None), ("pretrained", enc)):
            t0 = time.perf_counter()
            res = train_error_net(train, val, ModelConfig(), cfg, encoder_init=init, stop_after=1)
            losses[name].append(res.history[0]["val_loss"])
            print(f"seed {seed} {name:10s} epoch-1 val loss {losses[name][-1]:.4f} ({time.perf_counter() - t0:.0f}s)")
    summary = {k: {"losses": v, "mean": float(np.mean(v)), "std": float(np.std(v, ddof=1))} for k, v in losses.items()}
    for k, v in summary.items():
        print(f"{k:10s} mean {v['mean']:.4f} std {v['std']:.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(summary, fh, indent=2)


if __name__ == "__main__":
    main()
