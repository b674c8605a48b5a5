"""Cross-validated ablation study on the synthetic corpus.

Generates (or reuses) the dataset described by a run config, pretrains one
encoder per fold, trains every requested ablation on every requested fold
and writes one report per ablation plus a summary table.

    python3 scripts/run_experiment.py --config configs/desk.json
    python3 scripts/run_experiment.py --config configs/desk.json --folds 0 --ablations full no_gnn
"""
import argparse
import json
import logging
import time

from contourqa import autodiff as ad
from contourqa.cli import RunConfig
from contourqa.dataset import Dataset, generate_dataset
from contourqa.evaluate import ABLATIONS, edge_recall, run_ablation
from contourqa.network import PretextPool, encoder_state, pretrain_encoder

log = logging.getLogger("experiment")


def pretrained_encoders(cfg: RunConfig, ds: Dataset, folds) -> dict:
    encoders = {}
    for fold in folds:
        path = cfg.fold_dir(fold) / "encoder.ckpt"
        if path.exists():
            encoders[fold], _, _ = ad.load_checkpoint(path)
            continue
        train_ids, val_ids, _ = ds.folds.split(fold)
        pools = lambda ids: [PretextPool.from_phantom(*ds.phantom(i)) for i in ids]
        model, _, acc = pretrain_encoder(pools(train_ids), pools(val_ids), cfg.model, cfg.train)
        encoders[fold] = encoder_state(model)
        cfg.save_copy(path.parent)
        ad.save_checkpoint(path, encoders[fold], {"kind": "encoder", "fold": fold, "val_acc": acc})
        log.info("fold %d pretext accuracy %.3f", fold, acc)
    return encoders


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True)
    ap.add_argument("--folds", type=int, nargs="*")
    ap.add_argument("--ablations", nargs="*", default=list(ABLATIONS), choices=ABLATIONS)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    cfg = RunConfig.load(args.config)
    generate_dataset(cfg.dataset, cfg.dataset_dir)
    ds = Dataset(cfg.dataset_dir)
    folds = args.folds if args.folds else list(range(ds.folds.k))
    encoders = pretrained_encoders(cfg, ds, folds)

    rows = []
    for which in args.ablations:
        t0 = time.perf_counter()
        out = cfg.output_dir / "reports" / which
        cfg.save_copy(out)
        report = run_ablation(ds, which, cfg.model, cfg.train, folds=folds, encoder_init=encoders.get, out_dir=out)
        agg = report["aggregate"]
        rows.append({
            "ablation": which,
            "accuracy": agg["accuracy"],
            "macro_accuracy": agg["macro_accuracy"],
            "edge_recall": edge_recall(agg),
            "external_precision": agg["edge"]["external"]["precision"],
            "internal_precision": agg["edge"]["internal"]["precision"],
            "neighbor_agreement": agg["neighbor_agreement"]["mean"],
            "minutes": (time.perf_counter() - t0) / 60,
        })
        log.info("%s done: %s", which, json.dumps(rows[-1]))

    (cfg.output_dir / "summary.json").write_text(json.dumps(rows, indent=2))
    fmt = lambda v: "  n/a" if v is None else f"{v:.3f}"
    print(f"{'ablation':12s} {'acc':>6s} {'macro':>6s} {'edgeR':>6s} {'agree':>6s}")
    for r in rows:
        print(f"{r['ablation']:12s} {fmt(r['accuracy']):>6s} {fmt(r['macro_accuracy']):>6s} "
              f"{fmt(r['edge_recall']):>6s} {fmt(r['neighbor_agreement']):>6s}")


if __name__ == "__main__":
    main()
