"""Command-line entry point: generate, pretrain, train, eval, export-mesh.

All settings come from one JSON run config; see README for the schema.
Exit codes: 0 ok, 2 config error, 3 pipeline/data error, 4 missing
artifact, 5 diverged training.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path


from . import autodiff as ad
from .dataset import Dataset, DatasetConfig, generate_dataset
from .evaluate import (ABLATIONS, ablation_setup, aggregate, evaluate_predictions, export_extremes, write_history,
                       write_report)
from .graphbuild import ClassThresholds, CorruptRecordError, load_sample
from .mesh import MeshConfig, export_ply
from .network import (ErrorNet, ModelConfig, PretextPool, TrainConfig, encoder_state, predict,
                      pretrain_encoder, train_error_net)
from .perturb import NoiseConfig
from .phantom import PhantomConfig

log = logging.getLogger("contourqa")

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE, EXIT_MISSING, EXIT_DIVERGED = 0, 2, 3, 4, 5


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


@dataclasses.dataclass(frozen=True)
class RunConfig:
    output_dir: Path
    dataset: DatasetConfig
    model: ModelConfig
    train: TrainConfig
    raw: dict

    SECTIONS = ("output_dir", "dataset", "phantom", "noise", "thresholds", "mesh", "model", "train", "folds")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(cls.SECTIONS)
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        if "output_dir" not in d:
            raise ConfigError("output_dir is required")
        ds = dict(d.get("dataset") or {})
        bad = set(ds) - {"n_phantoms", "n_perturbations", "phantom_seed", "surface_offset"}
        if bad:
            raise ConfigError(f"unknown keys in dataset: {sorted(bad)}")
        folds = dict(d.get("folds") or {})
        bad = set(folds) - {"k", "seed", "val_fraction"}
        if bad:
            raise ConfigError(f"unknown keys in folds: {sorted(bad)}")
        try:
            dataset = DatasetConfig(
                **ds,
                phantom=_build(PhantomConfig, d.get("phantom"), "phantom"),
                noise=_build(NoiseConfig, d.get("noise"), "noise"),
                thresholds=_build(ClassThresholds, d.get("thresholds"), "thresholds"),
                mesh=_build(MeshConfig, d.get("mesh"), "mesh"),
                folds_k=int(folds.get("k", 5)),
                folds_seed=int(folds.get("seed", 0)),
                val_fraction=float(folds.get("val_fraction", 1.0 / 9.0)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid dataset config: {exc}") from exc
        if not 2 <= dataset.folds_k <= dataset.n_phantoms:
            raise ConfigError(f"folds.k={dataset.folds_k} must be in [2, n_phantoms={dataset.n_phantoms}]")
        return cls(
            output_dir=Path(d["output_dir"]),
            dataset=dataset,
            model=_build(ModelConfig, d.get("model"), "model"),
            train=_build(TrainConfig, d.get("train"), "train"),
            raw=d,
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    @property
    def dataset_dir(self) -> Path:
        return self.output_dir / "dataset"

    def fold_dir(self, fold: int) -> Path:
        return self.output_dir / f"fold{fold}"

    def save_copy(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.json").write_text(json.dumps(self.raw, indent=2, sort_keys=True))


def _check_fold(cfg: RunConfig, fold: int | None) -> None:
    if fold is not None and not 0 <= fold < cfg.dataset.folds_k:
        raise ConfigError(f"--fold {fold} out of range for k={cfg.dataset.folds_k}")


def _open_dataset(cfg: RunConfig) -> Dataset:
    if not (cfg.dataset_dir / "manifest.json").exists():
        raise MissingArtifact(f"dataset not found at {cfg.dataset_dir}; run 'generate' first")
    return Dataset(cfg.dataset_dir)


# -- subcommands ----------------------------------------------------------------

def cmd_generate(cfg: RunConfig, args) -> int:
    path, wrote = generate_dataset(cfg.dataset, cfg.dataset_dir)
    cfg.save_copy(cfg.dataset_dir)
    print("generated" if wrote else "up to date", path)
    return EXIT_OK


def _pretext_pools(ds: Dataset, ids) -> list[PretextPool]:
    return [PretextPool.from_phantom(*ds.phantom(i)) for i in ids]


def cmd_pretrain(cfg: RunConfig, args) -> int:
    ds = _open_dataset(cfg)
    folds = [args.fold] if args.fold is not None else range(ds.folds.k)
    for fold in folds:
        train_ids, val_ids, _ = ds.folds.split(fold)
        model, history, acc = pretrain_encoder(_pretext_pools(ds, train_ids), _pretext_pools(ds, val_ids),
                                               cfg.model, cfg.train)
        out = cfg.fold_dir(fold)
        cfg.save_copy(out)
        ad.save_checkpoint(out / "encoder.ckpt", encoder_state(model),
                           {"kind": "encoder", "fold": fold, "val_acc": acc, "model": cfg.model.to_dict()})
        with open(out / "pretext_history.json", "w") as fh:
            json.dump(history, fh, indent=1)
        log.info("stage=pretrain fold=%d val_acc=%.4f", fold, acc)
        print(f"fold {fold}: pretext validation accuracy {acc:.3f}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    ds = _open_dataset(cfg)
    folds = [args.fold] if args.fold is not None else range(ds.folds.k)
    for fold in folds:
        model_cfg, blind, use_pre = ablation_setup(args.ablation, cfg.model)
        enc = None
        if use_pre:
            ck = cfg.fold_dir(fold) / "encoder.ckpt"
            if not ck.exists():
                raise MissingArtifact(f"{ck} missing; run 'pretrain' or use --ablation no_pretrain")
            enc, _, _ = ad.load_checkpoint(ck)
        train_ids, val_ids, _ = ds.folds.split(fold)
        train = {i: ds.samples_for(i) for i in train_ids}
        val = [s for i in val_ids for s in ds.samples_for(i)]
        out = cfg.fold_dir(fold) / args.ablation
        cfg.save_copy(out)
        try:
            result = train_error_net(train, val, model_cfg, cfg.train, enc, blind_ct=blind)
        except ad.DivergenceError as exc:
            if exc.state is not None:
                ad.save_checkpoint(out / "diverged.ckpt", exc.state,
                                   {"kind": "error_net", "fold": fold, "ablation": args.ablation,
                                    "model": model_cfg.to_dict(), "diverged": True})
            raise
        ad.save_checkpoint(
            out / "model.ckpt", result.model.state_dict(),
            {"kind": "error_net", "fold": fold, "ablation": args.ablation, "model": model_cfg.to_dict(),
             "class_weights": result.weights.tolist(), "best_val_loss": result.best_val_loss},
            optim=result.optim,
        )
        write_history(result.history, out / "history.csv")
        print(f"fold {fold} [{args.ablation}]: best validation loss {result.best_val_loss:.4f}")
    return EXIT_OK


def _load_model(path: Path) -> tuple[ErrorNet, dict]:
    if not path.exists():
        raise MissingArtifact(f"checkpoint {path} missing; run 'train' first")
    tensors, meta, _ = ad.load_checkpoint(path)
    model = ErrorNet(ModelConfig(**meta["model"]))
    model.load_state_dict(tensors)
    return model.eval(), meta


def cmd_eval(cfg: RunConfig, args) -> int:
    ds = _open_dataset(cfg)
    folds = [args.fold] if args.fold is not None else list(range(ds.folds.k))
    entries = []
    out = cfg.output_dir / "reports" / args.ablation
    cfg.save_copy(out)
    for fold in folds:
        model, _ = _load_model(cfg.fold_dir(fold) / args.ablation / "model.ckpt")
        _, blind, _ = ablation_setup(args.ablation, cfg.model)
        _, _, test_ids = ds.folds.split(fold)
        test = [s for i in test_ids for s in ds.samples_for(i)]
        preds = predict(model, test, cfg.train.batch_size, blind_ct=blind)
        metrics = evaluate_predictions(test, preds)
        entries.append({"fold": fold, "test_ids": test_ids, "metrics": metrics})
        export_extremes(test, preds, metrics["per_mesh_macro_accuracy"], out / "meshes", f"fold{fold}")
    report = {"ablation": args.ablation, "folds": entries, "aggregate": aggregate([e["metrics"] for e in entries]),
              "config": cfg.raw}
    write_report(report, out)
    agg = report["aggregate"]
    print(f"[{args.ablation}] accuracy {agg['accuracy']:.3f} macro {agg['macro_accuracy']:.3f} "
          f"neighbour agreement {agg['neighbor_agreement']['mean']:.3f} -> {out / 'report.json'}")
    return EXIT_OK


def cmd_export_mesh(cfg: RunConfig, args) -> int:
    path = Path(args.record)
    if not path.is_absolute() and not path.exists():
        path = cfg.dataset_dir / path
    if not path.exists():
        raise MissingArtifact(f"record {path} not found")
    sample = load_sample(path)
    classes = sample.labels
    if args.ablation is not None:
        if args.fold is None:
            raise ConfigError("--ablation needs --fold to pick the checkpoint")
        model, _ = _load_model(cfg.fold_dir(args.fold) / args.ablation / "model.ckpt")
        _, blind, _ = ablation_setup(args.ablation, cfg.model)
        classes = predict(model, [sample], blind_ct=blind)[0]
    export_ply(sample.mesh(), args.out, classes)
    print(f"wrote {args.out} ({sample.n_nodes} vertices)")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-mesh": cmd_export_mesh,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contourqa", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="run config JSON")
        if name != "generate":
            s.add_argument("--fold", type=int, default=None)
        if name in ("train", "eval"):
            s.add_argument("--ablation", choices=ABLATIONS, default="full")
        if name == "export-mesh":
            s.add_argument("--record", required=True, help="sample record (.rec), relative to the dataset dir")
            s.add_argument("--out", required=True)
            s.add_argument("--ablation", choices=ABLATIONS, default=None,
                           help="colour by this model's predictions instead of the labels")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


class _KeyValueFormatter(logging.Formatter):
    def format(self, record):
        ts = time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(record.created))
        return f"ts={ts} level={record.levelname.lower()} logger={record.name} {record.getMessage()}"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_KeyValueFormatter())
    root = logging.getLogger("contourqa")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO if args.verbose else logging.WARNING)
    try:
        cfg = RunConfig.load(args.config)
        _check_fold(cfg, getattr(args, "fold", None))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ad.DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CorruptRecordError, ValueError, OSError, RuntimeError) as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
