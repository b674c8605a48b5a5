"""Metrics, cross-validation folds and the ablation harness."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .perturb import make_rng

log = logging.getLogger(__name__)

N_CLASSES = 5
ABLATIONS = ("full", "blind_ct", "no_gnn", "no_pretrain")


# -- confusion & derived rates ---------------------------------------------

def confusion(preds, truths, n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    preds = np.asarray(preds, dtype=np.int64).ravel()
    truths = np.asarray(truths, dtype=np.int64).ravel()
    if preds.shape != truths.shape:
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(truths)} truths")
    return np.bincount(truths * n_classes + preds, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def recalls(cm: np.ndarray) -> np.ndarray:
    """Per-class recall; NaN for classes absent from the truths."""
    rows = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, np.diag(cm) / np.maximum(rows, 1), np.nan)


def macro_accuracy(cm: np.ndarray) -> float:
    """Mean recall over the classes that occur."""
    return float(np.nanmean(recalls(cm)))


def accuracy(cm: np.ndarray) -> float:
    return float(np.trace(cm) / cm.sum())


def edge_precision_recall(preds, truths, signed_distances=None, sign_rule: str = "class") -> dict:
    """Precision / recall of the two extreme ("edge") classes.

    A predicted edge class counts as correct for precision when the truth is
    an error of the same sign: classes {0, 1} for internal, {3, 4} for
    external (``sign_rule="class"``), or simply the same sign of the raw
    distance (``sign_rule="distance"``).  Recall is strict.  Precision with no
    positive predictions is reported as None.
    """
    preds = np.asarray(preds, dtype=np.int64).ravel()
    truths = np.asarray(truths, dtype=np.int64).ravel()
    if preds.shape != truths.shape:
        raise ValueError("length mismatch")
    if sign_rule == "distance":
        if signed_distances is None:
            raise ValueError("sign_rule='distance' needs signed distances")
        d = np.asarray(signed_distances, dtype=np.float64).ravel()
        same = {"internal": d < 0, "external": d > 0}
    elif sign_rule == "class":
        same = {"internal": truths <= 1, "external": truths >= 3}
    else:
        raise ValueError(f"unknown sign_rule {sign_rule!r}")

    out = {}
    for name, cls in (("internal", 0), ("external", N_CLASSES - 1)):
        predicted = preds == cls
        n_pred = int(predicted.sum())
        n_true = int((truths == cls).sum())
        tp_strict = int((predicted & (truths == cls)).sum())
        tp_sign = int((predicted & same[name]).sum())
        out[name] = {
            "precision": tp_sign / n_pred if n_pred else None,
            "recall": tp_strict / n_true if n_true else None,
            "n_predicted": n_pred,
            "n_true": n_true,
            "tp_sign": tp_sign,
            "tp_strict": tp_strict,
        }
    return out


def neighbor_agreement(edges, classes, return_isolated: bool = False):
    """Mean over nodes of the fraction of neighbours whose class differs by at most one.

    ``edges`` may list each undirected edge once or in both directions.
    Nodes without neighbours are excluded (and reported when asked).
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    classes = np.asarray(classes, dtype=np.int64)
    n = len(classes)
    und = np.unique(np.sort(edges[edges[:, 0] != edges[:, 1]], axis=1), axis=0)
    src = np.concatenate([und[:, 0], und[:, 1]])
    dst = np.concatenate([und[:, 1], und[:, 0]])
    ok = (np.abs(classes[src] - classes[dst]) <= 1).astype(np.float64)
    deg = np.bincount(src, minlength=n)
    agree = np.bincount(src, weights=ok, minlength=n)
    has = deg > 0
    value = float((agree[has] / deg[has]).mean()) if has.any() else float("nan")
    if return_isolated:
        return value, np.flatnonzero(~has)
    return value


# -- folds ----------------------------------------------------------------------

@dataclass
class FoldPlan:
    k: int
    seed: int
    assignment: dict[int, int]  # structure id -> fold
    val_fraction: float = 1.0 / 9.0
    order: list[int] = field(default_factory=list)  # shuffled ids, fixes validation choice

    def split(self, fold: int) -> tuple[list[int], list[int], list[int]]:
        """(train, validation, test) structure ids for one fold."""
        if not 0 <= fold < self.k:
            raise ValueError(f"fold {fold} out of range for k={self.k}")
        test = [i for i in self.order if self.assignment[i] == fold]
        rest = [i for i in self.order if self.assignment[i] != fold]
        n_val = int(round(len(rest) * self.val_fraction))
        if len(rest) >= 2:
            n_val = max(1, n_val)
        val = rest[:n_val]
        train = rest[n_val:]
        return sorted(train), sorted(val), sorted(test)

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "val_fraction": self.val_fraction,
                "order": list(self.order), "assignment": {str(k): v for k, v in self.assignment.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        return cls(int(d["k"]), int(d["seed"]), {int(k): int(v) for k, v in d["assignment"].items()},
                   float(d["val_fraction"]), [int(i) for i in d["order"]])


def make_folds(ids, k: int = 5, seed: int = 0, val_fraction: float = 1.0 / 9.0) -> FoldPlan:
    ids = [int(i) for i in ids]
    if len(set(ids)) != len(ids):
        raise ValueError("structure ids must be unique")
    if k > len(ids):
        raise ValueError(f"cannot make {k} folds from {len(ids)} structures")
    if k < 2:
        raise ValueError("need k >= 2")
    order = [ids[i] for i in make_rng(seed).permutation(len(ids))]
    assignment = {sid: n % k for n, sid in enumerate(order)}
    return FoldPlan(k, seed, assignment, val_fraction, order)


# -- per-fold evaluation --------------------------------------------------------

def evaluate_predictions(samples, preds) -> dict:
    """Aggregate metrics over a list of GraphSamples and matching predictions."""
    truths = np.concatenate([s.labels for s in samples]).astype(np.int64)
    flat = np.concatenate(preds).astype(np.int64)
    cm = confusion(flat, truths)
    agree_pred = [neighbor_agreement(s.edges, p) for s, p in zip(samples, preds)]
    agree_true = [neighbor_agreement(s.edges, s.labels) for s in samples]
    per_mesh = [macro_accuracy(confusion(p, s.labels)) for s, p in zip(samples, preds)]
    return {
        "n_nodes": int(len(truths)),
        "n_meshes": len(samples),
        "confusion": cm.tolist(),
        "recall_per_class": [None if np.isnan(r) else float(r) for r in recalls(cm)],
        "accuracy": accuracy(cm),
        "macro_accuracy": macro_accuracy(cm),
        "majority_baseline": float(cm.sum(axis=1).max() / cm.sum()),
        "edge": edge_precision_recall(flat, truths),
        "neighbor_agreement": {"mean": float(np.mean(agree_pred)), "std": float(np.std(agree_pred))},
        "neighbor_agreement_truth": {"mean": float(np.mean(agree_true)), "std": float(np.std(agree_true))},
        "per_mesh_macro_accuracy": per_mesh,
    }


def edge_recall(metrics: dict) -> float:
    """Strict recall over both edge classes pooled."""
    e = metrics["edge"]
    n_true = e["internal"]["n_true"] + e["external"]["n_true"]
    tp = e["internal"]["tp_strict"] + e["external"]["tp_strict"]
    return tp / n_true if n_true else float("nan")


def edge_prior(metrics: dict) -> float:
    e = metrics["edge"]
    return (e["internal"]["n_true"] + e["external"]["n_true"]) / metrics["n_nodes"]


_NUM_OR_NULL = {"type": ["number", "null"]}
_EDGE_SCHEMA = {
    "type": "object",
    "required": ["precision", "recall", "n_predicted", "n_true"],
    "properties": {"precision": _NUM_OR_NULL, "recall": _NUM_OR_NULL,
                   "n_predicted": {"type": "integer"}, "n_true": {"type": "integer"}},
}
_METRICS_SCHEMA = {
    "type": "object",
    "required": ["n_nodes", "confusion", "recall_per_class", "accuracy", "macro_accuracy", "edge",
                 "neighbor_agreement"],
    "properties": {
        "n_nodes": {"type": "integer", "minimum": 0},
        "confusion": {"type": "array", "minItems": 5, "maxItems": 5,
                      "items": {"type": "array", "minItems": 5, "maxItems": 5,
                                "items": {"type": "integer", "minimum": 0}}},
        "recall_per_class": {"type": "array", "minItems": 5, "maxItems": 5, "items": _NUM_OR_NULL},
        "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "macro_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "edge": {"type": "object", "required": ["internal", "external"],
                 "properties": {"internal": _EDGE_SCHEMA, "external": _EDGE_SCHEMA}},
        "neighbor_agreement": {"type": "object", "required": ["mean", "std"]},
    },
}
REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["ablation", "folds", "aggregate", "config"],
    "properties": {
        "ablation": {"enum": list(ABLATIONS)},
        "folds": {"type": "array", "minItems": 1, "items": {
            "type": "object", "required": ["fold", "test_ids", "metrics"],
            "properties": {"fold": {"type": "integer", "minimum": 0},
                           "test_ids": {"type": "array", "items": {"type": "integer"}},
                           "metrics": _METRICS_SCHEMA}}},
        "aggregate": _METRICS_SCHEMA,
        "config": {"type": "object"},
    },
}


def aggregate(fold_metrics: list[dict]) -> dict:
    cm = np.sum([np.asarray(m["confusion"]) for m in fold_metrics], axis=0)
    truths = np.repeat(np.arange(N_CLASSES), cm.sum(axis=1))
    preds = np.concatenate([np.repeat(np.arange(N_CLASSES), row) for row in cm])
    agree = [m["neighbor_agreement"]["mean"] for m in fold_metrics]
    return {
        "n_nodes": int(cm.sum()),
        "confusion": cm.tolist(),
        "recall_per_class": [None if np.isnan(r) else float(r) for r in recalls(cm)],
        "accuracy": accuracy(cm),
        "macro_accuracy": macro_accuracy(cm),
        "edge": edge_precision_recall(preds, truths),
        "neighbor_agreement": {"mean": float(np.mean(agree)), "std": float(np.std(agree))},
    }


def write_report(report: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    with open(out / "confusion.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "true_class"] + [f"pred_{c}" for c in range(N_CLASSES)])
        for f in report["folds"]:
            for c, row in enumerate(f["metrics"]["confusion"]):
                w.writerow([f["fold"], c] + list(row))


def write_history(history: list[dict], path) -> None:
    cols = ["epoch", "lr", "train_loss", "val_loss", "val_acc"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(history)


# -- ablations ------------------------------------------------------------------

def ablation_setup(which: str, model_cfg):
    """(model config, blind_ct, uses pretrained encoder) for an ablation name."""
    from dataclasses import replace

    if which not in ABLATIONS:
        raise ValueError(f"unknown ablation {which!r}; choose from {ABLATIONS}")
    if which == "no_gnn":
        return replace(model_cfg, use_gnn=False), False, True
    if which == "blind_ct":
        return model_cfg, True, True
    if which == "no_pretrain":
        return model_cfg, False, False
    return model_cfg, False, True


def export_extremes(samples, preds, scores, out_dir, prefix: str, n: int = 5) -> list[Path]:
    """Write the ``n`` lowest- and highest-scoring meshes as class-coloured PLYs."""
    from .mesh import export_ply

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    order = np.argsort(scores, kind="stable")
    picks = [("worst", i) for i in order[:n]] + [("best", i) for i in order[::-1][:n]]
    paths = []
    for tag, i in picks:
        s = samples[i]
        stem = Path(str(s.provenance.get("record", i))).stem
        path = out / f"{prefix}_{tag}_{stem}.ply"
        export_ply(s.mesh(), path, preds[i])
        paths.append(path)
    return paths


def run_fold(dataset, which: str, fold: int, model_cfg, train_cfg, encoder_init=None, out_dir=None):
    """Train one ablation on one fold and evaluate on its held-out structures.

    Returns (fold entry for the report, TrainResult).
    """
    from .network import predict, train_error_net

    cfg, blind, use_pre = ablation_setup(which, model_cfg)
    train_ids, val_ids, test_ids = dataset.folds.split(fold)
    train = {i: dataset.samples_for(i) for i in train_ids}
    val = [s for i in val_ids for s in dataset.samples_for(i)]
    test = [s for i in test_ids for s in dataset.samples_for(i)]
    result = train_error_net(train, val, cfg, train_cfg, encoder_init if use_pre else None, blind_ct=blind)
    preds = predict(result.model, test, train_cfg.batch_size, blind_ct=blind)
    metrics = evaluate_predictions(test, preds)
    entry = {"fold": fold, "test_ids": test_ids, "metrics": metrics}
    if out_dir is not None:
        export_extremes(test, preds, metrics["per_mesh_macro_accuracy"], Path(out_dir) / "meshes", f"fold{fold}")
    return entry, result


def run_ablation(dataset, which: str, model_cfg, train_cfg, folds=None, encoder_init=None, out_dir=None) -> dict:
    """Train/evaluate ``which`` on the given folds (default: all) and build the report."""
    folds = range(dataset.folds.k) if folds is None else folds
    entries = []
    for fold in folds:
        enc = encoder_init(fold) if callable(encoder_init) else encoder_init
        entry, _ = run_fold(dataset, which, fold, model_cfg, train_cfg, enc, out_dir)
        entries.append(entry)
    report = {
        "ablation": which,
        "folds": entries,
        "aggregate": aggregate([e["metrics"] for e in entries]),
        "config": {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                   "folds": dataset.folds.to_dict()},
    }
    if out_dir is not None:
        write_report(report, out_dir)
    return report
