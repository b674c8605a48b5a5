"""Synthetic training sets: phantoms -> SDT -> perturbations -> meshes -> graph records.

Layout of a dataset directory::

    manifest.json               configs, seeds, fold plan, per-record sha256
    phantoms/p000_ct.nii        CT volume
    phantoms/p000_gt.nii        ground-truth mask
    samples/p000_s000.rec       one GraphSample (binary, CRC-protected)
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from multiprocessing import Pool
from pathlib import Path

from .distance import signed_distance_transform, surface_distance
from .evaluate import FoldPlan, make_folds
from .graphbuild import ClassThresholds, GraphSample, CorruptRecordError, assemble_sample, decode_sample, encode_sample
from .grid import load_nifti, save_nifti
from .mesh import MeshConfig, extract_clean_mesh
from .perturb import NoiseConfig, perturb_sdf, structured_noise
from .phantom import PhantomConfig, generate_phantom

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class DatasetConfig:
    n_phantoms: int = 16
    n_perturbations: int = 50
    phantom_seed: int = 0
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    thresholds: ClassThresholds = field(default_factory=ClassThresholds)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    folds_k: int = 5
    folds_seed: int = 0
    val_fraction: float = 1.0 / 9.0
    surface_offset: bool = True

    def __post_init__(self):
        if self.n_phantoms < 1 or self.n_perturbations < 1:
            raise ValueError("need at least one phantom and one perturbation")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def perturbation_seed(cfg: DatasetConfig, phantom: int, j: int) -> int:
    return cfg.noise.seed + phantom * cfg.n_perturbations + j


def _build_phantom(args) -> tuple[dict, list[dict]]:
    cfg, index, out = args
    out = Path(out)
    seed = cfg.phantom_seed + index
    ct, gt, params = generate_phantom(cfg.phantom, seed)
    ct_rel, gt_rel = f"phantoms/p{index:03d}_ct.nii", f"phantoms/p{index:03d}_gt.nii"
    save_nifti(ct, out / ct_rel)
    save_nifti(gt, out / gt_rel)
    gt_sdf = signed_distance_transform(gt)
    if cfg.surface_offset:
        gt_sdf = surface_distance(gt_sdf)
    records = []
    for j in range(cfg.n_perturbations):
        pseed = perturbation_seed(cfg, index, j)
        noisy = perturb_sdf(gt_sdf, structured_noise(gt_sdf, cfg.noise, seed=pseed))
        mesh = extract_clean_mesh(noisy, cfg.mesh)
        rel = f"samples/p{index:03d}_s{j:03d}.rec"
        prov = {"phantom": index, "phantom_seed": seed, "perturbation": j, "noise_seed": pseed, "record": rel}
        raw = encode_sample(assemble_sample(ct, mesh, gt_sdf, cfg.thresholds, prov))
        (out / rel).write_bytes(raw)
        records.append({"file": rel, "phantom": index, "perturbation": j, "seed": pseed,
                        "n_nodes": mesh.n_vertices, "n_triangles": mesh.n_triangles,
                        "sha256": hashlib.sha256(raw).hexdigest()})
    log.info("stage=generate phantom=%d records=%d", index, len(records))
    info = {"id": index, "seed": seed, "ct": ct_rel, "gt": gt_rel, "params": params}
    return info, records


def _manifest_ok(out: Path, cfg: DatasetConfig) -> bool:
    path = out / "manifest.json"
    if not path.exists():
        return False
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError:
        return False
    if m.get("config_digest") != cfg.digest() or m.get("format_version") != FORMAT_VERSION:
        return False
    return all((out / r["file"]).exists() for r in m["records"])


def generate_dataset(cfg: DatasetConfig, out_dir, workers: int | None = None) -> tuple[Path, bool]:
    """Build the dataset; returns (manifest path, whether anything was written).

    Re-running with an identical config and intact files is a no-op.
    """
    out = Path(out_dir)
    if _manifest_ok(out, cfg):
        log.info("stage=generate status=up-to-date dir=%s", out)
        return out / "manifest.json", False
    (out / "phantoms").mkdir(parents=True, exist_ok=True)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    workers = workers or int(os.environ.get("CONTOURQA_WORKERS", "1"))
    jobs = [(cfg, i, str(out)) for i in range(cfg.n_phantoms)]
    if workers > 1:
        with Pool(workers) as pool:
            results = pool.map(_build_phantom, jobs)
    else:
        results = [_build_phantom(j) for j in jobs]
    folds = make_folds(range(cfg.n_phantoms), cfg.folds_k, cfg.folds_seed, cfg.val_fraction)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "phantoms": [info for info, _ in results],
        "records": [r for _, recs in results for r in recs],
        "folds": folds.to_dict(),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path, True


def manifest_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Dataset:
    """Read access to a generated dataset; records are checksum-verified on load."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"no manifest.json in {self.root}")
        self.manifest = json.loads(path.read_text())
        if self.manifest.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format {self.manifest.get('format_version')}")
        self.folds = FoldPlan.from_dict(self.manifest["folds"])
        self._by_phantom: dict[int, list[dict]] = {}
        for r in self.manifest["records"]:
            self._by_phantom.setdefault(int(r["phantom"]), []).append(r)
        self._cache: dict[str, GraphSample] = {}

    @property
    def phantom_ids(self) -> list[int]:
        return sorted(self._by_phantom)

    @property
    def thresholds(self) -> ClassThresholds:
        return ClassThresholds(**self.manifest["config"]["thresholds"])

    def load_record(self, rec: dict) -> GraphSample:
        raw = (self.root / rec["file"]).read_bytes()
        if hashlib.sha256(raw).hexdigest() != rec["sha256"]:
            raise CorruptRecordError(f"{rec['file']}: sha256 does not match manifest")
        return decode_sample(raw)

    def samples_for(self, phantom: int) -> list[GraphSample]:
        out = []
        for rec in self._by_phantom[phantom]:
            if rec["file"] not in self._cache:
                self._cache[rec["file"]] = self.load_record(rec)
            out.append(self._cache[rec["file"]])
        return out

    def phantom(self, phantom: int):
        info = next(p for p in self.manifest["phantoms"] if p["id"] == phantom)
        return load_nifti(self.root / info["ct"]), load_nifti(self.root / info["gt"], mask=True)
