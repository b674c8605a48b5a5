"""Turn a cleaned mesh + CT + ground-truth SDF into a labelled graph sample."""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import GridError, Volume, trilinear_sample_many
from .mesh import TriMesh

PATCH = 5
FILL_HU = -1000.0
HU_WINDOW = (-250.0, 250.0)


@dataclass(frozen=True)
class ClassThresholds:
    edges: tuple[float, float, float, float] = (-2.5, -0.5, 0.5, 2.5)

    def __post_init__(self):
        e = tuple(float(x) for x in self.edges)
        object.__setattr__(self, "edges", e)
        if len(e) != 4 or not all(a < b for a, b in zip(e, e[1:])):
            raise ValueError(f"class thresholds must be 4 strictly increasing values, got {e}")
        if not e[0] < 0 < e[3]:
            raise ValueError("outer thresholds must straddle zero")

    def classify(self, d) -> np.ndarray:
        """Class 0 (d < t1) .. class 4 (d > t4); class 2 includes both inner bounds."""
        d = np.asarray(d, dtype=np.float64)
        t1, t2, t3, t4 = self.edges
        out = np.full(d.shape, 2, dtype=np.uint8)
        out[d < t2] = 1
        out[d < t1] = 0
        out[d > t3] = 3
        out[d > t4] = 4
        return out

    def to_dict(self) -> dict:
        return {"edges": list(self.edges)}


@dataclass(eq=False)
class GraphSample:
    positions: np.ndarray  # (N, 3) float32, world mm
    patches: np.ndarray  # (N, 5, 5, 5) float32 in [-1, 1]
    edges: np.ndarray  # (E, 2) uint32, source -> target
    pseudo: np.ndarray  # (E, 3) float32 in [0, 1]
    labels: np.ndarray  # (N,) uint8
    distances: np.ndarray  # (N,) float32, mm
    triangles: np.ndarray  # (F, 3) uint32
    provenance: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def mesh(self) -> TriMesh:
        return TriMesh(self.positions.astype(np.float64), self.triangles.astype(np.int64))

    def validate(self, th: ClassThresholds | None = None) -> None:
        n = self.n_nodes
        if self.patches.shape != (n, PATCH, PATCH, PATCH):
            raise ValueError(f"patches shape {self.patches.shape} does not match {n} nodes")
        if len(self.edges) and (self.edges.max() >= n):
            raise ValueError("edge index out of range")
        if np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise ValueError("self-loop in edge list")
        if self.pseudo.shape != (self.n_edges, 3) or self.pseudo.min(initial=0) < 0 or self.pseudo.max(initial=1) > 1:
            raise ValueError("pseudo-coordinates must be (E, 3) within [0, 1]")
        if th is not None and not np.array_equal(th.classify(self.distances), self.labels):
            raise ValueError("labels inconsistent with signed distances")

    def equals(self, other: "GraphSample") -> bool:
        names = ["positions", "patches", "edges", "pseudo", "labels", "distances", "triangles"]
        same = all(
            getattr(self, k).dtype == getattr(other, k).dtype
            and np.array_equal(getattr(self, k), getattr(other, k))
            for k in names
        )
        return same and self.provenance == other.provenance


def label_nodes(mesh: TriMesh, gt_sdf: Volume, th: ClassThresholds) -> tuple[np.ndarray, np.ndarray]:
    """Signed distance to the ground truth (trilinear SDF lookup) and class per node."""
    try:
        d = trilinear_sample_many(gt_sdf, mesh.vertices)
    except GridError as exc:
        raise GridError(f"node outside ground-truth SDF: {exc}") from exc
    d = d.astype(np.float32)
    return d, th.classify(d)


def build_edges(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Both directions of every mesh edge, with per-graph normalised pseudo-coordinates."""
    und = mesh.edges()
    edges = np.concatenate([und, und[:, ::-1]])
    delta = mesh.vertices[edges[:, 1]] - mesh.vertices[edges[:, 0]]
    scale = np.abs(delta).max() if len(delta) else 1.0
    pseudo = np.clip(0.5 + delta / (2.0 * scale), 0.0, 1.0)
    return edges.astype(np.int64), pseudo


def extract_patches(ct: Volume, points) -> np.ndarray:
    """5x5x5 patches centred on the voxel nearest each point, HU-windowed to [-1, 1]."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    centre = np.rint(ct.world_to_voxel(pts)).astype(np.int64)
    r = PATCH // 2
    off = np.arange(-r, r + 1)
    ix = centre[:, 0, None, None, None] + off[None, :, None, None]
    iy = centre[:, 1, None, None, None] + off[None, None, :, None]
    iz = centre[:, 2, None, None, None] + off[None, None, None, :]
    ix, iy, iz = np.broadcast_arrays(ix, iy, iz)
    nx, ny, nz = ct.dims
    inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
    vals = np.full(ix.shape, FILL_HU, dtype=np.float64)
    vals[inside] = ct.data[ix[inside], iy[inside], iz[inside]]
    lo, hi = HU_WINDOW
    vals = np.clip(vals, lo, hi)
    return ((vals - lo) / (hi - lo) * 2.0 - 1.0).astype(np.float32)


def extract_patch(ct: Volume, node) -> np.ndarray:
    return extract_patches(ct, np.asarray(node)[None])[0]


def assemble_sample(
    ct: Volume, mesh: TriMesh, gt_sdf: Volume, th: ClassThresholds, provenance: dict | None = None
) -> GraphSample:
    if ct.grid_mismatch(gt_sdf) is not None:
        raise GridError(f"CT and ground-truth SDF grids differ in {ct.grid_mismatch(gt_sdf)}")
    d, labels = label_nodes(mesh, gt_sdf, th)
    edges, pseudo = build_edges(mesh)
    sample = GraphSample(
        positions=mesh.vertices.astype(np.float32),
        patches=extract_patches(ct, mesh.vertices),
        edges=edges.astype(np.uint32),
        pseudo=pseudo.astype(np.float32),
        labels=labels,
        distances=d,
        triangles=mesh.triangles.astype(np.uint32),
        provenance=dict(provenance or {}),
    )
    return sample


# -- binary record format ---------------------------------------------------
# magic "CQGS", u32 version, u32 N, u32 E, u32 F, u32 provenance-json length,
# then provenance json, positions f32, patches f32, edges u32, pseudo f32,
# labels u8, distances f32, triangles u32, and a trailing CRC32 of everything.

RECORD_MAGIC = b"CQGS"
RECORD_VERSION = 1
_HEAD = struct.Struct("<4sIIIII")


class CorruptRecordError(ValueError):
    pass


def encode_sample(s: GraphSample) -> bytes:
    prov = json.dumps(s.provenance, sort_keys=True).encode("utf-8")
    parts = [
        _HEAD.pack(RECORD_MAGIC, RECORD_VERSION, s.n_nodes, s.n_edges, len(s.triangles), len(prov)),
        prov,
        np.ascontiguousarray(s.positions, "<f4").tobytes(),
        np.ascontiguousarray(s.patches, "<f4").tobytes(),
        np.ascontiguousarray(s.edges, "<u4").tobytes(),
        np.ascontiguousarray(s.pseudo, "<f4").tobytes(),
        np.ascontiguousarray(s.labels, "u1").tobytes(),
        np.ascontiguousarray(s.distances, "<f4").tobytes(),
        np.ascontiguousarray(s.triangles, "<u4").tobytes(),
    ]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_sample(raw: bytes) -> GraphSample:
    if len(raw) < _HEAD.size + 4:
        raise CorruptRecordError("record truncated")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptRecordError("record checksum mismatch")
    magic, version, n, e, f, plen = _HEAD.unpack_from(body, 0)
    if magic != RECORD_MAGIC or version != RECORD_VERSION:
        raise CorruptRecordError(f"bad record header {magic!r} v{version}")
    off = _HEAD.size
    prov = json.loads(body[off : off + plen].decode("utf-8"))
    off += plen

    def take(dtype, count, shape):
        nonlocal off
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=off).reshape(shape)
        off += arr.nbytes
        return arr.astype(arr.dtype.newbyteorder("="))

    return GraphSample(
        positions=take("<f4", n * 3, (n, 3)),
        patches=take("<f4", n * PATCH ** 3, (n, PATCH, PATCH, PATCH)),
        edges=take("<u4", e * 2, (e, 2)),
        pseudo=take("<f4", e * 3, (e, 3)),
        labels=take("u1", n, (n,)),
        distances=take("<f4", n, (n,)),
        triangles=take("<u4", f * 3, (f, 3)),
        provenance=prov,
    )


def save_sample(s: GraphSample, path) -> bytes:
    raw = encode_sample(s)
    Path(path).write_bytes(raw)
    return raw


def load_sample(path) -> GraphSample:
    return decode_sample(Path(path).read_bytes())
