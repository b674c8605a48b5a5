"""Triangle meshes: extraction from SDFs, cleanup, smoothing, decimation and export.

Triangles are counter-clockwise seen from outside, so face normals point
toward positive SDF values.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from skimage.measure import marching_cubes as _skimage_mc

from . import _qem
from .grid import Volume


class SurfaceNotPresentError(ValueError):
    pass


class DecimationWarning(UserWarning):
    pass


@dataclass(eq=False)
class TriMesh:
    vertices: np.ndarray  # (V, 3) world mm
    triangles: np.ndarray  # (F, 3) vertex indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def copy(self) -> "TriMesh":
        return TriMesh(self.vertices.copy(), self.triangles.copy())

    def directed_edges(self) -> np.ndarray:
        t = self.triangles
        return np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted (i < j) pairs, lexicographic order."""
        e = np.sort(self.directed_edges(), axis=1)
        return np.unique(e, axis=0)

    def adjacency(self) -> sp.csr_matrix:
        e = self.edges()
        n = self.n_vertices
        A = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        A = (A + A.T).tocsr()
        A.data[:] = 1.0
        return A

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges()) + self.n_triangles

    def is_watertight(self) -> bool:
        if self.n_triangles == 0:
            return False
        e = np.sort(self.directed_edges(), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def is_consistently_oriented(self) -> bool:
        # each directed edge must appear exactly once
        d = self.directed_edges()
        _, counts = np.unique(d, axis=0, return_counts=True)
        return bool(np.all(counts == 1))

    def has_degenerate_triangles(self) -> bool:
        t = self.triangles
        return bool(np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])))

    def has_unreferenced_vertices(self) -> bool:
        return len(np.unique(self.triangles)) != self.n_vertices

    def face_normals(self, normalize: bool = True) -> np.ndarray:
        p = self.vertices[self.triangles]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        if normalize:
            n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def enclosed_volume(self) -> float:
        """Signed volume by the divergence theorem (positive for outward normals)."""
        p = self.vertices[self.triangles]
        return float(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0)

    def to_dict(self, classes=None) -> dict:
        out = {"vertices": self.vertices.tolist(), "triangles": self.triangles.tolist()}
        if classes is not None:
            out["classes"] = [int(c) for c in classes]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TriMesh":
        return cls(np.array(d["vertices"]), np.array(d["triangles"]))


def compact(vertices: np.ndarray, triangles: np.ndarray) -> TriMesh:
    """Drop unreferenced vertices, keeping the relative order of the rest."""
    used = np.unique(triangles)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(vertices[used], remap[triangles])


# -- extraction --------------------------------------------------------------

def marching_cubes(sdf: Volume, level: float = 0.0) -> TriMesh:
    data = np.asarray(sdf.data, dtype=np.float64)
    if not (data.min() < level < data.max()):
        raise SurfaceNotPresentError("surface not present: field does not cross the level")
    # values exactly at the level would produce coincident vertices
    nudge = 1e-6 * min(sdf.spacing)
    data = np.where(data == level, level + nudge, data)
    verts, faces, _, _ = _skimage_mc(data, level, spacing=sdf.spacing, allow_degenerate=True)
    verts = verts.astype(np.float64) + np.asarray(sdf.origin)
    faces = faces.astype(np.int64)
    keep = ~((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2]))
    return compact(verts, faces[keep])


def largest_component(mesh: TriMesh) -> TriMesh:
    if mesh.n_triangles == 0:
        raise ValueError("empty mesh")
    n_comp, labels = connected_components(mesh.adjacency(), directed=False)
    tri_comp = labels[mesh.triangles[:, 0]]
    counts = np.bincount(tri_comp, minlength=n_comp)
    best = counts.max()
    # tie-break: component holding the lowest vertex index (labels are assigned in that order)
    winner = int(np.flatnonzero(counts == best).min())
    return compact(mesh.vertices, mesh.triangles[tri_comp == winner])


# -- smoothing --------------------------------------------------------------

def _umbrella_operator(mesh: TriMesh) -> sp.csr_matrix:
    A = mesh.adjacency()
    deg = np.asarray(A.sum(axis=1)).ravel()
    return sp.diags(1.0 / np.maximum(deg, 1)) @ A


def laplacian_smooth(mesh: TriMesh, iterations: int, lam: float = 0.5) -> TriMesh:
    M = _umbrella_operator(mesh)
    v = mesh.vertices.copy()
    for _ in range(iterations):
        v += lam * (M @ v - v)
    return TriMesh(v, mesh.triangles.copy())


def taubin_smooth(mesh: TriMesh, iterations: int, lam: float = 0.5, mu: float = -0.53) -> TriMesh:
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if not (0 < lam < -mu):
        warnings.warn(f"Taubin coefficients lambda={lam}, mu={mu} outside 0 < lambda < -mu", stacklevel=2)
    if iterations == 0:
        return mesh.copy()
    M = _umbrella_operator(mesh)
    v = mesh.vertices.copy()
    for _ in range(iterations):
        v += lam * (M @ v - v)
        v += mu * (M @ v - v)
    return TriMesh(v, mesh.triangles.copy())


# -- decimation -------------------------------------------------------------

def decimate_qem(mesh: TriMesh, target_triangles: int = 1000) -> TriMesh:
    """Greedy quadric-error edge collapse down to ``target_triangles``.

    Collapses that would flip a triangle or break the link condition are
    skipped.  If the target cannot be reached a DecimationWarning is issued
    and the smallest valid mesh is returned.
    """
    if mesh.n_triangles <= target_triangles:
        return mesh.copy()
    if target_triangles < 16:
        raise ValueError("target_triangles must be >= 16")
    if not mesh.is_watertight():
        raise ValueError("decimate_qem requires a watertight mesh")
    V = mesh.vertices.copy()
    F = mesh.triangles.copy()
    valive, talive, reached = _qem.decimate_kernel(V, F, mesh.edges(), int(target_triangles))
    if not reached:
        warnings.warn(
            f"decimation stopped at {int(talive.sum())} triangles (target {target_triangles})",
            DecimationWarning,
            stacklevel=2,
        )
    return compact(V, F[talive])


# -- distances --------------------------------------------------------------

def _segment_dist2(p, a, b):
    ab = b - a
    t = np.einsum("...k,...k->...", p - a, ab) / np.maximum(np.einsum("...k,...k->...", ab, ab), 1e-300)
    t = np.clip(t, 0.0, 1.0)
    c = a + t[..., None] * ab
    return np.einsum("...k,...k->...", p - c, p - c)


def point_triangle_distance(points: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distance, points (n, 3) x triangles (m, 3, 3) -> (n, m)."""
    p = points[:, None, :]
    a, b, c = tris[None, :, 0], tris[None, :, 1], tris[None, :, 2]
    n = np.cross(b - a, c - a)
    nn = np.einsum("...k,...k->...", n, n)
    nn_safe = np.maximum(nn, 1e-300)
    dist_plane = np.einsum("...k,...k->...", p - a, n) / np.sqrt(nn_safe)
    proj = p - (dist_plane / np.sqrt(nn_safe))[..., None] * n
    # barycentric sign tests
    s0 = np.einsum("...k,...k->...", np.cross(b - a, proj - a), n)
    s1 = np.einsum("...k,...k->...", np.cross(c - b, proj - b), n)
    s2 = np.einsum("...k,...k->...", np.cross(a - c, proj - c), n)
    inside = (s0 >= 0) & (s1 >= 0) & (s2 >= 0) & (nn > 0)
    edge = np.minimum(np.minimum(_segment_dist2(p, a, b), _segment_dist2(p, b, c)), _segment_dist2(p, c, a))
    return np.where(inside, np.abs(dist_plane), np.sqrt(edge))


def point_mesh_distance(points, mesh: TriMesh, chunk: int = 64) -> np.ndarray:
    """Brute-force unsigned distance from each point to the nearest triangle."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tris = mesh.vertices[mesh.triangles]
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        out[s : s + chunk] = point_triangle_distance(points[s : s + chunk], tris).min(axis=1)
    return out


def hausdorff(a: TriMesh, b: TriMesh) -> float:
    """Symmetric Hausdorff distance measured from vertices to surfaces."""
    return float(max(point_mesh_distance(a.vertices, b).max(), point_mesh_distance(b.vertices, a).max()))


# -- primitives used by tests and demos ------------------------------------

def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    v = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriMesh(v, np.array(faces))


def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> TriMesh:
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    v = np.array([
        (x0, y0, z0), (x1, y0, z0), (x1, y1, z0), (x0, y1, z0),
        (x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1),
    ])
    f = np.array([
        (0, 2, 1), (0, 3, 2), (4, 5, 6), (4, 6, 7),
        (0, 1, 5), (0, 5, 4), (2, 3, 7), (2, 7, 6),
        (1, 2, 6), (1, 6, 5), (0, 4, 7), (0, 7, 3),
    ])
    return TriMesh(v, f)


# -- export -----------------------------------------------------------------

PALETTE = np.array(
    [
        (0, 0, 139),  # 0 dark blue: internal error
        (135, 206, 250),  # 1 light blue
        (0, 170, 0),  # 2 green
        (255, 165, 0),  # 3 orange
        (220, 0, 0),  # 4 red: external error
    ],
    dtype=np.uint8,
)


def export_ply(mesh: TriMesh, path, node_classes=None) -> None:
    """Binary little-endian PLY, with per-vertex RGB when classes are given."""
    path = Path(path)
    nv, nf = mesh.n_vertices, mesh.n_triangles
    props = ["property float x", "property float y", "property float z"]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if node_classes is not None:
        node_classes = np.asarray(node_classes, dtype=np.int64)
        if len(node_classes) != nv:
            raise ValueError(f"{len(node_classes)} classes given for {nv} vertices")
        props += ["property uchar red", "property uchar green", "property uchar blue"]
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    header = "\n".join(
        ["ply", "format binary_little_endian 1.0", f"element vertex {nv}", *props,
         f"element face {nf}", "property list uchar int vertex_indices", "end_header"]
    ) + "\n"
    vert = np.empty(nv, dtype=fields)
    for i, ax in enumerate("xyz"):
        vert[ax] = mesh.vertices[:, i]
    if node_classes is not None:
        rgb = PALETTE[node_classes]
        vert["red"], vert["green"], vert["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    face = np.empty(nf, dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    face["n"] = 3
    face["idx"] = mesh.triangles
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(vert.tobytes())
        fh.write(face.tobytes())


def read_ply(path) -> tuple[TriMesh, np.ndarray | None]:
    """Read a PLY written by `export_ply`; returns (mesh, rgb or None)."""
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    lines = raw[:end].decode("ascii").splitlines()
    if lines[0] != "ply" or lines[1] != "format binary_little_endian 1.0":
        raise ValueError("not a binary little-endian PLY")
    nv = nf = 0
    has_color = False
    for ln in lines:
        parts = ln.split()
        if parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
        elif parts[:2] == ["property", "uchar"] and parts[2] == "red":
            has_color = True
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if has_color:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    vdt = np.dtype(fields)
    vert = np.frombuffer(raw, dtype=vdt, count=nv, offset=end)
    face = np.frombuffer(raw, dtype=[("n", "u1"), ("idx", "<i4", (3,))], count=nf, offset=end + nv * vdt.itemsize)
    v = np.stack([vert["x"], vert["y"], vert["z"]], axis=1).astype(np.float64)
    rgb = np.stack([vert["red"], vert["green"], vert["blue"]], axis=1) if has_color else None
    return TriMesh(v, face["idx"].astype(np.int64)), rgb


def save_mesh_json(mesh: TriMesh, path, classes=None) -> None:
    Path(path).write_text(json.dumps(mesh.to_dict(classes)))


def load_mesh_json(path) -> tuple[TriMesh, np.ndarray | None]:
    d = json.loads(Path(path).read_text())
    classes = np.array(d["classes"]) if "classes" in d else None
    return TriMesh.from_dict(d), classes


# -- full cleanup chain -----------------------------------------------------

@dataclass(frozen=True)
class MeshConfig:
    target_triangles: int = 1000
    taubin_pre: int = 100
    taubin_post: int = 10
    taubin_lambda: float = 0.5
    taubin_mu: float = -0.53


def extract_clean_mesh(sdf: Volume, cfg: MeshConfig = MeshConfig()) -> TriMesh:
    """Marching cubes at level 0, largest component, Taubin, QEM, Taubin."""
    mesh = marching_cubes(sdf, 0.0)
    mesh = largest_component(mesh)
    mesh = taubin_smooth(mesh, cfg.taubin_pre, cfg.taubin_lambda, cfg.taubin_mu)
    mesh = decimate_qem(mesh, cfg.target_triangles)
    return taubin_smooth(mesh, cfg.taubin_post, cfg.taubin_lambda, cfg.taubin_mu)
