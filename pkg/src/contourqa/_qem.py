"""Numba kernel for greedy quadric-error edge collapse on closed triangle meshes."""
from __future__ import annotations

import heapq

import numpy as np
from numba import njit

CAP = 64  # max triangles incident to one vertex
DET_EPS = 1e-12


@njit(cache=True)
def _plane_quadric(p0, p1, p2):
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.sqrt((n * n).sum())
    K = np.zeros((4, 4))
    if norm == 0.0:
        return K
    n = n / norm
    h = np.empty(4)
    h[:3] = n
    h[3] = -(n * p0).sum()
    for i in range(4):
        for j in range(4):
            K[i, j] = h[i] * h[j]
    return K


@njit(cache=True)
def _quad_cost(Q, x, y, z):
    v = np.array([x, y, z, 1.0])
    c = 0.0
    for i in range(4):
        for j in range(4):
            c += v[i] * Q[i, j] * v[j]
    return c


@njit(cache=True)
def _edge_cost(Qs, V, a, b):
    Q = Qs[a] + Qs[b]
    A = Q[:3, :3]
    det = (
        A[0, 0] * (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
        - A[0, 1] * (A[1, 0] * A[2, 2] - A[1, 2] * A[2, 0])
        + A[0, 2] * (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0])
    )
    if abs(det) >= DET_EPS:
        p = np.linalg.solve(A, -Q[:3, 3])
        return _quad_cost(Q, p[0], p[1], p[2]), p
    best = np.inf
    bp = V[a].copy()
    for k in range(3):
        if k == 0:
            c = V[a]
        elif k == 1:
            c = V[b]
        else:
            c = 0.5 * (V[a] + V[b])
        cost = _quad_cost(Q, c[0], c[1], c[2])
        if cost < best:
            best = cost
            bp = c.copy()
    return best, bp


@njit(cache=True)
def _neighbors(F, vt, nt, v, buf):
    cnt = 0
    for s in range(nt[v]):
        t = vt[v, s]
        for c in range(3):
            u = F[t, c]
            if u == v:
                continue
            seen = False
            for q in range(cnt):
                if buf[q] == u:
                    seen = True
                    break
            if not seen:
                buf[cnt] = u
                cnt += 1
    return cnt


@njit(cache=True)
def _remove_incident(vt, nt, v, t):
    for s in range(nt[v]):
        if vt[v, s] == t:
            vt[v, s] = vt[v, nt[v] - 1]
            nt[v] -= 1
            return


@njit(cache=True)
def _tri_normal(p0, p1, p2):
    return np.cross(p1 - p0, p2 - p0)


@njit(cache=True)
def _valid_collapse(V, F, vt, nt, a, b, p, shared, nbuf_a, nbuf_b):
    # triangles containing both a and b
    ns = 0
    for s in range(nt[a]):
        t = vt[a, s]
        if F[t, 0] == b or F[t, 1] == b or F[t, 2] == b:
            if ns < 2:
                shared[ns] = t
            ns += 1
    if ns != 2:
        return False
    if nt[a] + nt[b] - 4 > CAP:
        return False
    # link condition: common neighbours are exactly the two opposite vertices
    na = _neighbors(F, vt, nt, a, nbuf_a)
    nb = _neighbors(F, vt, nt, b, nbuf_b)
    common = 0
    for i in range(na):
        for j in range(nb):
            if nbuf_a[i] == nbuf_b[j]:
                common += 1
    if common != 2:
        return False
    # normal flip guard on every surviving triangle around a or b
    for side in range(2):
        v = a if side == 0 else b
        for s in range(nt[v]):
            t = vt[v, s]
            if t == shared[0] or t == shared[1]:
                continue
            p0 = V[F[t, 0]]
            p1 = V[F[t, 1]]
            p2 = V[F[t, 2]]
            n0 = _tri_normal(p0, p1, p2)
            q0 = p if (F[t, 0] == a or F[t, 0] == b) else p0
            q1 = p if (F[t, 1] == a or F[t, 1] == b) else p1
            q2 = p if (F[t, 2] == a or F[t, 2] == b) else p2
            n1 = _tri_normal(q0, q1, q2)
            if (n0 * n1).sum() < 0.0:
                return False
    return True


@njit(cache=True)
def decimate_kernel(V, F, edges, target):
    """Collapse edges of (V, F) in place until at most ``target`` triangles remain.

    Returns (vertex_alive, triangle_alive, reached_target).
    """
    nv = V.shape[0]
    nf = F.shape[0]
    vt = np.empty((nv, CAP), dtype=np.int64)
    nt = np.zeros(nv, dtype=np.int64)
    for t in range(nf):
        for c in range(3):
            v = F[t, c]
            if nt[v] >= CAP:
                return np.ones(nv, dtype=np.bool_), np.ones(nf, dtype=np.bool_), False
            vt[v, nt[v]] = t
            nt[v] += 1

    Qs = np.zeros((nv, 4, 4))
    for t in range(nf):
        K = _plane_quadric(V[F[t, 0]], V[F[t, 1]], V[F[t, 2]])
        for c in range(3):
            Qs[F[t, c]] += K

    valive = np.ones(nv, dtype=np.bool_)
    talive = np.ones(nf, dtype=np.bool_)
    ver = np.zeros(nv, dtype=np.int64)

    heap = [(0.0, np.int64(0), np.int64(0), np.int64(0), np.int64(0))]
    heap.pop()
    for e in range(edges.shape[0]):
        a = edges[e, 0]
        b = edges[e, 1]
        cost, _ = _edge_cost(Qs, V, a, b)
        heap.append((cost, a, b, np.int64(0), np.int64(0)))
    heapq.heapify(heap)

    shared = np.empty(2, dtype=np.int64)
    nbuf_a = np.empty(3 * CAP, dtype=np.int64)
    nbuf_b = np.empty(3 * CAP, dtype=np.int64)
    nalive = nf
    while nalive > target and len(heap) > 0:
        cost, a, b, va, vb = heapq.heappop(heap)
        if not valive[a] or not valive[b] or ver[a] != va or ver[b] != vb:
            continue
        _, p = _edge_cost(Qs, V, a, b)
        if not _valid_collapse(V, F, vt, nt, a, b, p, shared, nbuf_a, nbuf_b):
            continue
        for k in range(2):
            t = shared[k]
            talive[t] = False
            for c in range(3):
                _remove_incident(vt, nt, F[t, c], t)
        for s in range(nt[b]):
            t = vt[b, s]
            for c in range(3):
                if F[t, c] == b:
                    F[t, c] = a
            vt[a, nt[a]] = t
            nt[a] += 1
        nt[b] = 0
        V[a] = p
        Qs[a] += Qs[b]
        valive[b] = False
        ver[a] += 1
        ver[b] += 1
        nalive -= 2
        nn = _neighbors(F, vt, nt, a, nbuf_a)
        for i in range(nn):
            u = nbuf_a[i]
            c2, _ = _edge_cost(Qs, V, a, u)
            heapq.heappush(heap, (c2, a, u, ver[a], ver[u]))
    return valive, talive, nalive <= target
