"""Boolean union of watertight triangle meshes.

The pipeline per pair: joint vertex weld, removal of coincident duplicate
walls, broad-phase AABB pairing over the combined face soup (a face may
cross a wall of its own mesh, not just the other operand), triangle-triangle
intersection segments, constrained retriangulation of intersected faces
(all faces along a curve reuse the same 3-D segment coordinates, so the
seams weld exactly), winding-number classification of the fragments against
the other solid and against the own solid's other lobes, and a final weld.
Coincident geometry is expected - branch meshes share their trunk wall
verbatim - and is resolved combinatorially before any arithmetic.

Sequences of meshes fold left in the given order.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.spatial import cKDTree

from .meshops import MeshError, TriMesh, concatenate, weld, winding_numbers

_WELD_TOL = 1e-6
_EDGE_TOL = 1e-7      # endpoint-to-edge snap distance
_SEG_MIN = 1e-9       # shorter intersection segments are point touches
_COINC_TOL = 1e-9     # centroid-to-surface distance that reads as coincident
_COINC_PROBE = 1e-5   # offset for the outside probe of a coincident sheet


def mesh_union(meshes) -> TriMesh:
    """Boolean union, pairwise left fold in input order."""
    meshes = list(meshes)
    if not meshes:
        raise MeshError("mesh_union needs at least one input")
    for k, m in enumerate(meshes):
        if not m.is_watertight:
            raise MeshError(f"mesh_union input {k} is not watertight")
        if not m.is_orientation_consistent:
            raise MeshError(f"mesh_union input {k} is not consistently oriented")
    out = meshes[0]
    for m in meshes[1:]:
        out = _union_pair(out, m)
    return out


# ---------------------------------------------------------------------------
# pair union


def _union_pair(A: TriMesh, B: TriMesh) -> TriMesh:
    lo_a, hi_a = A.bounds()
    lo_b, hi_b = B.bounds()
    margin = 10.0 * _WELD_TOL
    if np.any(lo_a > hi_b + margin) or np.any(lo_b > hi_a + margin):
        return concatenate([A, B])

    merged, va, vb = _joint_weld(A, B)
    faces_a = va[A.faces]
    faces_b = vb[B.faces]
    keep_a, keep_b = _drop_coincident(faces_a, faces_b)
    n_first = len(faces_a)
    faces = np.vstack([faces_a, faces_b])
    keep = np.concatenate([keep_a, keep_b])

    # both face lists go into one soup for the splitting stage: tube meshes
    # fold their own walls through each other near junctions, so a face may
    # need cutting along a wall of its OWN mesh, not just the other operand
    pairs = _broad_phase(merged, faces, keep)
    seg_data, hit_pairs = _intersection_segments(merged, faces, pairs)
    # transversal same-mesh crossings are the evidence that an operand folds
    # through itself; without any, its surface is embedded and the own-lobe
    # enclosure probe in _classify is a foregone conclusion
    self_a = any(fa < n_first and fb < n_first for fa, fb in hit_pairs)
    self_b = any(fa >= n_first and fb >= n_first for fa, fb in hit_pairs)
    # points landing on original edges must split every kept face bordering
    # that edge: coincident walls share edges verbatim after the joint weld,
    # and a one-sided split would leave a T-vertex crack
    registry = _edge_point_registry(merged, faces, seg_data)
    _distribute_edge_points(registry, faces, keep, seg_data)

    frags = _fragment_faces(merged, faces, keep, seg_data)
    frags_a, frags_b = _split_sides(frags, n_first)

    tris_a = _classify(frags_a, A, B, first_operand=True, self_intersecting=self_a)
    tris_b = _classify(frags_b, B, A, first_operand=False, self_intersecting=self_b)

    verts = np.vstack([merged] + [t["verts"] for t in (tris_a, tris_b) if len(t["verts"])])
    nm = len(merged)
    fa = tris_a["faces"].copy()
    fb = tris_b["faces"].copy()
    fb[fb >= nm] += len(tris_a["verts"])
    faces = np.vstack([fa, fb]) if len(fa) or len(fb) else np.zeros((0, 3), np.int64)
    out = weld(TriMesh(verts, faces, validate=False), tol=_WELD_TOL)
    if not out.is_watertight:
        rep_edges = int(np.sum(out.edge_face_count != 2))
        raise MeshError(f"union result not watertight ({rep_edges} bad edges)")
    return out


def _joint_weld(A: TriMesh, B: TriMesh):
    """Shared vertex table for both meshes, welded at the standard tolerance."""
    pts = np.vstack([A.vertices, B.vertices])
    tree = cKDTree(pts)
    pairs = tree.query_pairs(r=_WELD_TOL, output_type="ndarray")
    parent = np.arange(len(pts))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in np.sort(pairs, axis=1):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    reps = np.array([find(i) for i in range(len(pts))])
    uniq, inverse = np.unique(reps, return_inverse=True)
    merged = pts[uniq]
    return merged, inverse[:len(A.vertices)], inverse[len(A.vertices):]


def _face_keys(faces):
    """Cyclically normalized tuple per face plus its undirected key."""
    out = []
    for f in faces:
        k = int(np.argmin(f))
        cyc = (int(f[k]), int(f[(k + 1) % 3]), int(f[(k + 2) % 3]))
        out.append((cyc, tuple(sorted(cyc))))
    return out


def _drop_coincident(faces_a, faces_b):
    """Resolve duplicate walls between the operands combinatorially.

    Same-orientation duplicates keep the first operand's copy; anti-oriented
    pairs are interior walls between glued solids and both are dropped.
    """
    keys_a = _face_keys(faces_a)
    keys_b = _face_keys(faces_b)
    by_undirected = {}
    for i, (cyc, und) in enumerate(keys_a):
        by_undirected.setdefault(und, []).append(("a", i, cyc))
    for i, (cyc, und) in enumerate(keys_b):
        by_undirected.setdefault(und, []).append(("b", i, cyc))

    keep_a = np.ones(len(faces_a), dtype=bool)
    keep_b = np.ones(len(faces_b), dtype=bool)
    for und, entries in by_undirected.items():
        if len(entries) < 2:
            continue
        pos = [e for e in entries if e[2] == entries[0][2]]
        neg = [e for e in entries if e[2] != entries[0][2]]
        n_cancel = min(len(pos), len(neg))
        survivors = entries if n_cancel == 0 else (pos if len(pos) > len(neg) else neg)
        drop = set((s, i) for s, i, _ in entries)
        if len(pos) != len(neg):
            # keep exactly one face of the majority orientation
            side, idx, _ = survivors[0]
            drop.discard((side, idx))
        for side, idx in drop:
            if side == "a":
                keep_a[idx] = False
            else:
                keep_b[idx] = False
    return keep_a, keep_b


def _face_boxes(verts, faces):
    tri = verts[faces]
    return tri.min(axis=1), tri.max(axis=1)


def _broad_phase(verts, faces, keep, pad=1e-6):
    """Candidate intersecting face pairs over the whole soup, via a grid.

    Dropped duplicates are excluded: every dropped face has a kept bitwise
    twin, so the twin's pairs carry the same geometry.  Pairs that share two
    vertices meet exactly along that edge, which both triangulations already
    carry, so they are skipped as well.
    """
    lo_f, hi_f = _face_boxes(verts, faces)
    active = np.flatnonzero(keep)
    if len(active) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    lo = lo_f[active].min(axis=0) - pad
    sizes = (hi_f - lo_f)[active].max(axis=1)
    cell = max(float(np.median(sizes)) * 2.0, 1e-3)

    table = {}
    for i in active:
        c0 = np.floor((lo_f[i] - lo - pad) / cell).astype(int)
        c1 = np.floor((hi_f[i] - lo + pad) / cell).astype(int)
        for ix in range(c0[0], c1[0] + 1):
            for iy in range(c0[1], c1[1] + 1):
                for iz in range(c0[2], c1[2] + 1):
                    table.setdefault((ix, iy, iz), []).append(i)
    cand = set()
    for bucket in table.values():
        m = len(bucket)
        for u in range(m):
            for v in range(u + 1, m):
                cand.add((bucket[u], bucket[v]))
    if not cand:
        return np.zeros((0, 2), dtype=np.int64)
    pairs = np.array(sorted(cand), dtype=np.int64)
    # exact AABB rejection
    ok = np.all(lo_f[pairs[:, 0]] <= hi_f[pairs[:, 1]] + pad, axis=1) \
        & np.all(lo_f[pairs[:, 1]] <= hi_f[pairs[:, 0]] + pad, axis=1)
    pairs = pairs[ok]
    if len(pairs) == 0:
        return pairs
    fa = faces[pairs[:, 0]]
    fb = faces[pairs[:, 1]]
    shared = np.zeros(len(pairs), dtype=np.int64)
    for k in range(3):
        shared += np.any(fa[:, k:k + 1] == fb, axis=1)
    return pairs[shared < 2]


def _tri_interval(tri, dv, D, eps):
    """Interval of the triangle along direction D where it meets the other
    plane; entries are (t, point, provenance). provenance: ('edge', i, j)
    with local vertex slots, or ('vertex', i)."""
    hits = []
    on_plane = np.abs(dv) <= eps
    for k in range(3):
        if on_plane[k]:
            hits.append((float(tri[k] @ D), tri[k], ("vertex", k)))
    for k in range(3):
        j = (k + 1) % 3
        if on_plane[k] or on_plane[j]:
            continue
        if (dv[k] > 0) != (dv[j] > 0):
            frac = dv[k] / (dv[k] - dv[j])
            X = tri[k] + frac * (tri[j] - tri[k])
            hits.append((float(X @ D), X, ("edge", k, j)))
    if len(hits) < 2:
        return None
    hits.sort(key=lambda h: h[0])
    return hits[0], hits[-1]


def _intersection_segments(verts, faces, pairs):
    """Intersection segments per face, with exact endpoint sharing.

    Returns ({face: info}, hit_pairs) where info carries 'segments'
    (list of (P, Q)) and 'edge_points' (list of (edge-key, point)), and
    hit_pairs lists the (face, face) pairs that actually produced a
    segment (the caller uses them to tell same-mesh crossings apart).
    """
    out = {}
    hit_pairs = []
    if len(pairs) == 0:
        return out, hit_pairs

    tri_a = verts[faces[pairs[:, 0]]]
    tri_b = verts[faces[pairs[:, 1]]]
    n_a = np.cross(tri_a[:, 1] - tri_a[:, 0], tri_a[:, 2] - tri_a[:, 0])
    n_b = np.cross(tri_b[:, 1] - tri_b[:, 0], tri_b[:, 2] - tri_b[:, 0])
    d_a = np.einsum("ij,ij->i", n_a, tri_a[:, 0])
    d_b = np.einsum("ij,ij->i", n_b, tri_b[:, 0])
    # signed distances scaled by plane normal length; tolerance follows scale
    dv_a = np.einsum("ik,ijk->ij", n_b, tri_a) - d_b[:, None]
    dv_b = np.einsum("ik,ijk->ij", n_a, tri_b) - d_a[:, None]
    scale_a = np.linalg.norm(n_b, axis=1) * 1e-9 + 1e-300
    scale_b = np.linalg.norm(n_a, axis=1) * 1e-9 + 1e-300

    opp_a = np.all(dv_a > scale_a[:, None], axis=1) | np.all(dv_a < -scale_a[:, None], axis=1)
    opp_b = np.all(dv_b > scale_b[:, None], axis=1) | np.all(dv_b < -scale_b[:, None], axis=1)
    coplanar = np.all(np.abs(dv_a) <= scale_a[:, None], axis=1)
    alive = ~(opp_a | opp_b | coplanar)

    for p in np.flatnonzero(alive):
        fa, fb = int(pairs[p, 0]), int(pairs[p, 1])
        D = np.cross(n_a[p], n_b[p])
        if np.linalg.norm(D) < 1e-14 * max(np.linalg.norm(n_a[p]) * np.linalg.norm(n_b[p]), 1e-300):
            continue
        int_a = _tri_interval(tri_a[p], dv_a[p], D, scale_a[p])
        int_b = _tri_interval(tri_b[p], dv_b[p], D, scale_b[p])
        if int_a is None or int_b is None:
            continue
        lo = int_a[0] if int_a[0][0] >= int_b[0][0] else int_b[0]
        lo_side = "a" if lo is int_a[0] else "b"
        hi = int_a[1] if int_a[1][0] <= int_b[1][0] else int_b[1]
        hi_side = "a" if hi is int_a[1] else "b"
        if hi[0] - lo[0] <= _SEG_MIN * max(np.linalg.norm(D), 1e-300):
            continue
        P, Q = lo[1].copy(), hi[1].copy()
        if np.linalg.norm(Q - P) <= _SEG_MIN:
            continue
        hit_pairs.append((fa, fb))
        for face in (fa, fb):
            info = out.setdefault(face, {"segments": [], "edge_points": []})
            info["segments"].append((P, Q))
        # endpoint provenance: register on the producing face's edge so the
        # neighbor face across that edge splits identically
        for bound, bside in ((lo, lo_side), (hi, hi_side)):
            prov = bound[2]
            if prov[0] != "edge":
                continue
            face = fa if bside == "a" else fb
            g0 = int(faces[face][prov[1]])
            g1 = int(faces[face][prov[2]])
            key = (min(g0, g1), max(g0, g1))
            out.setdefault(face, {"segments": [], "edge_points": []})
            out[face]["edge_points"].append((key, bound[1]))
    return out, hit_pairs


# ---------------------------------------------------------------------------
# constrained retriangulation of a single face


class _FaceTriangulation:
    def __init__(self, corners3d, eps_rel=1e-9):
        v0, v1, v2 = corners3d
        n = np.cross(v1 - v0, v2 - v0)
        self.normal = n / np.linalg.norm(n)
        self.origin = v0
        self.u = (v1 - v0) / np.linalg.norm(v1 - v0)
        self.w = np.cross(self.normal, self.u)
        self.pts3d = [np.asarray(v, dtype=np.float64) for v in corners3d]
        self.pts2d = [self._to2d(v) for v in corners3d]
        self.tris = [(0, 1, 2)]
        diag = max(np.linalg.norm(v1 - v0), np.linalg.norm(v2 - v0),
                   np.linalg.norm(v2 - v1))
        self.eps = eps_rel * diag
        self.snap = 1e-7

    def _to2d(self, p):
        d = p - self.origin
        return np.array([d @ self.u, d @ self.w])

    def _area2(self, a, b, c):
        pa, pb, pc = self.pts2d[a], self.pts2d[b], self.pts2d[c]
        return (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0])

    def _find_existing(self, q2):
        for i, p in enumerate(self.pts2d):
            if abs(p[0] - q2[0]) <= self.snap and abs(p[1] - q2[1]) <= self.snap:
                if np.hypot(p[0] - q2[0], p[1] - q2[1]) <= self.snap:
                    return i
        return None

    def _locate(self, q2):
        """(triangle index, 'in') or (triangle index, ('edge', a, b)) or None."""
        for ti, (a, b, c) in enumerate(self.tris):
            s0 = _cross2(self.pts2d[a], self.pts2d[b], q2)
            s1 = _cross2(self.pts2d[b], self.pts2d[c], q2)
            s2 = _cross2(self.pts2d[c], self.pts2d[a], q2)
            tol = self.eps * 10
            if s0 >= -tol and s1 >= -tol and s2 >= -tol:
                if s0 <= tol and _between(self.pts2d[a], self.pts2d[b], q2, tol):
                    return ti, ("edge", a, b)
                if s1 <= tol and _between(self.pts2d[b], self.pts2d[c], q2, tol):
                    return ti, ("edge", b, c)
                if s2 <= tol and _between(self.pts2d[c], self.pts2d[a], q2, tol):
                    return ti, ("edge", c, a)
                return ti, "in"
        return None

    def insert(self, p3, on_edge=None):
        """Insert a 3-D point; returns its vertex index or None if outside.

        on_edge: optional (ia, ib) original-corner pair the point is known to
        lie on; its 2-D position is snapped onto that edge for consistency.
        """
        q2 = self._to2d(np.asarray(p3, dtype=np.float64))
        if on_edge is not None:
            a2, b2 = self.pts2d[on_edge[0]], self.pts2d[on_edge[1]]
            ab = b2 - a2
            t = float(np.clip(((q2 - a2) @ ab) / (ab @ ab), 0.0, 1.0))
            q2 = a2 + t * ab
        existing = self._find_existing(q2)
        if existing is not None:
            return existing
        loc = self._locate(q2)
        if loc is None and on_edge is None:
            # rounding can push a rim point epsilon outside the face; pull it
            # onto the nearest original edge when it is plausibly on the rim
            best = None
            for ea, eb in ((0, 1), (1, 2), (2, 0)):
                a2, b2 = self.pts2d[ea], self.pts2d[eb]
                ab = b2 - a2
                L2 = float(ab @ ab)
                if L2 <= 0:
                    continue
                t = float(np.clip(((q2 - a2) @ ab) / L2, 0.0, 1.0))
                c2 = a2 + t * ab
                d = float(np.hypot(q2[0] - c2[0], q2[1] - c2[1]))
                if best is None or d < best[0]:
                    best = (d, c2)
            if best is not None and best[0] <= self.snap:
                q2 = best[1]
                existing = self._find_existing(q2)
                if existing is not None:
                    return existing
                loc = self._locate(q2)
        if loc is None:
            return None
        ti, kind = loc
        idx = len(self.pts3d)
        self.pts3d.append(np.asarray(p3, dtype=np.float64))
        self.pts2d.append(q2)
        if kind == "in":
            a, b, c = self.tris[ti]
            self.tris[ti] = (a, b, idx)
            self.tris.append((b, c, idx))
            self.tris.append((c, a, idx))
        else:
            _, ea, eb = kind
            # split every triangle bordering edge (ea, eb)
            new_tris = []
            for (a, b, c) in self.tris:
                edges = ((a, b, c), (b, c, a), (c, a, b))
                split = False
                for (x, y, z) in edges:
                    if {x, y} == {ea, eb}:
                        new_tris.append((x, idx, z))
                        new_tris.append((idx, y, z))
                        split = True
                        break
                if not split:
                    new_tris.append((a, b, c))
            self.tris = new_tris
        return idx

    def _edge_set(self):
        es = set()
        for (a, b, c) in self.tris:
            es.add((min(a, b), max(a, b)))
            es.add((min(b, c), max(b, c)))
            es.add((min(c, a), max(c, a)))
        return es

    def enforce_edge(self, ia, ib):
        """Flip until the constraint edge exists; False when stuck.

        A constraint that passes through an existing vertex has no strictly
        crossing edge, so when flipping stalls the segment is split at a
        vertex lying on it and both halves are enforced instead.
        """
        stack = [(ia, ib)]
        ok = True
        guard = 0
        while stack:
            guard += 1
            if guard > 500:
                return False
            a, b = stack.pop()
            if a == b:
                continue
            recovered = False
            for _ in range(200):
                if (min(a, b), max(a, b)) in self._edge_set():
                    recovered = True
                    break
                if not self._flip_one_crossing(a, b):
                    break
            if recovered:
                continue
            w = self._vertex_on_segment(a, b)
            if w is not None:
                stack.append((a, w))
                stack.append((w, b))
            else:
                ok = False
        return ok

    def _vertex_on_segment(self, ia, ib):
        """Index of a vertex strictly between ia and ib on their segment."""
        pa, pb = self.pts2d[ia], self.pts2d[ib]
        ab = pb - pa
        L2 = float(ab @ ab)
        if L2 <= 0:
            return None
        band = max(self.eps * 10, self.snap)
        best = None
        best_d = band
        for i in range(len(self.pts2d)):
            if i == ia or i == ib:
                continue
            t = float(((self.pts2d[i] - pa) @ ab) / L2)
            if t <= 1e-9 or t >= 1.0 - 1e-9:
                continue
            d = abs(_cross2(pa, pb, self.pts2d[i])) / np.sqrt(L2)
            if d <= best_d:
                best_d = d
                best = i
        return best

    def _flip_one_crossing(self, ia, ib):
        pa, pb = self.pts2d[ia], self.pts2d[ib]
        # adjacency: edge -> list of (triangle index, opposite vertex)
        adj = {}
        for ti, (a, b, c) in enumerate(self.tris):
            for x, y, z in ((a, b, c), (b, c, a), (c, a, b)):
                adj.setdefault((min(x, y), max(x, y)), []).append((ti, z))
        for (x, y), tris in adj.items():
            if len(tris) != 2 or ia in (x, y) or ib in (x, y):
                continue
            if not _segments_cross(pa, pb, self.pts2d[x], self.pts2d[y], self.eps):
                continue
            (t1, o1), (t2, o2) = tris
            # flip only strictly convex quads: o1 and o2 on opposite sides
            # of (x, y), and neither x nor y collinear with (o1, o2) - a
            # collinear flip would drape the new edge across a vertex
            s1 = _cross2(self.pts2d[x], self.pts2d[y], self.pts2d[o1])
            s2 = _cross2(self.pts2d[x], self.pts2d[y], self.pts2d[o2])
            lim_xy = self.eps * np.hypot(*(self.pts2d[y] - self.pts2d[x]))
            if s1 * s2 >= 0 or min(abs(s1), abs(s2)) <= lim_xy:
                continue
            q1 = _cross2(self.pts2d[o1], self.pts2d[o2], self.pts2d[x])
            q2 = _cross2(self.pts2d[o1], self.pts2d[o2], self.pts2d[y])
            lim_oo = self.eps * np.hypot(*(self.pts2d[o2] - self.pts2d[o1]))
            if q1 * q2 >= 0 or min(abs(q1), abs(q2)) <= lim_oo:
                continue
            # keep both replacements counterclockwise; _locate relies on it
            na = (x, o1, o2)
            if self._area2(*na) < 0:
                na = (x, o2, o1)
            nb = (y, o1, o2)
            if self._area2(*nb) < 0:
                nb = (y, o2, o1)
            self.tris[t1] = na
            self.tris[t2] = nb
            return True
        return False

    def emit(self):
        """Sub-triangles as 3-D vertex triples, oriented like the parent."""
        out = []
        for (a, b, c) in self.tris:
            if self._area2(a, b, c) <= 0:
                a, b = b, a
            out.append((self.pts3d[a], self.pts3d[b], self.pts3d[c]))
        return out


def _cross2(a, b, q):
    return (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0])


def _between(a, b, q, tol):
    lo = np.minimum(a, b) - tol
    hi = np.maximum(a, b) + tol
    return bool(np.all(q >= lo) and np.all(q <= hi))


def _segments_cross(p0, p1, q0, q1, eps):
    d0 = _cross2(p0, p1, q0)
    d1 = _cross2(p0, p1, q1)
    d2 = _cross2(q0, q1, p0)
    d3 = _cross2(q0, q1, p1)
    return (d0 > eps) != (d1 > eps) and abs(d0) > eps and abs(d1) > eps \
        and (d2 > eps) != (d3 > eps) and abs(d2) > eps and abs(d3) > eps


def _seg_seg_point(p0, p1, q0, q1):
    d = (p1[0] - p0[0]) * (q1[1] - q0[1]) - (p1[1] - p0[1]) * (q1[0] - q0[0])
    if abs(d) < 1e-300:
        return None
    t = ((q0[0] - p0[0]) * (q1[1] - q0[1]) - (q0[1] - p0[1]) * (q1[0] - q0[0])) / d
    return t


def _fragment_faces(verts, faces, keep, face_info):
    """Replace intersected faces by their constrained retriangulations.

    Returns dict with 'faces' (indices into verts for untouched faces, -1
    rows for replaced ones), plus fragment vertex triples and their parent
    normals for classification.
    """
    replaced = {}
    frag_tris = []
    frag_normals = []
    frag_parent = []
    for face, info in sorted(face_info.items()):
        if not keep[face]:
            continue
        f = faces[face]
        corners = [verts[f[0]], verts[f[1]], verts[f[2]]]
        ft = _FaceTriangulation(corners)
        # boundary points first, snapped to their edges
        slot_of = {(min(int(f[k]), int(f[(k + 1) % 3])),
                    max(int(f[k]), int(f[(k + 1) % 3]))): (k, (k + 1) % 3)
                   for k in range(3)}
        for key, pt in info["edge_points"]:
            slot = slot_of.get(key)
            if slot is not None:
                ft.insert(pt, on_edge=slot)
        # pre-split constraint segments at mutual crossings
        segs2d = [(ft._to2d(P), ft._to2d(Q), P, Q) for P, Q in info["segments"]]
        pieces = []
        for i, (p2, q2, P, Q) in enumerate(segs2d):
            cuts = [0.0, 1.0]
            for j, (r2, s2, _, _) in enumerate(segs2d):
                if i == j:
                    continue
                if _segments_cross(p2, q2, r2, s2, ft.eps):
                    t = _seg_seg_point(p2, q2, r2, s2)
                    if t is not None and 1e-9 < t < 1 - 1e-9:
                        cuts.append(float(t))
            cuts = sorted(set(cuts))
            for t0, t1 in zip(cuts[:-1], cuts[1:]):
                A3 = P + t0 * (Q - P)
                B3 = P + t1 * (Q - P)
                pieces.append((A3, B3))
        handles = []
        for A3, B3 in pieces:
            ia = ft.insert(A3)
            ib = ft.insert(B3)
            if ia is not None and ib is not None and ia != ib:
                handles.append((ia, ib))
        for ia, ib in handles:
            if not ft.enforce_edge(ia, ib):
                warnings.warn("constraint edge could not be recovered; "
                              "fragment boundary may be approximate", stacklevel=2)
        tris3 = ft.emit()
        frag_tris.extend(tris3)
        frag_normals.extend([ft.normal] * len(tris3))
        frag_parent.extend([face] * len(tris3))
        replaced[face] = True

    untouched = [fi for fi in range(len(faces)) if keep[fi] and fi not in replaced]
    return {
        "verts_table": verts,
        "untouched": np.asarray(untouched, dtype=np.int64),
        "faces": faces,
        "frag_tris": frag_tris,
        "frag_normals": frag_normals,
        "frag_parent": np.asarray(frag_parent, dtype=np.int64),
    }


def _split_sides(frags, n_first):
    """Partition soup fragments back into their operands for classification."""
    parent = frags["frag_parent"]
    out = []
    for first in (True, False):
        if first:
            u_sel = frags["untouched"][frags["untouched"] < n_first]
            f_sel = np.flatnonzero(parent < n_first)
        else:
            u_sel = frags["untouched"][frags["untouched"] >= n_first]
            f_sel = np.flatnonzero(parent >= n_first)
        out.append({
            "verts_table": frags["verts_table"],
            "faces": frags["faces"],
            "untouched": u_sel,
            "frag_tris": [frags["frag_tris"][k] for k in f_sel],
            "frag_normals": [frags["frag_normals"][k] for k in f_sel],
        })
    return out


def _edge_point_registry(verts, faces, seg_data):
    """Collect intersection endpoints that land on original mesh edges.

    Keys are undirected vertex-id pairs in the merged table.  An edge that
    several faces share verbatim (within one mesh or across the two)
    therefore registers each point once, and every bordering face can split
    on it.
    """
    registry = {}
    for face, info in seg_data.items():
        for key, pt in info["edge_points"]:
            registry.setdefault(key, []).append(pt)
        for P, Q in info["segments"]:
            for pt in (P, Q):
                key = _near_face_edge(verts, faces[face], pt)
                if key is not None:
                    registry.setdefault(key, []).append(pt)
    return registry


def _distribute_edge_points(registry, faces, keep, face_info):
    """Hand every registered edge point to each kept face along that edge."""
    if not registry:
        return
    edge_to_faces = {}
    for fi in range(len(faces)):
        if not keep[fi]:
            continue
        f = faces[fi]
        for k in range(3):
            a, b = int(f[k]), int(f[(k + 1) % 3])
            edge_to_faces.setdefault((min(a, b), max(a, b)), []).append(fi)
    for key, pts in registry.items():
        for fi in edge_to_faces.get(key, ()):
            info = face_info.setdefault(fi, {"segments": [], "edge_points": []})
            for pt in pts:
                info["edge_points"].append((key, pt))


def _near_face_edge(verts, face, pt, tol=_EDGE_TOL):
    """Undirected global edge key when pt lies within tol of a face edge."""
    best = None
    best_d = tol
    for k in range(3):
        a, b = int(face[k]), int(face[(k + 1) % 3])
        pa, pb = verts[a], verts[b]
        ab = pb - pa
        L2 = float(ab @ ab)
        if L2 <= 0:
            continue
        t = float(np.clip(((pt - pa) @ ab) / L2, 0.0, 1.0))
        d = float(np.linalg.norm(pt - (pa + t * ab)))
        if d < best_d:
            best_d = d
            best = (min(a, b), max(a, b))
    return best


# ---------------------------------------------------------------------------
# classification


def _closest_on_tris(P, A, B, C):
    """Closest point on triangle (A, B, C) to P, elementwise over rows."""
    ab = B - A
    ac = C - A
    ap = P - A
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = P - B
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = P - C
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    out = np.empty_like(P)
    done = np.zeros(len(P), dtype=bool)

    m = (d1 <= 0) & (d2 <= 0)
    out[m] = A[m]
    done |= m
    m = ~done & (d3 >= 0) & (d4 <= d3)
    out[m] = B[m]
    done |= m
    m = ~done & (d6 >= 0) & (d5 <= d6)
    out[m] = C[m]
    done |= m
    m = ~done & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    t = d1 / np.where(np.abs(d1 - d3) < 1e-300, 1e-300, d1 - d3)
    out[m] = A[m] + t[m, None] * ab[m]
    done |= m
    m = ~done & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    t = d2 / np.where(np.abs(d2 - d6) < 1e-300, 1e-300, d2 - d6)
    out[m] = A[m] + t[m, None] * ac[m]
    done |= m
    m = ~done & (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    den = (d4 - d3) + (d5 - d6)
    t = (d4 - d3) / np.where(np.abs(den) < 1e-300, 1e-300, den)
    out[m] = B[m] + t[m, None] * (C[m] - B[m])
    done |= m
    m = ~done
    den = va + vb + vc
    den = np.where(np.abs(den) < 1e-300, 1e-300, den)
    v = vb / den
    w = vc / den
    out[m] = A[m] + v[m, None] * ab[m] + w[m, None] * ac[m]
    return out


def _nearest_surface(other: TriMesh, pts, k=48):
    """Distance, signed offset, and local normal of the nearest surface point.

    Candidate faces come from the k nearest face centroids; the exact
    point-triangle distance picks the winner among them.
    """
    tri = other.vertices[other.faces]
    cents = tri.mean(axis=1)
    kq = min(k, len(cents))
    tree = cKDTree(cents)
    _, idx = tree.query(pts, k=kq)
    idx = idx.reshape(len(pts), kq)
    flat = idx.reshape(-1)
    P = np.repeat(pts, kq, axis=0)
    T = tri[flat]
    Q = _closest_on_tris(P, T[:, 0], T[:, 1], T[:, 2])
    d = np.linalg.norm(P - Q, axis=1).reshape(len(pts), kq)
    j = np.argmin(d, axis=1)
    rows = np.arange(len(pts))
    best_face = idx[rows, j]
    best_q = Q.reshape(len(pts), kq, 3)[rows, j]
    n_near = other.face_normals[best_face]
    signed = np.einsum("ij,ij->i", pts - best_q, n_near)
    return d[rows, j], signed, n_near


def _classify(frags, own: TriMesh, other: TriMesh, first_operand: bool,
              self_intersecting: bool = True):
    """Keep/drop fragments against the other solid and the own solid.

    Fragments coincident with the other surface are resolved by an
    orientation vote (same facing: the first operand keeps its copy;
    opposite facing: both sides drop).  Everything else is decided by the
    winding number of the other solid at the fragment centroid.  A fragment
    buried inside another lobe of its OWN solid is dropped as well: tube
    meshes can fold their walls through themselves near junctions, and
    those folds are interior to the union.  The own-lobe probe only runs
    when the caller saw same-mesh crossings (self_intersecting); on an
    embedded surface the probe point sits in the exterior by construction
    and the check cannot fire.
    """
    verts_table = frags["verts_table"]
    faces = frags["faces"]

    lo, hi = other.bounds()
    lo = lo - 1.0
    hi = hi + 1.0

    # assemble candidate list: untouched whole faces + split fragments
    whole = frags["untouched"]
    whole_pts = verts_table[faces[whole]]
    whole_centroids = whole_pts.mean(axis=1) if len(whole) else np.zeros((0, 3))
    e1 = whole_pts[:, 1] - whole_pts[:, 0] if len(whole) else np.zeros((0, 3))
    e2 = whole_pts[:, 2] - whole_pts[:, 0] if len(whole) else np.zeros((0, 3))
    whole_normals = np.cross(e1, e2)
    nrm = np.linalg.norm(whole_normals, axis=1, keepdims=True)
    whole_normals = whole_normals / np.maximum(nrm, 1e-300)

    frag_tris = frags["frag_tris"]
    frag_centroids = (np.array([ (a + b + c) / 3.0 for a, b, c in frag_tris])
                      if frag_tris else np.zeros((0, 3)))
    frag_normals = (np.array(frags["frag_normals"])
                    if frag_tris else np.zeros((0, 3)))

    centroids = np.vstack([whole_centroids, frag_centroids])
    normals = np.vstack([whole_normals, frag_normals])
    n_items = len(centroids)
    keep = np.zeros(n_items, dtype=bool)

    inside_box = np.all((centroids >= lo) & (centroids <= hi), axis=1)
    keep[~inside_box] = True  # cannot be inside the other solid

    todo = np.flatnonzero(inside_box)
    if len(todo):
        dist, _, n_near = _nearest_surface(other, centroids[todo])
        same_facing = np.einsum("ij,ij->i", normals[todo], n_near) >= 0.0
        coinc = dist <= _COINC_TOL
        if np.any(coinc):
            # the fragment lies ON the other surface; it survives only when
            # the sheets face the same way, this is the first operand, and
            # no further lobe of the other solid encloses the spot (probe
            # just outside the shared sheet)
            sel = todo[coinc]
            probe = centroids[sel] + _COINC_PROBE * n_near[coinc]
            w_out = winding_numbers(other, probe)
            keep[sel] = bool(first_operand) & same_facing[coinc] & (w_out < 0.25)
        off = np.flatnonzero(~coinc)
        if len(off):
            w = winding_numbers(other, centroids[todo[off]])
            amb = (w > 0.25) & (w < 0.75)
            if np.any(amb):
                c = centroids[todo[off[int(np.flatnonzero(amb)[0])]]]
                raise MeshError("union classification failed near "
                                f"({c[0]:.3f}, {c[1]:.3f}, {c[2]:.3f}): "
                                "winding number stayed in the ambiguous band")
            keep[todo[off]] = w < 0.5

    if n_items and self_intersecting:
        # probe just outside the sheet: anything still enclosed there sits
        # inside a second lobe of its own solid and is interior to the union
        live = np.flatnonzero(keep)
        if len(live):
            w_self = winding_numbers(own, centroids[live] + _COINC_PROBE * normals[live])
            keep[live] = w_self < 0.5

    # build output arrays: untouched faces reference the shared table,
    # fragments append new vertices
    kept_whole = whole[keep[:len(whole)]]
    out_faces = [faces[kept_whole]] if len(kept_whole) else []
    new_verts = []
    new_faces = []
    base = len(verts_table)
    for k, (a, b, c) in enumerate(frag_tris):
        if not keep[len(whole) + k]:
            continue
        i = base + len(new_verts)
        new_verts.extend([a, b, c])
        new_faces.append((i, i + 1, i + 2))
    all_faces = np.vstack(out_faces + [np.asarray(new_faces, dtype=np.int64).reshape(-1, 3)]) \
        if (out_faces or new_faces) else np.zeros((0, 3), dtype=np.int64)
    return {
        "verts": np.asarray(new_verts, dtype=np.float64).reshape(-1, 3),
        "faces": all_faces,
    }
