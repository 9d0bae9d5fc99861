"""Graph-convolutional mesh deformation: icosphere, losses, and the fit loop.

The deformable model starts from a subdivided icosahedron and moves its
vertices to minimize a weighted sum of chamfer distance to a target point
cloud plus Laplacian, normal-consistency and edge regularizers. All
gradients are analytic; optimization is Adam. Two modes exist: direct
per-vertex offsets, and a small graph-convolutional network predicting the
offsets from vertex features, with symmetric-normalized propagation
V' = D^{-1/2} (A + I) D^{-1/2} V Theta.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .meshops import MeshError, TriMesh
from .volume import FeatureGrid, sample_trilinear


class DeformError(ValueError):
    pass


# ---------------------------------------------------------------------------
# graph containers


@dataclass(eq=False)
class MeshGraph:
    """A mesh (or bare graph) with per-vertex features and self-looped adjacency.

    adjacency is the symmetric hat matrix A + I stored sparse; degrees are
    its row sums. For bare graphs (used by graph-only operations) mesh may
    be None.
    """

    mesh: TriMesh | None
    features: np.ndarray
    adjacency: sparse.csr_matrix = field(repr=False)
    degrees: np.ndarray = field(repr=False)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[:, None]
        n = self.adjacency.shape[0]
        if feats.shape[0] != n:
            raise DeformError(f"feature count {feats.shape[0]} != vertex count {n}")
        if self.adjacency.shape[0] != self.adjacency.shape[1]:
            raise DeformError("adjacency must be square")
        asym = self.adjacency - self.adjacency.T
        if asym.nnz and np.max(np.abs(asym.data)) > 0:
            raise DeformError("adjacency must be symmetric")
        if np.any(self.adjacency.diagonal() == 0):
            raise DeformError("adjacency must include self-relations (A + I)")
        deg = np.asarray(self.degrees, dtype=np.float64).reshape(-1)
        row_sums = np.asarray(self.adjacency.sum(axis=1)).reshape(-1)
        if deg.shape[0] != n or not np.allclose(deg, row_sums):
            raise DeformError("degrees inconsistent with adjacency row sums")
        if np.any(deg <= 0):
            raise DeformError("degrees must be strictly positive")
        self.features = feats

    @property
    def n_vertices(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def from_mesh(cls, mesh: TriMesh, features: np.ndarray | None = None) -> "MeshGraph":
        if features is None:
            features = mesh.vertices
        adj = _hat_adjacency(len(mesh.vertices), mesh.edges)
        deg = np.asarray(adj.sum(axis=1)).reshape(-1)
        return cls(mesh, features, adj, deg)

    @classmethod
    def from_edges(cls, n: int, edges, features: np.ndarray) -> "MeshGraph":
        """Bare graph without mesh geometry (graph-only operations)."""
        adj = _hat_adjacency(n, np.asarray(edges, dtype=np.int64).reshape(-1, 2))
        deg = np.asarray(adj.sum(axis=1)).reshape(-1)
        return cls(None, features, adj, deg)


def _hat_adjacency(n: int, edges: np.ndarray) -> sparse.csr_matrix:
    if len(edges):
        i = np.concatenate([edges[:, 0], edges[:, 1], np.arange(n)])
        j = np.concatenate([edges[:, 1], edges[:, 0], np.arange(n)])
    else:
        i = j = np.arange(n)
    data = np.ones(len(i))
    return sparse.coo_matrix((data, (i, j)), shape=(n, n)).tocsr()


@dataclass(frozen=True)
class GraphConvLayer:
    theta: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.theta, dtype=np.float64)
        if t.ndim != 2 or not np.all(np.isfinite(t)):
            raise DeformError("theta must be a finite C_in x C_out matrix")
        object.__setattr__(self, "theta", t)
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if b.shape[0] != t.shape[1] or not np.all(np.isfinite(b)):
                raise DeformError("bias must be finite with length C_out")
            object.__setattr__(self, "bias", b)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.01
    lambda4: float = 0.1

    def __post_init__(self):
        w = (self.lambda1, self.lambda2, self.lambda3, self.lambda4)
        if any(x < 0 for x in w):
            raise DeformError("loss weights must be non-negative")
        if not any(x > 0 for x in w):
            raise DeformError("at least one loss weight must be positive")


@dataclass(frozen=True)
class FitConfig:
    iters_stage1: int = 500
    iters_stage2: int = 300
    unpool_at: tuple[int, ...] = (150, 300)
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    mode: str = "direct-vertex"
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    hidden: int = 64
    layers: int = 3

    def __post_init__(self):
        if self.iters_stage1 < 0 or self.iters_stage2 < 0:
            raise DeformError("iteration counts must be >= 0")
        if self.lr <= 0:
            raise DeformError("learning rate must be positive")
        if self.mode not in ("direct-vertex", "gcn-parameterized"):
            raise DeformError(f"unknown fit mode {self.mode!r}")
        if any(i < 0 or i >= self.iters_stage1 for i in self.unpool_at):
            raise DeformError("unpool iterations must fall inside stage 1")


# ---------------------------------------------------------------------------
# icosphere and unpooling


def make_icosphere(subdivisions: int = 2, radius: float = 1.0,
                   center=(0.0, 0.0, 0.0)) -> MeshGraph:
    """Icosahedron subdivided with midpoint projection onto the sphere.

    At 2 subdivisions this emits 162 vertices, 480 edges and 320 faces
    (Euler characteristic 2).
    """
    if subdivisions < 0:
        raise DeformError("subdivisions must be >= 0")
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ], dtype=np.float64)
    faces = np.array([
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ], dtype=np.int64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)

    for _ in range(subdivisions):
        verts_list = list(verts)
        midpoint = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                m = verts_list[a] + verts_list[b]
                m = m / np.linalg.norm(m)
                midpoint[key] = len(verts_list)
                verts_list.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
        verts = np.asarray(verts_list)
        faces = np.asarray(new_faces, dtype=np.int64)

    verts = verts * float(radius) + np.asarray(center, dtype=np.float64)
    return MeshGraph.from_mesh(TriMesh(verts, faces))


def unpool(graph: MeshGraph) -> MeshGraph:
    """Subdivide every face 1-to-4; midpoint vertices average their edge's features.

    V' = V + E, E' = 2E + 3F, F' = 4F; original vertices and features are
    kept unchanged and the Euler characteristic is preserved.
    """
    mesh = graph.mesh
    if mesh is None or len(mesh.faces) == 0:
        raise DeformError("unpool requires a mesh with faces")
    edges = mesh.edges
    nv = len(mesh.vertices)
    edge_id = {(int(a), int(b)): nv + k for k, (a, b) in enumerate(edges)}
    mid_pos = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    mid_feat = 0.5 * (graph.features[edges[:, 0]] + graph.features[edges[:, 1]])

    def eid(a, b):
        return edge_id[(a, b) if a < b else (b, a)]

    new_faces = []
    for a, b, c in mesh.faces:
        a, b, c = int(a), int(b), int(c)
        ab, bc, ca = eid(a, b), eid(b, c), eid(c, a)
        new_faces.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
    verts = np.vstack([mesh.vertices, mid_pos])
    feats = np.vstack([graph.features, mid_feat])
    return MeshGraph.from_mesh(TriMesh(verts, np.asarray(new_faces, dtype=np.int64)), feats)


# ---------------------------------------------------------------------------
# graph convolution


def graph_conv(graph: MeshGraph, layer: GraphConvLayer) -> np.ndarray:
    """Symmetric-normalized propagation: D^{-1/2} (A+I) D^{-1/2} V Theta (+ bias)."""
    if graph.features.shape[1] != layer.theta.shape[0]:
        raise DeformError(
            f"feature width {graph.features.shape[1]} != layer C_in {layer.theta.shape[0]}")
    out = _propagate(graph) @ (graph.features @ layer.theta)
    if layer.bias is not None:
        out = out + layer.bias
    return out


def _propagate(graph: MeshGraph) -> sparse.csr_matrix:
    d_inv_sqrt = 1.0 / np.sqrt(graph.degrees)
    adj = graph.adjacency.tocoo()
    data = adj.data * d_inv_sqrt[adj.row] * d_inv_sqrt[adj.col]
    return sparse.csr_matrix((data, (adj.row, adj.col)), shape=adj.shape)


# ---------------------------------------------------------------------------
# losses (value + analytic gradient)


def _nearest(tree: cKDTree, pts: np.ndarray, k_tie: int = 4) -> np.ndarray:
    """Nearest-neighbor indices with ties broken toward the lowest index."""
    n = tree.n
    k = min(k_tie, n)
    d, idx = tree.query(pts, k=k)
    if k == 1:
        return np.atleast_1d(idx)
    d = np.atleast_2d(d)
    idx = np.atleast_2d(idx)
    tie = d <= d[:, :1] * (1 + 1e-12) + 1e-15
    masked = np.where(tie, idx, n + 1)
    return masked.min(axis=1)


def chamfer_loss(a, b, return_grad: bool = True):
    """Symmetric mean squared nearest-neighbor distance between point sets.

    Returns (value, gradient w.r.t. a). Exact nearest neighbors; the value
    equals the O(n^2) brute force to rounding.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise DeformError("chamfer_loss requires nonempty point sets")
    ja = _nearest(cKDTree(b), a)   # for each x in a, nearest y index
    jb = _nearest(cKDTree(a), b)   # for each y in b, nearest x index
    diff_a = a - b[ja]
    diff_b = b - a[jb]
    val = float(np.einsum("ij,ij->i", diff_a, diff_a).sum() / len(a)
                + np.einsum("ij,ij->i", diff_b, diff_b).sum() / len(b))
    if not return_grad:
        return val, None
    grad = (2.0 / len(a)) * diff_a
    np.subtract.at(grad, jb, (2.0 / len(b)) * diff_b)
    return val, grad


def _graph_positions(graph: MeshGraph) -> np.ndarray:
    if graph.mesh is not None:
        return graph.mesh.vertices
    if graph.features.shape[1] != 3:
        raise DeformError("bare graph positions require 3-wide features")
    return graph.features


def _graph_edges(graph: MeshGraph) -> np.ndarray:
    if graph.mesh is not None:
        return graph.mesh.edges
    coo = sparse.triu(graph.adjacency, k=1).tocoo()
    return np.column_stack([coo.row, coo.col]).astype(np.int64)


def _neighbor_means(graph: MeshGraph) -> sparse.csr_matrix:
    """Row-normalized neighbor matrix W (self-loops removed)."""
    adj = graph.adjacency.tocoo()
    off = adj.row != adj.col
    row, col = adj.row[off], adj.col[off]
    deg = np.bincount(row, minlength=graph.n_vertices).astype(float)
    if np.any(deg == 0):
        raise DeformError("laplacian_loss: isolated vertex (no neighbors)")
    data = 1.0 / deg[row]
    return sparse.csr_matrix((data, (row, col)), shape=adj.shape)


def laplacian_loss(graph: MeshGraph, positions: np.ndarray | None = None,
                   W: sparse.csr_matrix | None = None):
    """Mean squared offset of each vertex from the centroid of its neighbors."""
    p = _graph_positions(graph) if positions is None else positions
    if W is None:
        W = _neighbor_means(graph)
    delta = W @ p - p
    n = len(p)
    val = float(np.einsum("ij,ij->", delta, delta) / n)
    grad = (2.0 / n) * (W.T @ delta - delta)
    return val, grad


def edge_loss(graph: MeshGraph, positions: np.ndarray | None = None,
              edges: np.ndarray | None = None):
    """Mean squared edge length."""
    if edges is None:
        edges = _graph_edges(graph)
    if len(edges) == 0:
        raise DeformError("edge_loss requires at least one edge")
    p = _graph_positions(graph) if positions is None else positions
    d = p[edges[:, 0]] - p[edges[:, 1]]
    val = float(np.einsum("ij,ij->", d, d) / len(edges))
    grad = np.zeros_like(p)
    scale = 2.0 / len(edges)
    np.add.at(grad, edges[:, 0], scale * d)
    np.subtract.at(grad, edges[:, 1], scale * d)
    return val, grad


def normal_consistency_loss(mesh: TriMesh, positions: np.ndarray | None = None,
                            pairs: np.ndarray | None = None):
    """Sum over interior edges of 1 - cos(n0, n1) with its analytic gradient."""
    p = mesh.vertices if positions is None else positions
    faces = mesh.faces
    if pairs is None:
        pairs = mesh.interior_edge_faces
    p0, p1, p2 = p[faces[:, 0]], p[faces[:, 1]], p[faces[:, 2]]
    N = np.cross(p1 - p0, p2 - p0)
    lens = np.linalg.norm(N, axis=1)
    if np.any(lens < 1e-15):
        raise DeformError("normal_consistency_loss: degenerate face")
    n = N / lens[:, None]
    if len(pairs) == 0:
        return 0.0, np.zeros_like(p)
    ni, nj = n[pairs[:, 0]], n[pairs[:, 1]]
    val = float(np.sum(1.0 - np.einsum("ij,ij->i", ni, nj)))
    # dL/dn accumulated per face, then pulled back through the normalization
    g_n = np.zeros_like(n)
    np.subtract.at(g_n, pairs[:, 0], nj)
    np.subtract.at(g_n, pairs[:, 1], ni)
    g_N = (g_n - n * np.einsum("ij,ij->i", n, g_n)[:, None]) / lens[:, None]
    e0 = p1 - p2
    e1 = p2 - p0
    e2 = p0 - p1
    grad = np.zeros_like(p)
    np.add.at(grad, faces[:, 0], np.cross(e0, g_N))
    np.add.at(grad, faces[:, 1], np.cross(e1, g_N))
    np.add.at(grad, faces[:, 2], np.cross(e2, g_N))
    return val, grad


def _chamfer_source(positions: np.ndarray, faces: np.ndarray):
    """Chamfer sample set: vertices plus one centroid sample per face."""
    if len(faces) == 0:
        return positions
    centroids = positions[faces].mean(axis=1)
    return np.vstack([positions, centroids])


def total_loss(graph: MeshGraph, target, weights: LossWeights,
               positions: np.ndarray | None = None):
    """Weighted sum of the four losses; gradient w.r.t. vertex positions.

    The chamfer term compares the target against mesh vertices plus one
    centroid sample per face, so faces cannot spear through the target
    between vertices unpenalized.

    Returns (value, gradient, components) with components keyed cd/lap/nc/eg
    holding the unweighted values.
    """
    if graph.mesh is None:
        raise DeformError("total_loss requires mesh geometry")
    mesh = graph.mesh
    p = mesh.vertices if positions is None else positions
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    nv = len(p)

    source = _chamfer_source(p, mesh.faces)
    cd, g_src = chamfer_loss(source, target)
    g_cd = g_src[:nv].copy()
    if len(mesh.faces):
        g_cent = g_src[nv:] / 3.0
        for k in range(3):
            np.add.at(g_cd, mesh.faces[:, k], g_cent)

    lap, g_lap = laplacian_loss(graph, positions=p)
    nc, g_nc = normal_consistency_loss(mesh, positions=p)
    eg, g_eg = edge_loss(graph, positions=p)

    w = weights
    val = w.lambda1 * cd + w.lambda2 * lap + w.lambda3 * nc + w.lambda4 * eg
    grad = w.lambda1 * g_cd + w.lambda2 * g_lap + w.lambda3 * g_nc + w.lambda4 * g_eg
    return val, grad, {"cd": cd, "lap": lap, "nc": nc, "eg": eg}


# ---------------------------------------------------------------------------
# gradient verification


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_redrawn: int

    @property
    def ok(self) -> bool:
        return np.isfinite(self.max_rel_error)


def grad_check(loss_fn, positions: np.ndarray, n_coords: int = 30, h: float = 1e-5,
               seed: int = 0, tie_fn=None) -> GradCheckReport:
    """Compare an analytic gradient against central finite differences.

    loss_fn(positions) -> (value, gradient). Coordinates are drawn at
    random; when tie_fn reports a nearest-neighbor tie at a probe point the
    coordinate is redrawn (chamfer is nondifferentiable there).
    """
    rng = np.random.default_rng(seed)
    _, grad = loss_fn(positions)
    flat_grad = grad.reshape(-1)
    n = positions.size
    checked = 0
    redrawn = 0
    max_rel = 0.0
    attempts = 0
    while checked < min(n_coords, n) and attempts < 50 * n_coords:
        attempts += 1
        i = int(rng.integers(n))
        p_plus = positions.copy()
        p_plus.reshape(-1)[i] += h
        p_minus = positions.copy()
        p_minus.reshape(-1)[i] -= h
        if tie_fn is not None and (tie_fn(p_plus) or tie_fn(p_minus)):
            redrawn += 1
            continue
        v_plus, _ = loss_fn(p_plus)
        v_minus, _ = loss_fn(p_minus)
        numeric = (v_plus - v_minus) / (2 * h)
        rel = abs(flat_grad[i] - numeric) / max(1e-8, abs(numeric))
        max_rel = max(max_rel, rel)
        checked += 1
    return GradCheckReport(max_rel_error=max_rel, n_checked=checked, n_redrawn=redrawn)


# ---------------------------------------------------------------------------
# fitting


class _Adam:
    def __init__(self, shapes, lr, beta1, beta2, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        out = []
        for k, (p, g) in enumerate(zip(params, grads)):
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            out.append(p - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


class _GCN:
    """Stacked graph-conv layers with ReLU, final layer linear, residual output."""

    def __init__(self, widths, rng):
        self.weights = []
        self.biases = []
        for k, (cin, cout) in enumerate(zip(widths[:-1], widths[1:])):
            last = k == len(widths) - 2
            if last:
                w = np.zeros((cin, cout))  # residual start: zero offsets
            else:
                w = rng.normal(0.0, np.sqrt(1.0 / cin), size=(cin, cout))
            self.weights.append(w)
            self.biases.append(np.zeros(cout))

    def params(self):
        return self.weights + self.biases

    def set_params(self, params):
        nl = len(self.weights)
        self.weights = params[:nl]
        self.biases = params[nl:]

    def forward(self, S, feats):
        self._cache = [feats]
        h = feats
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = S @ (h @ w) + b
            if k < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
            self._cache.append(h)
        return h

    def backward(self, S, g_out):
        """Gradients of all parameters given dL/d(output)."""
        g_w = [None] * len(self.weights)
        g_b = [None] * len(self.biases)
        g = g_out
        for k in range(len(self.weights) - 1, -1, -1):
            h_in = self._cache[k]
            if k < len(self.weights) - 1:
                g = g * (self._cache[k + 1] > 0)
            sg = S.T @ g
            g_w[k] = h_in.T @ sg
            g_b[k] = g.sum(axis=0)
            g = sg @ self.weights[k].T
        return g_w + g_b


def _stage_features(positions: np.ndarray, grid: FeatureGrid | None) -> np.ndarray:
    if grid is None:
        return positions.copy()
    return np.hstack([positions, np.atleast_2d(sample_trilinear(grid, positions))])


def fit_mesh(initial: MeshGraph, target, features: FeatureGrid | None = None,
             config: FitConfig | None = None):
    """Two-stage cascaded fit of a deformable mesh to a target point cloud.

    Stage 1 runs with the configured unpool schedule; stage 2 restarts the
    optimizer (and in gcn mode, a fresh network) on the stage-1 output with
    no unpooling. Offsets are residual: new positions = input positions +
    predicted offsets. Deterministic for a fixed seed.

    Returns (final TriMesh, history) where history rows are
    (iteration, total, cd, lap, nc, eg).
    """
    if config is None:
        config = FitConfig()
    if initial.mesh is None:
        raise DeformError("fit_mesh requires mesh geometry")
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    rng = np.random.default_rng(config.seed)

    graph = MeshGraph.from_mesh(initial.mesh, initial.features)
    history = []
    guard = {"initial": None}
    global_iter = 0

    def run_segment(graph, n_iters, unpool_at, stage_tag):
        nonlocal global_iter
        base = graph.mesh.vertices.copy()
        pending_unpools = sorted(unpool_at)
        mode = config.mode

        if mode == "gcn-parameterized":
            S = _propagate(graph)
            feats = _stage_features(base, features)
            net = _GCN([feats.shape[1]] + [config.hidden] * (config.layers - 1) + [3], rng)
            adam = _Adam([p.shape for p in net.params()], config.lr, config.beta1, config.beta2)
        else:
            offsets = np.zeros_like(base)
            adam = _Adam([offsets.shape], config.lr, config.beta1, config.beta2)

        def _current_positions():
            if mode == "gcn-parameterized":
                return base + net.forward(S, feats)
            return base + offsets

        it = 0
        while it < n_iters:
            if pending_unpools and it == pending_unpools[0]:
                pending_unpools.pop(0)
                # commit current prediction, subdivide, restart moments
                pos = _current_positions()
                graph = MeshGraph.from_mesh(TriMesh(pos, graph.mesh.faces, validate=False))
                graph = unpool(graph)
                base = graph.mesh.vertices.copy()
                if mode == "gcn-parameterized":
                    S = _propagate(graph)
                    feats = _stage_features(base, features)
                    net = _GCN([feats.shape[1]] + [config.hidden] * (config.layers - 1) + [3],
                               rng)
                    adam = _Adam([p.shape for p in net.params()],
                                 config.lr, config.beta1, config.beta2)
                else:
                    offsets = np.zeros_like(base)
                    adam = _Adam([offsets.shape], config.lr, config.beta1, config.beta2)

            pos = _current_positions()
            val, grad, comps = total_loss(graph, target, config.weights, positions=pos)
            history.append((global_iter, val, comps["cd"], comps["lap"],
                            comps["nc"], comps["eg"]))
            if guard["initial"] is None:
                guard["initial"] = val
            elif val > 10.0 * guard["initial"]:
                raise RuntimeError(
                    f"fit diverged at iteration {global_iter}: total loss {val:.6g} "
                    f"exceeds 10x initial {guard['initial']:.6g}")

            if mode == "gcn-parameterized":
                g_params = net.backward(S, grad)
                net.set_params(adam.step(net.params(), g_params))
            else:
                (offsets,) = adam.step([offsets], [grad])
            it += 1
            global_iter += 1

        final = _current_positions()
        return MeshGraph.from_mesh(TriMesh(final, graph.mesh.faces, validate=False))

    graph = run_segment(graph, config.iters_stage1, config.unpool_at, "stage1")
    graph = run_segment(graph, config.iters_stage2, (), "stage2")
    return graph.mesh, np.asarray(history)
