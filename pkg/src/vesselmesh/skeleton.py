"""Skeletonization of tubular masks and key-point tree construction.

A binary vessel mask is thinned to a one-voxel-wide curve set, the voxel
centers become key points, and a minimum spanning tree over their
26-neighborhood (Euclidean edge weights) gives the branching structure.
The root defaults to the endpoint with the largest inscribed-sphere radius,
a proxy for the ostium; an explicit root hint overrides it. Trees can also
be imported from text, so an external skeletonizer can be substituted.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as graph_components
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial import cKDTree
from skimage.morphology import skeletonize

from .volume import MASK, VolumeError, VoxelVolume


class SkeletonError(ValueError):
    pass


@dataclass(frozen=True)
class KeyPointTree:
    """Rooted tree of skeleton key points; parents[i] == -1 only at the root."""

    positions: np.ndarray
    parents: np.ndarray
    root: int

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        par = np.asarray(self.parents, dtype=np.int64).reshape(-1)
        n = len(pos)
        if n == 0:
            raise SkeletonError("tree must have at least one node")
        if par.shape[0] != n:
            raise SkeletonError("parents length must match node count")
        roots = np.flatnonzero(par < 0)
        if len(roots) != 1 or roots[0] != self.root:
            raise SkeletonError("exactly one parentless node must equal root")
        if np.any(par >= n):
            raise SkeletonError("parent index out of range")
        # reachability from root == acyclicity for n-1 parent links
        children = [[] for _ in range(n)]
        for i, p in enumerate(par):
            if p >= 0:
                children[p].append(i)
        seen = np.zeros(n, dtype=bool)
        stack = [self.root]
        while stack:
            i = stack.pop()
            if seen[i]:
                raise SkeletonError("cycle in parent links")
            seen[i] = True
            stack.extend(children[i])
        if not seen.all():
            raise SkeletonError("nodes unreachable from root")
        pos = np.ascontiguousarray(pos)
        pos.setflags(write=False)
        par = np.ascontiguousarray(par)
        par.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "parents", par)
        object.__setattr__(self, "_children", tuple(tuple(c) for c in children))

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    def children(self, i: int) -> tuple:
        return self._children[i]

    def degree(self, i: int) -> int:
        return len(self._children[i]) + (1 if self.parents[i] >= 0 else 0)

    def leaves(self) -> np.ndarray:
        """Leaf node indices in ascending node order."""
        deg1 = [i for i in range(self.n_nodes)
                if self.degree(i) == 1 and i != self.root]
        if self.n_nodes == 1:
            return np.array([self.root], dtype=np.int64)
        # a root with a single child is an endpoint too, but branches run
        # root-to-leaf, so the root itself is never listed
        return np.asarray(deg1, dtype=np.int64)


def thin_skeletonize(mask: VoxelVolume) -> np.ndarray:
    """Topology-preserving 3-D thinning; returns skeleton voxel centers (mm).

    Points are ordered by voxel linear index (x fastest), which downstream
    ordering rules rely on.
    """
    if mask.kind != MASK:
        raise SkeletonError("skeletonization requires a binary mask")
    if mask.count() == 0:
        raise SkeletonError("empty mask")
    skel = skeletonize(mask.data.astype(bool))
    idx = np.argwhere(skel)
    if len(idx) == 0:
        # a nonempty mask always thins to at least one voxel, but guard anyway
        raise SkeletonError("thinning produced no voxels")
    # order by Fortran linear index: x fastest, then y, then z
    order = np.lexsort((idx[:, 0], idx[:, 1], idx[:, 2]))
    idx = idx[order]
    if np.any(mask.data[idx[:, 0], idx[:, 1], idx[:, 2]] == 0):
        raise SkeletonError("thinning left the input mask")
    return mask.index_to_world(idx.astype(np.float64))


def _voxel_adjacency(points: np.ndarray, mask: VoxelVolume):
    """26-neighborhood adjacency over voxel-center points, Euclidean weights."""
    idx = mask.world_to_index(points)
    tree = cKDTree(idx)
    pairs = tree.query_pairs(r=np.sqrt(3.0) + 1e-6, output_type="ndarray")
    if len(pairs):
        cheb = np.max(np.abs(idx[pairs[:, 0]] - idx[pairs[:, 1]]), axis=1)
        pairs = pairs[cheb <= 1.0 + 1e-6]
    w = np.linalg.norm(points[pairs[:, 0]] - points[pairs[:, 1]], axis=1)
    n = len(points)
    adj = coo_matrix((np.concatenate([w, w]),
                      (np.concatenate([pairs[:, 0], pairs[:, 1]]),
                       np.concatenate([pairs[:, 1], pairs[:, 0]]))),
                     shape=(n, n)).tocsr()
    return adj


def build_tree(points: np.ndarray, root_hint=None,
               mask: VoxelVolume | None = None) -> KeyPointTree:
    """Minimum-spanning-tree key-point tree over 26-neighbor adjacency.

    With several 26-connected components, the largest is kept and the drop
    is reported as a warning. Root: the point nearest root_hint when given,
    otherwise the endpoint with the largest distance-transform value.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise SkeletonError("no skeleton points")
    if mask is None:
        raise SkeletonError("build_tree requires the source mask volume")
    if len(points) == 1:
        return KeyPointTree(points, np.array([-1], dtype=np.int64), 0)

    adj = _voxel_adjacency(points, mask)
    n_comp, labels = graph_components(adj, directed=False)
    if n_comp > 1:
        counts = np.bincount(labels)
        keep_label = int(np.argmax(counts))
        dropped = len(points) - int(counts[keep_label])
        warnings.warn(f"skeleton has {n_comp} components; dropped {dropped} "
                      f"points outside the largest", stacklevel=2)
        keep = np.flatnonzero(labels == keep_label)
        points = points[keep]
        adj = adj[keep][:, keep]
        if len(points) == 1:
            return KeyPointTree(points, np.array([-1], dtype=np.int64), 0)

    mst = minimum_spanning_tree(adj)
    mst = mst + mst.T
    mst_lil = mst.tolil()
    neighbor_lists = [sorted(row) for row in mst_lil.rows]

    if root_hint is not None:
        hint = np.asarray(root_hint, dtype=np.float64).reshape(3)
        root = int(np.argmin(np.linalg.norm(points - hint, axis=1)))
    else:
        dt = ndimage.distance_transform_edt(mask.data.astype(bool),
                                            sampling=mask.spacing)
        idx = np.rint(mask.world_to_index(points)).astype(np.int64)
        idx = np.clip(idx, 0, np.array(mask.dims) - 1)
        radii = dt[idx[:, 0], idx[:, 1], idx[:, 2]]
        endpoints = [i for i in range(len(points)) if len(neighbor_lists[i]) <= 1]
        if not endpoints:
            endpoints = list(range(len(points)))
        root = max(endpoints, key=lambda i: (radii[i], -i))

    parents = np.full(len(points), -1, dtype=np.int64)
    order = [root]
    seen = np.zeros(len(points), dtype=bool)
    seen[root] = True
    qi = 0
    while qi < len(order):
        i = order[qi]
        qi += 1
        for j in neighbor_lists[i]:
            if not seen[j]:
                seen[j] = True
                parents[j] = i
                order.append(j)
    if not seen.all():
        raise SkeletonError("minimum spanning tree left nodes disconnected")
    return KeyPointTree(points, parents, root)


def split_branches(tree: KeyPointTree) -> list[np.ndarray]:
    """One root-to-leaf node-index path per leaf, ordered by leaf index.

    Sibling branches repeat their shared trunk prefix by construction.
    """
    if tree.n_nodes == 1:
        return [np.array([tree.root], dtype=np.int64)]
    branches = []
    for leaf in tree.leaves():
        path = [int(leaf)]
        while tree.parents[path[-1]] >= 0:
            path.append(int(tree.parents[path[-1]]))
        branches.append(np.asarray(path[::-1], dtype=np.int64))
    return branches


def save_tree(tree: KeyPointTree, path) -> None:
    """VMTREE1 text: `id parent x y z` per node, -1 parent at the root."""
    with open(path, "w") as fh:
        fh.write("VMTREE1\n")
        for i, (p, xyz) in enumerate(zip(tree.parents, tree.positions)):
            fh.write("%d %d %.17g %.17g %.17g\n" % (i, p, *xyz))


def load_tree(path) -> KeyPointTree:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "VMTREE1":
            raise SkeletonError(f"bad tree header {header!r}")
        ids, parents, coords = [], [], []
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise SkeletonError(f"line {line_no}: expected 5 fields")
            ids.append(int(parts[0]))
            parents.append(int(parts[1]))
            coords.append([float(x) for x in parts[2:]])
    if not ids:
        raise SkeletonError("tree file has no nodes")
    n = len(ids)
    if sorted(ids) != list(range(n)):
        raise SkeletonError("node ids must be 0..n-1")
    pos = np.empty((n, 3))
    par = np.empty(n, dtype=np.int64)
    for i, p, c in zip(ids, parents, coords):
        pos[i] = c
        par[i] = p
    roots = np.flatnonzero(par < 0)
    if len(roots) != 1:
        raise SkeletonError("tree file must have exactly one root")
    return KeyPointTree(pos, par, int(roots[0]))
