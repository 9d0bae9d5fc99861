"""Analytic vascular phantoms with paired mask, mesh, tree, and sdf.

Each phantom kind defines a solid by a signed distance function whose
zero level set is the exact vessel wall. The voxel mask samples that
sdf at voxel centers, the surface mesh follows the same zero set, and
the key-point tree walks the analytic centerline at a fixed step.
Junction solids blend their member tubes with a polynomial smooth
minimum so the sdf stays differentiable through the crotch.

Tube-like kinds (straight, arc, stenosed) are meshed as one fine ring
sweep. Junction kinds have no single sweep: their oracle mesh comes
from isosurfacing the same sdf on a fine grid instead.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np
from skimage import measure

from .meshops import TriMesh, weld
from .reconstruct import CrossSectionRing, stitch_rings
from .skeleton import KeyPointTree
from .volume import MASK, VoxelVolume

PHANTOM_KINDS = ("straight-tube", "arc-tube", "bifurcation",
                 "trifurcation", "stenosed-tube")

_MARGIN_VOXELS = 2      # empty voxels kept around the solid on every side
_TREE_STEP = 0.5        # mm between key points
_FINE_RING = 0.1        # mm between oracle-mesh rings
_FINE_RAYS = 64
_FINE_PITCH = 0.1       # mm grid pitch for isosurfaced junction meshes

# child caliber follows Murray's law for a symmetric split: r * 2^(-1/3)
_CHILD_RADIUS_RATIO = 2.0 ** (-1.0 / 3.0)


class SynthError(ValueError):
    """Raised on invalid phantom specifications or undersized volumes."""


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of one analytic phantom.

    Lengths and radii in mm, angles in degrees. branch_radius None
    defaults to radius * 2^(-1/3). extent, when given, fixes the mask
    volume as (lo, hi) world corners; the solid plus margin must fit.
    """
    kind: str
    length: float = 20.0
    radius: float = 2.0
    branch_length: float = 10.0
    branch_radius: float | None = None
    branch_angle: float = 45.0
    arc_angle: float = 90.0
    stenosis_depth: float = 0.5
    spacing: float = 0.5
    seed: int = 0
    blend: float = 0.5
    extent: tuple | None = None

    def __post_init__(self):
        if self.kind not in PHANTOM_KINDS:
            raise SynthError(f"unknown phantom kind {self.kind!r}; "
                             f"expected one of {', '.join(PHANTOM_KINDS)}")
        if self.radius <= 0 or (self.branch_radius is not None
                                and self.branch_radius <= 0):
            raise SynthError("radii must be positive")
        if self.length <= 0 or self.branch_length <= 0:
            raise SynthError("lengths must be positive")
        if not 0.0 <= self.stenosis_depth < 1.0:
            raise SynthError("stenosis depth must lie in [0, 1)")
        for name in ("branch_angle", "arc_angle"):
            a = getattr(self, name)
            if not 0.0 < a <= 90.0:
                raise SynthError(f"{name} must lie in (0, 90] degrees")
        if self.spacing <= 0:
            raise SynthError("spacing must be positive")
        if self.blend <= 0:
            raise SynthError("blend radius must be positive")

    @property
    def child_radius(self) -> float:
        if self.branch_radius is not None:
            return self.branch_radius
        return self.radius * _CHILD_RADIUS_RATIO


# ---------------------------------------------------------------------------
# spec file round trip ("key = value" lines)


def save_phantom_spec(spec: PhantomSpec, path) -> None:
    with open(path, "w") as fh:
        for f in fields(spec):
            v = getattr(spec, f.name)
            if v is None:
                continue
            if f.name == "extent":
                lo, hi = v
                v = " ".join(f"{x:.17g}" for x in (*lo, *hi))
            fh.write(f"{f.name} = {v}\n")


def load_phantom_spec(path) -> PhantomSpec:
    known = {f.name for f in fields(PhantomSpec)}
    raw: dict = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise SynthError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in text.split("=", 1))
            if key not in known:
                raise SynthError(f"{path}:{lineno}: unknown key {key!r}")
            raw[key] = value
    if "kind" not in raw:
        raise SynthError(f"{path}: missing required key 'kind'")
    kwargs: dict = {"kind": raw.pop("kind")}
    for key, value in raw.items():
        if key == "seed":
            kwargs[key] = int(value)
        elif key == "extent":
            nums = [float(x) for x in value.split()]
            if len(nums) != 6:
                raise SynthError(f"{path}: extent needs 6 numbers (lo xyz, hi xyz)")
            kwargs[key] = (tuple(nums[:3]), tuple(nums[3:]))
        elif key == "branch_radius" and value.lower() == "none":
            kwargs[key] = None
        else:
            try:
                kwargs[key] = float(value)
            except ValueError as exc:
                raise SynthError(f"{path}: key {key!r}: {exc}") from exc
    return PhantomSpec(**kwargs)


# ---------------------------------------------------------------------------
# signed distance fields


def _cylinder_sdf_parts(d_rad, d_ax):
    """Exact sdf of a capped cylinder from radial and axial overshoots."""
    inside = np.minimum(np.maximum(d_rad, d_ax), 0.0)
    outside = np.hypot(np.maximum(d_rad, 0.0), np.maximum(d_ax, 0.0))
    return inside + outside


def _straight_tube_sdf(pts, origin, axis, length, radius_fn):
    rel = pts - origin
    s = rel @ axis
    rad = np.linalg.norm(rel - s[:, None] * axis[None, :], axis=1)
    d_rad = rad - radius_fn(np.clip(s, 0.0, length))
    d_ax = np.maximum(-s, s - length)
    return _cylinder_sdf_parts(d_rad, d_ax)


def _arc_tube_sdf(pts, bend_radius, arc_rad, radius):
    """Capped bent cylinder: spine is an x-z plane arc from the origin
    heading +z and curving toward +x, curvature center (R, 0, 0)."""
    x = pts[:, 0] - bend_radius
    y = pts[:, 1]
    z = pts[:, 2]
    theta = np.arctan2(z, -x)
    ring = np.hypot(x, z) - bend_radius
    d_rad = np.hypot(ring, y) - radius
    s = theta * bend_radius
    d_ax = np.maximum(-s, s - arc_rad * bend_radius)
    return _cylinder_sdf_parts(d_rad, d_ax)


def _smin(a, b, k):
    """Polynomial smooth minimum with blending radius k."""
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b * (1.0 - h) + a * h - k * h * (1.0 - h)


def _stenosis_profile(spec: PhantomSpec):
    r0 = spec.radius
    depth = spec.stenosis_depth
    mid = spec.length / 2.0
    width = spec.length / 8.0

    def radius_fn(s):
        return r0 * (1.0 - depth * np.exp(-((s - mid) ** 2)
                                          / (2.0 * width ** 2)))
    return radius_fn


def _branch_dirs(spec: PhantomSpec) -> list[np.ndarray]:
    a = np.radians(spec.branch_angle)
    if spec.kind == "bifurcation":
        azimuths = (0.0, np.pi)
    else:
        azimuths = (0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0)
    return [np.array([np.sin(a) * np.cos(az), np.sin(a) * np.sin(az),
                      np.cos(a)]) for az in azimuths]


def _make_sdf(spec: PhantomSpec):
    """(sdf callable, list of spine polylines, world bounding box)."""
    z = np.array([0.0, 0.0, 1.0])
    origin = np.zeros(3)

    if spec.kind in ("straight-tube", "stenosed-tube"):
        radius_fn = (_stenosis_profile(spec) if spec.kind == "stenosed-tube"
                     else (lambda s: np.full_like(np.asarray(s, float),
                                                  spec.radius)))

        def sdf(pts):
            pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
            return _straight_tube_sdf(pts, origin, z, spec.length, radius_fn)

        spines = [np.array([origin, origin + spec.length * z])]
        lo = np.array([-spec.radius, -spec.radius, 0.0])
        hi = np.array([spec.radius, spec.radius, spec.length])
        return sdf, spines, (lo, hi)

    if spec.kind == "arc-tube":
        arc_rad = np.radians(spec.arc_angle)
        bend_radius = spec.length / arc_rad

        def sdf(pts):
            pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
            return _arc_tube_sdf(pts, bend_radius, arc_rad, spec.radius)

        theta = np.linspace(0.0, arc_rad, 65)
        spine = np.column_stack([bend_radius * (1.0 - np.cos(theta)),
                                 np.zeros_like(theta),
                                 bend_radius * np.sin(theta)])
        lo = spine.min(axis=0) - spec.radius
        hi = spine.max(axis=0) + spec.radius
        return sdf, [spine], (lo, hi)

    # junction kinds: trunk plus children blended with a smooth minimum
    junction = origin + spec.length * z
    dirs = _branch_dirs(spec)
    r_child = spec.child_radius
    members = [(origin, z, spec.length, spec.radius)]
    spines = [np.array([origin, junction])]
    for d in dirs:
        members.append((junction, d, spec.branch_length, r_child))
        spines.append(np.array([junction, junction + spec.branch_length * d]))

    def sdf(pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        acc = None
        for (base, axis, length, radius) in members:
            d = _straight_tube_sdf(pts, base, axis, length,
                                   lambda s, r=radius: np.full_like(s, r))
            acc = d if acc is None else _smin(acc, d, spec.blend)
        return acc

    corners = [spines[0][0] - spec.radius, spines[0][1] + spec.radius]
    for spine in spines[1:]:
        corners.append(spine[1] - r_child)
        corners.append(spine[1] + r_child)
    corners = np.array(corners)
    lo = corners.min(axis=0) - spec.blend
    hi = corners.max(axis=0) + spec.blend
    return sdf, spines, (lo, hi)


# ---------------------------------------------------------------------------
# artifact construction


def _mask_grid(spec: PhantomSpec, lo, hi):
    """Voxel grid covering [lo, hi] plus the empty margin.

    Centers are offset half a voxel from the solid's axis-aligned
    planes so flat caps never land exactly on a sample point.
    """
    sp = spec.spacing
    pad = (_MARGIN_VOXELS + 0.5) * sp
    if spec.extent is not None:
        elo = np.asarray(spec.extent[0], dtype=np.float64)
        ehi = np.asarray(spec.extent[1], dtype=np.float64)
        if np.any(elo > lo - _MARGIN_VOXELS * sp) or \
                np.any(ehi < hi + _MARGIN_VOXELS * sp):
            raise SynthError("geometry exceeds the requested volume extent")
        origin, top = elo, ehi
    else:
        origin, top = lo - pad, hi + pad
    dims = np.ceil((top - origin) / sp).astype(int) + 1
    return origin, tuple(int(n) for n in dims)


def _sample_mask(sdf, spec: PhantomSpec, origin, dims) -> VoxelVolume:
    axes = [origin[i] + spec.spacing * np.arange(dims[i]) for i in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    vals = sdf(pts).reshape(dims)
    return VoxelVolume(vals <= 0.0, (spec.spacing,) * 3, tuple(origin),
                       kind=MASK)


def _tube_rings(spec: PhantomSpec):
    """Analytic fine rings for the sweepable kinds."""
    if spec.kind == "arc-tube":
        arc_rad = np.radians(spec.arc_angle)
        bend_radius = spec.length / arc_rad
        n = int(np.ceil(spec.length / _FINE_RING)) + 1
        theta = np.linspace(0.0, arc_rad, n)
        centers = np.column_stack([bend_radius * (1.0 - np.cos(theta)),
                                   np.zeros_like(theta),
                                   bend_radius * np.sin(theta)])
        tangents = np.column_stack([np.sin(theta), np.zeros_like(theta),
                                    np.cos(theta)])
        u_dirs = np.column_stack([-np.cos(theta), np.zeros_like(theta),
                                  np.sin(theta)])
        radii = np.full((n, _FINE_RAYS), spec.radius)
    else:
        n = int(np.ceil(spec.length / _FINE_RING)) + 1
        s = np.linspace(0.0, spec.length, n)
        centers = np.column_stack([np.zeros(n), np.zeros(n), s])
        tangents = np.tile([0.0, 0.0, 1.0], (n, 1))
        u_dirs = np.tile([1.0, 0.0, 0.0], (n, 1))
        if spec.kind == "stenosed-tube":
            prof = _stenosis_profile(spec)(s)
        else:
            prof = np.full(n, spec.radius)
        radii = np.tile(prof[:, None], (1, _FINE_RAYS))
    rings = []
    for i in range(len(centers)):
        t = tangents[i] / np.linalg.norm(tangents[i])
        u = u_dirs[i] / np.linalg.norm(u_dirs[i])
        rings.append(CrossSectionRing(centers[i], t, u, np.cross(t, u),
                                      radii[i]))
    return rings


def _isosurface_mesh(sdf, lo, hi) -> TriMesh:
    """Watertight isosurface of the sdf's zero set on a fine grid."""
    pad = 2 * _FINE_PITCH
    origin = np.asarray(lo, dtype=np.float64) - pad
    top = np.asarray(hi, dtype=np.float64) + pad
    dims = np.ceil((top - origin) / _FINE_PITCH).astype(int) + 1
    axes = [origin[i] + _FINE_PITCH * np.arange(dims[i]) for i in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    field = sdf(pts).reshape(tuple(dims))
    verts, faces, _, _ = measure.marching_cubes(
        field, level=0.0, spacing=(_FINE_PITCH,) * 3)
    verts = verts + origin
    # marching cubes can emit slivers whose corners weld together;
    # such faces glue two copies of one edge and are safe to drop
    mesh_verts, mesh_faces = _clean_faces(verts, faces)
    mesh = TriMesh(mesh_verts, mesh_faces)
    if mesh.signed_volume() < 0:
        mesh = TriMesh(mesh.vertices, mesh.faces[:, [0, 2, 1]])
    return mesh


def _clean_faces(verts, faces):
    verts = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    # exact-duplicate weld only: keep the isosurface geometry untouched
    scaled = np.round(verts / 1e-9).astype(np.int64)
    _, first, inv = np.unique(scaled, axis=0, return_index=True,
                              return_inverse=True)
    remap = inv
    out_faces = remap[faces]
    ok = ((out_faces[:, 0] != out_faces[:, 1])
          & (out_faces[:, 1] != out_faces[:, 2])
          & (out_faces[:, 2] != out_faces[:, 0]))
    out_faces = out_faces[ok]
    p0 = verts[first][out_faces[:, 0]]
    p1 = verts[first][out_faces[:, 1]]
    p2 = verts[first][out_faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(p1 - p0, p2 - p0), axis=1)
    out_faces = out_faces[areas > 1e-12]
    used = np.unique(out_faces)
    lookup = np.full(len(first), -1, dtype=np.int64)
    lookup[used] = np.arange(len(used))
    return verts[first][used], lookup[out_faces]


def _phantom_tree(spines) -> KeyPointTree:
    positions = [spines[0][0]]
    parents = [-1]
    index_of_junction = {}

    def walk(poly, start_index):
        # resample the polyline at the tree step
        seg = np.diff(poly, axis=0)
        seglen = np.linalg.norm(seg, axis=1)
        total = seglen.sum()
        n = max(int(round(total / _TREE_STEP)), 1)
        stations = np.linspace(0.0, total, n + 1)[1:]
        cum = np.concatenate([[0.0], np.cumsum(seglen)])
        prev = start_index
        for st in stations:
            k = min(np.searchsorted(cum, st, side="right") - 1, len(seg) - 1)
            t = (st - cum[k]) / seglen[k]
            positions.append(poly[k] + t * seg[k])
            parents.append(prev)
            prev = len(positions) - 1
        return prev

    trunk_end = walk(spines[0], 0)
    key = tuple(np.round(spines[0][-1], 9))
    index_of_junction[key] = trunk_end
    for spine in spines[1:]:
        base_key = tuple(np.round(spine[0], 9))
        base = index_of_junction.get(base_key, trunk_end)
        walk(spine, base)
    return KeyPointTree(np.asarray(positions), np.asarray(parents), root=0)


def make_phantom(spec: PhantomSpec):
    """Build (mask, mesh, tree, sdf) for the phantom described by spec.

    The mask samples the sdf at voxel centers; the mesh follows the
    same zero level set; the tree walks the analytic centerline. All
    outputs are deterministic functions of the spec.
    """
    sdf, spines, (lo, hi) = _make_sdf(spec)
    origin, dims = _mask_grid(spec, lo, hi)
    mask = _sample_mask(sdf, spec, origin, dims)
    if spec.kind in ("straight-tube", "arc-tube", "stenosed-tube"):
        mesh = stitch_rings(_tube_rings(spec), cap_ends=True)
    else:
        mesh = _isosurface_mesh(sdf, lo, hi)
    tree = _phantom_tree(spines)
    return mask, mesh, tree, sdf


# ---------------------------------------------------------------------------
# patch classification


def classify_patch(tree: KeyPointTree, center, half_width: float) -> str:
    """Classify an axis-aligned patch of the tree as tube or bifurcation.

    Bifurcation when any node of degree >= 3 falls inside the patch
    (higher-order forks map to the same class); tube otherwise. A patch
    containing no tree nodes is not a vessel patch and is rejected.
    """
    center = np.asarray(center, dtype=np.float64).reshape(3)
    if half_width <= 0:
        raise SynthError("patch half-width must be positive")
    pos = tree.positions
    inside = np.all(np.abs(pos - center) <= half_width, axis=1)
    if not inside.any():
        raise SynthError("patch contains no tree nodes")
    degree = np.zeros(len(pos), dtype=np.int64)
    for i, p in enumerate(tree.parents):
        if p >= 0:
            degree[i] += 1
            degree[p] += 1
    return "bifurcation" if np.any(degree[inside] >= 3) else "tube"
