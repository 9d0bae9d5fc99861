"""Branch surface reconstruction from centerlines and a voxel mask.

Each centerline sample becomes a cross-section ring: rays cast in the
plane orthogonal to the tangent find the mask boundary, the resulting
radii are smoothed angularly (around the ring) and longitudinally (along
the branch), and consecutive rings are stitched into a closed triangle
tube with fan caps.

Whole trees reuse ring stacks across branches: root-to-leaf branches are
cut into segments at junction nodes, each segment's rings are computed
once from that segment's own nodes, and every branch passing through the
segment carries the rings over verbatim. Sibling branch meshes therefore
coincide bitwise on shared trunks, and the boolean union removes the
duplicated walls combinatorially instead of slicing nearly-tangent
surfaces against each other. Past a junction the tube steers from the
seam ring into its own direction under a curvature cap, so the swept
wall never folds through itself however sharp the branching angle is.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .centerline import (BranchCenterline, fit_bspline, propagate_frames,
                         resample, transport_frames)
from .meshops import TriMesh, mesh_union
from .skeleton import KeyPointTree, split_branches
from .volume import MASK, VoxelVolume, occupancy_sampler

R_MIN = 0.1
R_MAX = 10.0


class ReconstructError(ValueError):
    """Raised on unreconstructable branches or bad configuration."""


@dataclass(frozen=True)
class ReconstructConfig:
    """Tunables for ray casting, smoothing and assembly.

    n_rays below 8 produces degenerate rings and is rejected. The hole
    tolerance is the length of continuous emptiness required before a
    boundary crossing is accepted, bridging single-voxel holes in the
    mask. tip_extend pushes extra rings past the first/last centerline
    sample while the mask stays occupied, compensating for the erosion
    of skeleton endpoints.
    """
    n_rays: int = 24
    ray_step: float = 0.05
    hole_tolerance: float = 1.0
    r_min: float = R_MIN
    r_max: float = R_MAX
    sigma_angular: float = 1.0
    sigma_longitudinal: float = 2.0
    ring_spacing: float = 0.2
    decimation: float = 1.0
    tip_extend: bool = False
    tip_extend_max: float = 2.0
    radial_cap_factor: float = 2.0

    def __post_init__(self):
        if self.n_rays < 8:
            raise ReconstructError("n_rays below 8 gives degenerate rings")
        if self.ray_step <= 0 or self.ring_spacing <= 0:
            raise ReconstructError("steps and spacings must be positive")
        if not (0 < self.r_min < self.r_max):
            raise ReconstructError("need 0 < r_min < r_max")
        if self.sigma_angular < 0 or self.sigma_longitudinal < 0:
            raise ReconstructError("smoothing sigmas must be nonnegative")


@dataclass(frozen=True)
class CrossSectionRing:
    """One vessel cross-section: center, frame, and radii per ray angle.

    Ray j points along cos(j*dtheta)*u + sin(j*dtheta)*v with
    dtheta = 360/n_rays degrees, counterclockwise about the tangent.
    """
    center: np.ndarray
    tangent: np.ndarray
    frame_u: np.ndarray
    frame_v: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        t = np.asarray(self.tangent, dtype=np.float64).reshape(3)
        u = np.asarray(self.frame_u, dtype=np.float64).reshape(3)
        v = np.asarray(self.frame_v, dtype=np.float64).reshape(3)
        r = np.asarray(self.radii, dtype=np.float64).reshape(-1)
        if len(r) < 8:
            raise ReconstructError("ring needs at least 8 radii")
        if not np.all(np.isfinite(r)) or np.any(r <= 0):
            raise ReconstructError("radii must be finite and positive")
        for vec in (t, u, v):
            if abs(np.linalg.norm(vec) - 1.0) > 1e-9:
                raise ReconstructError("ring frame vectors must be unit")
        if max(abs(t @ u), abs(t @ v), abs(u @ v)) > 1e-9:
            raise ReconstructError("ring frame must be orthogonal")
        if np.linalg.norm(np.cross(t, u) - v) > 1e-9:
            raise ReconstructError("ring frame must be right-handed (t x u = v)")
        for name, arr in (("center", c), ("tangent", t),
                          ("frame_u", u), ("frame_v", v), ("radii", r)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_rays(self) -> int:
        return len(self.radii)

    @cached_property
    def boundary_points(self) -> np.ndarray:
        """(n_rays, 3) world positions center + r_j * ray_j."""
        ang = np.arange(self.n_rays) * (2.0 * np.pi / self.n_rays)
        dirs = np.cos(ang)[:, None] * self.frame_u + np.sin(ang)[:, None] * self.frame_v
        return self.center + self.radii[:, None] * dirs

    def with_radii(self, radii) -> "CrossSectionRing":
        return CrossSectionRing(self.center, self.tangent,
                                self.frame_u, self.frame_v, radii)


# ---------------------------------------------------------------------------
# ray casting


def cast_rays(center, frame, mask: VoxelVolume, n_rays: int = 24,
              ray_step: float = 0.05, hole_tolerance: float = 1.0,
              r_min: float = R_MIN, r_max: float = R_MAX):
    """Radii of the mask boundary along n_rays rays in the (u, v) plane.

    Rays march outward in ray_step increments sampling the mask's
    trilinear occupancy; the radius is the first 0.5 crossing followed
    by at least hole_tolerance mm of continuous emptiness, linearly
    interpolated between the straddling samples. Rays that never leave
    the mask cap at r_max. Returns None when the center itself is
    outside the mask (occupancy < 0.5): the ring is invalid.
    """
    if mask.kind != MASK:
        raise ReconstructError("cast_rays needs a binary mask volume")
    return _cast_rays_occ(center, frame, occupancy_sampler(mask), n_rays,
                          ray_step, hole_tolerance, r_min, r_max)


def _cast_rays_occ(center, frame, occ, n_rays, ray_step, hole_tolerance,
                   r_min, r_max):
    t, u, v = (np.asarray(x, dtype=np.float64) for x in frame)
    center = np.asarray(center, dtype=np.float64)
    if occ(center) < 0.5:
        return None

    ang = np.arange(n_rays) * (2.0 * np.pi / n_rays)
    dirs = np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * v

    n_steps = int(np.ceil((r_max + hole_tolerance) / ray_step)) + 1
    s = np.arange(1, n_steps + 1) * ray_step
    pts = center + s[None, :, None] * dirs[:, None, :]
    vals = occ(pts.reshape(-1, 3)).reshape(n_rays, len(s))

    window = max(int(round(hole_tolerance / ray_step)), 1)
    below = vals < 0.5
    # pad with emptiness so crossings near r_max validate their window
    padded = np.concatenate([below, np.ones((n_rays, window), dtype=bool)], axis=1)
    runs = np.lib.stride_tricks.sliding_window_view(padded, window, axis=1)
    empty_run = runs.all(axis=-1)[:, :len(s)]

    radii = np.full(n_rays, r_max)
    hit = below & empty_run
    prev = np.concatenate([np.full((n_rays, 1), occ(center)), vals[:, :-1]], axis=1)
    for i in range(n_rays):
        ks = np.flatnonzero(hit[i])
        if len(ks) == 0:
            continue
        k = int(ks[0])
        v0, v1 = prev[i, k], vals[i, k]
        frac = (v0 - 0.5) / (v0 - v1) if v0 > v1 else 0.0
        radii[i] = s[k] - ray_step + frac * ray_step
    return np.clip(radii, r_min, r_max)


# ---------------------------------------------------------------------------
# smoothing


def _gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled Gaussian, truncated at 3 sigma, normalized to sum 1."""
    if sigma <= 0:
        return np.array([1.0])
    half = int(np.floor(3.0 * sigma))
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def smooth_radii_angular(radii, sigma: float = 1.0) -> np.ndarray:
    """Circular Gaussian smoothing over the angular index."""
    r = np.asarray(radii, dtype=np.float64)
    k = _gaussian_kernel(sigma)
    if len(k) == 1:
        return r.copy()
    half = len(k) // 2
    idx = (np.arange(len(r))[:, None] + np.arange(-half, half + 1)[None, :]) % len(r)
    return (r[idx] * k[None, :]).sum(axis=1)


def smooth_radii_longitudinal(rings, sigma: float = 2.0):
    """Gaussian smoothing of each ray's radius along the ring sequence.

    End rings are boundary-replicated (no wrap). Centers and frames are
    untouched; boundary points follow the new radii.
    """
    rings = list(rings)
    if not rings:
        raise ReconstructError("need at least one ring")
    k = _gaussian_kernel(sigma)
    if len(rings) == 1 or len(k) == 1:
        return rings
    half = len(k) // 2
    stack = np.array([r.radii for r in rings])  # (n_rings, n_rays)
    padded = np.pad(stack, ((half, half), (0, 0)), mode="edge")
    sm = np.zeros_like(stack)
    for o in range(len(k)):
        sm += k[o] * padded[o:o + len(stack)]
    return [ring.with_radii(sm[i]) for i, ring in enumerate(rings)]


# ---------------------------------------------------------------------------
# stitching


def stitch_rings(rings, cap_ends: bool = True) -> TriMesh:
    """Triangle tube over consecutive rings, optional fan caps.

    Corresponding ray indices of adjacent rings are joined into quads
    split along one diagonal; normals point away from the centerline
    regardless of the order the rings are supplied in.
    """
    rings = list(rings)
    if len(rings) < 2:
        raise ReconstructError("stitching needs at least 2 rings")
    n = rings[0].n_rays
    if any(r.n_rays != n for r in rings):
        raise ReconstructError("rings disagree on ray count")
    # normalize ordering: ring sequence should advance along the tangent
    step = rings[1].center - rings[0].center
    if float(step @ rings[0].tangent) < 0:
        rings = rings[::-1]

    m = len(rings)
    verts = np.concatenate([r.boundary_points for r in rings])
    faces = []
    for i in range(m - 1):
        a0, b0 = i * n, (i + 1) * n
        for j in range(n):
            jk = (j + 1) % n
            faces.append((a0 + j, a0 + jk, b0 + j))
            faces.append((a0 + jk, b0 + jk, b0 + j))
    if cap_ends:
        verts = np.vstack([verts, rings[0].center, rings[-1].center])
        c0, c1 = m * n, m * n + 1
        last = (m - 1) * n
        for j in range(n):
            jk = (j + 1) % n
            faces.append((c0, jk, j))
            faces.append((c1, last + j, last + jk))
    return TriMesh(verts, np.asarray(faces, dtype=np.int64))


# ---------------------------------------------------------------------------
# branch pipeline


def _cast_ring(cl_sample, occ, config):
    """Ring at one centerline sample, with a local-scale radius guard.

    Near a junction the mask of a sibling vessel is connected to (or
    within hole tolerance of) the local tube, so an unguarded ray can
    run clear through the sibling and return a radius several times the
    local caliber. Such rays are re-capped: hole bridging is honored
    only while the bridged radius stays within radial_cap_factor times
    the ring's median first-exit radius; anything longer falls back to
    the first exit, clamped to the same cap.
    """
    center, t, u, v = cl_sample
    first = _cast_rays_occ(center, (t, u, v), occ,
                           config.n_rays, config.ray_step,
                           0.0, config.r_min, config.r_max)
    if first is None:
        return None
    radii = first
    if config.hole_tolerance > 0.0:
        bridged = _cast_rays_occ(center, (t, u, v), occ,
                                 config.n_rays, config.ray_step,
                                 config.hole_tolerance,
                                 config.r_min, config.r_max)
        cap = config.radial_cap_factor * max(float(np.median(first)),
                                             config.r_min)
        radii = np.where(bridged <= cap, bridged, np.minimum(first, cap))
    return CrossSectionRing(center, t, u, v, radii)


def _branch_samples(branch: BranchCenterline):
    if branch.frame_u is None:
        branch = propagate_frames(branch)
    return [(branch.positions[i], branch.tangents[i],
             branch.frame_u[i], branch.frame_v[i])
            for i in range(branch.n_samples)]


def _extend_samples(center, tangent, u, v, occ, config, sign):
    """Extra ring samples marching past an endpoint while occupied."""
    out = []
    step = config.ring_spacing
    n_max = int(np.floor(config.tip_extend_max / step + 1e-9))
    for k in range(1, n_max + 1):
        c = center + sign * k * step * tangent
        if occ(c) < 0.5:
            break
        out.append((c, tangent, u, v))
    return out


def _finalize_rings(rings, config, n_frozen: int = 0):
    """Angular then longitudinal smoothing; the first n_frozen rings are
    treated as fixed context and returned unchanged."""
    out = list(rings)
    for i in range(n_frozen, len(out)):
        out[i] = out[i].with_radii(
            smooth_radii_angular(out[i].radii, config.sigma_angular))
    smoothed = smooth_radii_longitudinal(out, config.sigma_longitudinal)
    return out[:n_frozen] + smoothed[n_frozen:]


def _cast_branch(samples, occ, config, n_frozen: int = 0, label: str = "branch"):
    """Rings for every sample; invalid rings dropped with a warning.

    Samples before n_frozen must already be rings (reused verbatim).
    """
    rings = list(samples[:n_frozen])
    n_invalid = 0
    for sample in samples[n_frozen:]:
        ring = _cast_ring(sample, occ, config)
        if ring is None:
            n_invalid += 1
        else:
            rings.append(ring)
    n_cast = len(samples) - n_frozen
    if n_invalid:
        warnings.warn(f"{label}: dropped {n_invalid} of {n_cast} rings with "
                      "centers outside the mask", stacklevel=2)
        if n_invalid * 2 > n_cast:
            raise ReconstructError(
                f"{label}: {n_invalid} of {n_cast} rings invalid (majority)")
    return rings


def reconstruct_branch(branch: BranchCenterline, mask: VoxelVolume,
                       config: ReconstructConfig | None = None) -> TriMesh:
    """Closed tube mesh for one branch centerline against the mask."""
    config = config or ReconstructConfig()
    occ = occupancy_sampler(mask)
    samples = _branch_samples(branch)
    if config.tip_extend:
        head = _extend_samples(*samples[0], occ, config, sign=-1.0)
        tail = _extend_samples(*samples[-1], occ, config, sign=+1.0)
        samples = head[::-1] + samples + tail
    rings = _cast_branch(samples, occ, config)
    if len(rings) < 2:
        raise ReconstructError("branch too short: fewer than 2 valid rings")
    rings = _finalize_rings(rings, config)
    return stitch_rings(rings, cap_ends=True)


# ---------------------------------------------------------------------------
# whole-tree assembly


def _branch_keypoints(tree: KeyPointTree, path):
    """Key points and junction indices for one root-to-leaf path."""
    pts = tree.positions[path]
    keep = [i for i, node in enumerate(path) if tree.degree(node) >= 3]
    return pts, tuple(keep)


def _rotate_toward(t, tau, max_angle):
    """Unit vector t rotated toward tau by at most max_angle radians."""
    c = float(np.clip(t @ tau, -1.0, 1.0))
    axis = np.cross(t, tau)
    s = float(np.linalg.norm(axis))
    if float(np.arctan2(s, c)) <= max_angle:
        return tau / np.linalg.norm(tau)
    if s < 1e-12:
        helper = (np.array([1.0, 0.0, 0.0]) if abs(t[0]) < 0.9
                  else np.array([0.0, 1.0, 0.0]))
        axis = np.cross(t, helper)
        axis /= np.linalg.norm(axis)
    else:
        axis = axis / s
    out = t * np.cos(max_angle) + np.cross(axis, t) * np.sin(max_angle)
    return out / np.linalg.norm(out)


def _steered_samples(seam: CrossSectionRing, cl, config: ReconstructConfig):
    """Ring poses continuing a tube from a junction along a segment curve.

    The tangent steers toward a look-ahead point on the target centerline,
    with the turn rate capped so that consecutive ring planes cannot
    intersect within the largest radius any downstream ring may reach
    (radial_cap_factor times the local caliber, see _cast_ring). The
    swept wall then never folds through itself at a sharp branching
    angle. The wall still lands on the mask boundary: radii are cast
    per ring.
    """
    ds = config.ring_spacing
    r_cap = float(np.max(seam.radii))
    dtheta = ds / (1.25 * config.radial_cap_factor * max(r_cap, config.r_min))
    look = max(3, int(round(0.6 / ds)))
    p = seam.center.copy()
    t = seam.tangent.copy()
    pos = [p]
    tan = [t]
    for i in range(cl.n_samples - 1):
        j = min(i + look, cl.n_samples - 1)
        d = cl.positions[j] - p
        dist = float(np.linalg.norm(d))
        if dist < 0.5 * ds:
            break
        t = _rotate_toward(t, d / dist, dtheta)
        p = p + ds * t
        pos.append(p)
        tan.append(t)
    if len(pos) < 2:
        return []
    pos = np.asarray(pos)
    tan = np.asarray(tan)
    u, v = transport_frames(pos, tan, u0=seam.frame_u)
    return [(pos[i], tan[i], u[i], v[i]) for i in range(1, len(pos))]


def reconstruct_tree(tree: KeyPointTree, mask: VoxelVolume,
                     config: ReconstructConfig | None = None) -> TriMesh:
    """Mesh of the whole tree: per-branch tubes folded by boolean union.

    Branches are root-to-leaf paths cut into segments at junction nodes.
    A segment's rings depend only on the node path up to its end, so they
    are computed once and reused verbatim by every branch running through
    the segment: shared walls coincide bitwise across branch meshes and
    the union resolves them combinatorially. Segments after a junction
    steer from the seam ring under a curvature cap, keeping every swept
    tube free of self-intersections.
    """
    config = config or ReconstructConfig()
    occ = occupancy_sampler(mask)
    branches = split_branches(tree)
    if len(branches) == 1 and len(branches[0]) == 1:
        raise ReconstructError("tree has a single point; nothing to reconstruct")

    cache: dict[tuple, tuple] = {}
    meshes = []
    for b_idx, path in enumerate(branches):
        pts, junctions = _branch_keypoints(tree, path)
        if len(pts) < 2:
            continue
        cuts = [j for j in junctions if 0 < j < len(path) - 1]
        bounds = [0] + cuts + [len(path) - 1]

        rings: list = []
        n_reused = 0
        marks = []  # (prefix key, ring count) at each segment end
        for k in range(len(bounds) - 1):
            a, b = bounds[k], bounds[k + 1]
            key = tuple(path[:b + 1])
            if key in cache:
                rings = list(cache[key])
                n_reused = len(rings)
                continue
            spline = fit_bspline(pts[a:b + 1], decimation=config.decimation)
            cl = resample(spline, spacing=config.ring_spacing)
            if not rings:
                cl = propagate_frames(cl)
                samples = _branch_samples(cl)
                if config.tip_extend:
                    head = _extend_samples(*samples[0], occ, config, sign=-1.0)
                    samples = head[::-1] + samples
            else:
                samples = _steered_samples(rings[-1], cl, config)
            if config.tip_extend and b == len(path) - 1 and samples:
                tail = _extend_samples(*samples[-1], occ, config, sign=+1.0)
                samples = samples + tail
            if samples:
                rings = _cast_branch(rings + samples, occ, config,
                                     n_frozen=len(rings),
                                     label=f"branch {b_idx}")
            marks.append((key, len(rings)))

        if len(rings) < 2:
            warnings.warn(f"branch {b_idx}: fewer than 2 valid rings; skipped",
                          stacklevel=2)
            meshes.append(None)
            continue
        if len(rings) == n_reused:
            meshes.append(None)  # fully shadowed by cached segments
            continue
        rings = _finalize_rings(rings, config, n_frozen=n_reused)
        for key, cnt in marks:
            if cnt >= 2 and key not in cache:
                cache[key] = tuple(rings[:cnt])
        meshes.append(stitch_rings(rings, cap_ends=True))

    live = [m for m in meshes if m is not None]
    if not live:
        raise ReconstructError("no branch produced a mesh")
    return mesh_union(live)
