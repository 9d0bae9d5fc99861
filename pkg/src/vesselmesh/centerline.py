"""Branch centerlines: spline fitting, arc-length resampling, and frames.

Key points from the skeleton are interpolated with a cubic B-spline
(natural end conditions), resampled at uniform arc length, and equipped
with rotation-minimizing cross-section frames computed by the
double-reflection method. Frenet frames are deliberately avoided: they are
undefined on straight runs and flip at inflections, which would scramble
the angular ordering of cast rays downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.interpolate import make_interp_spline


class CenterlineError(ValueError):
    pass


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)


@dataclass(frozen=True)
class BranchCenterline:
    """Ordered samples along one branch at (nearly) uniform arc spacing.

    frame_u / frame_v are None until propagate_frames fills them; when
    present, {tangent, u, v} is right-handed orthonormal at each sample.
    The final gap may be shorter than arc_spacing (endpoint rule).
    """

    positions: np.ndarray
    tangents: np.ndarray
    arc_spacing: float
    frame_u: np.ndarray | None = None
    frame_v: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        tan = np.asarray(self.tangents, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 2:
            raise CenterlineError("centerline needs >= 2 samples of 3d positions")
        if tan.shape != pos.shape:
            raise CenterlineError("tangent array shape must match positions")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(tan))):
            raise CenterlineError("non-finite centerline data")
        if np.max(np.abs(np.linalg.norm(tan, axis=1) - 1.0)) > 1e-9:
            raise CenterlineError("tangents must be unit vectors")
        gaps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
        sp = float(self.arc_spacing)
        if sp <= 0:
            raise CenterlineError("arc_spacing must be positive")
        # uniform spacing within 10%; the terminal gap may only be short
        if len(gaps) > 1 and np.any(np.abs(gaps[:-1] - sp) > 0.1 * sp):
            raise CenterlineError("sample spacing deviates more than 10% from nominal")
        if gaps[-1] > 1.1 * sp:
            raise CenterlineError("terminal gap exceeds nominal spacing")
        object.__setattr__(self, "positions", _ro(pos))
        object.__setattr__(self, "tangents", _ro(tan))
        object.__setattr__(self, "arc_spacing", sp)
        if (self.frame_u is None) != (self.frame_v is None):
            raise CenterlineError("frame_u and frame_v must be set together")
        if self.frame_u is not None:
            u = np.asarray(self.frame_u, dtype=np.float64)
            v = np.asarray(self.frame_v, dtype=np.float64)
            if u.shape != pos.shape or v.shape != pos.shape:
                raise CenterlineError("frame array shapes must match positions")
            for arr in (u, v):
                if np.max(np.abs(np.linalg.norm(arr, axis=1) - 1.0)) > 1e-9:
                    raise CenterlineError("frame vectors must be unit length")
            if (np.max(np.abs(np.einsum("ij,ij->i", tan, u))) > 1e-9
                    or np.max(np.abs(np.einsum("ij,ij->i", tan, v))) > 1e-9
                    or np.max(np.abs(np.einsum("ij,ij->i", u, v))) > 1e-9):
                raise CenterlineError("frame must be orthogonal")
            if np.max(np.linalg.norm(np.cross(tan, u) - v, axis=1)) > 1e-9:
                raise CenterlineError("frame must be right-handed (t x u = v)")
            object.__setattr__(self, "frame_u", _ro(u))
            object.__setattr__(self, "frame_v", _ro(v))

    @property
    def n_samples(self) -> int:
        return len(self.positions)

    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.positions, axis=0), axis=1).sum())


def _ro(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Spline:
    """Parametric curve on [0, 1] wrapping a vector-valued B-spline."""

    _bspl: object
    _dbspl: object

    def eval(self, u):
        return self._bspl(np.clip(u, 0.0, 1.0))

    def deriv(self, u):
        return self._dbspl(np.clip(u, 0.0, 1.0))

    def speed(self, u):
        d = self.deriv(u)
        return np.linalg.norm(np.atleast_2d(d), axis=1)


def dedup_points(points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Drop consecutive duplicates (within tol)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return pts
    keep = [0]
    for i in range(1, len(pts)):
        if np.linalg.norm(pts[i] - pts[keep[-1]]) > tol:
            keep.append(i)
    return pts[keep]


def decimate_polyline(points: np.ndarray, spacing: float, keep=()) -> np.ndarray:
    """Keep roughly every spacing mm along the polyline.

    The first and last points are always retained, as is any index listed
    in keep (junctions must survive so sibling branches share them).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if spacing <= 0:
        raise CenterlineError("decimation spacing must be positive")
    if len(pts) <= 2:
        return pts
    forced = set(int(k) for k in keep) | {0, len(pts) - 1}
    out = [0]
    acc = 0.0
    for i in range(1, len(pts)):
        acc += float(np.linalg.norm(pts[i] - pts[i - 1]))
        if i in forced or acc >= spacing:
            out.append(i)
            acc = 0.0
    if out[-1] != len(pts) - 1:
        out.append(len(pts) - 1)
    return pts[out]


def fit_bspline(key_points, decimation: float | None = None, keep=()) -> Spline:
    """Interpolating B-spline through the key points.

    Consecutive duplicates are dropped; with decimation, intermediate
    points are thinned to about one per `decimation` mm first. Cubic with
    natural end conditions when enough points exist; 2 or 3 points degrade
    to linear / quadratic.
    """
    pts = np.asarray(key_points, dtype=np.float64).reshape(-1, 3)
    if decimation is not None:
        pts = decimate_polyline(pts, decimation, keep=keep)
    pts = dedup_points(pts)
    n = len(pts)
    if n < 2:
        raise CenterlineError("need >= 2 distinct key points")
    chord = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    u = np.concatenate([[0.0], np.cumsum(chord)])
    u /= u[-1]
    if n == 2:
        k, bc = 1, None
    elif n == 3:
        k, bc = 2, None
    else:
        k, bc = 3, "natural"
    bspl = make_interp_spline(u, pts, k=k, bc_type=bc, axis=0)
    return Spline(bspl, bspl.derivative())


def arc_length(spline: Spline, u0: float = 0.0, u1: float = 1.0) -> float:
    """Adaptive-quadrature arc length of the curve segment."""
    val, _ = integrate.quad(lambda t: float(spline.speed(np.atleast_1d(t))[0]),
                            u0, u1, limit=200)
    return float(val)


def _panel_lengths(spline: Spline, breaks: np.ndarray) -> np.ndarray:
    """Gauss-Legendre (24-node) length of each [breaks[i], breaks[i+1]]."""
    a = breaks[:-1]
    h = np.diff(breaks)
    nodes = a[:, None] + (h[:, None] * (_GL_NODES[None, :] + 1.0) * 0.5)
    speeds = spline.speed(nodes.reshape(-1)).reshape(nodes.shape)
    return (h * 0.5) * (speeds @ _GL_WEIGHTS)


def _invert_arc_lengths(spline: Spline, targets: np.ndarray,
                        breaks: np.ndarray, cumlen: np.ndarray) -> np.ndarray:
    """Bisection per target arc length against the cumulative panel table."""
    idx = np.clip(np.searchsorted(cumlen, targets, side="right") - 1, 0,
                  len(breaks) - 2)
    lo = breaks[idx].copy()
    hi = breaks[idx + 1].copy()
    base = cumlen[idx]
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        # cumulative length from panel start to mid, all targets at once
        h = mid - breaks[idx]
        nodes = breaks[idx][:, None] + h[:, None] * (_GL_NODES[None, :] + 1.0) * 0.5
        speeds = spline.speed(nodes.reshape(-1)).reshape(nodes.shape)
        s_mid = base + (h * 0.5) * (speeds @ _GL_WEIGHTS)
        too_short = s_mid < targets
        lo = np.where(too_short, mid, lo)
        hi = np.where(too_short, hi, mid)
        if np.max(hi - lo) < 1e-13:
            break
    return 0.5 * (lo + hi)


def resample(spline: Spline, spacing: float = 0.2) -> BranchCenterline:
    """Uniform arc-length samples; the final sample is the curve endpoint."""
    if spacing <= 0:
        raise CenterlineError("spacing must be positive")
    n_panels = 256
    breaks = np.linspace(0.0, 1.0, n_panels + 1)
    panel = _panel_lengths(spline, breaks)
    cumlen = np.concatenate([[0.0], np.cumsum(panel)])
    total = float(cumlen[-1])

    n_whole = int(np.floor(total / spacing + 1e-9))
    arcs = np.arange(n_whole + 1) * spacing
    if total - arcs[-1] > 1e-9:
        arcs = np.append(arcs, total)
    else:
        arcs[-1] = total
    params = _invert_arc_lengths(spline, arcs, breaks, cumlen)
    params[0], params[-1] = 0.0, 1.0

    pos = np.atleast_2d(spline.eval(params))
    der = np.atleast_2d(spline.deriv(params))
    norms = np.linalg.norm(der, axis=1)
    if np.any(norms < 1e-12):
        raise CenterlineError("degenerate spline tangent during resampling")
    return BranchCenterline(pos, der / norms[:, None], arc_spacing=spacing)


def propagate_frames(cl: BranchCenterline) -> BranchCenterline:
    """Rotation-minimizing frames along the samples (double reflection)."""
    u, v = transport_frames(cl.positions, cl.tangents)
    return BranchCenterline(cl.positions, cl.tangents, cl.arc_spacing,
                            frame_u=u, frame_v=v)


def transport_frames(pos, t, u0=None):
    """Double-reflection frame transport over raw sample arrays.

    u0 seeds the first frame (must be unit, orthogonal to t[0]); when omitted
    it is built from the world axis least aligned with the first tangent.
    Returns (u, v) with an exactly orthonormal right-handed (t, u, v) triad.
    """
    n = len(t)
    if u0 is None:
        axis = np.argmin(np.abs(t[0]))
        a = np.zeros(3)
        a[axis] = 1.0
        u0 = np.cross(t[0], a)
        nrm = np.linalg.norm(u0)
        if nrm < 1e-12:
            raise CenterlineError("cannot seed frame: degenerate tangent")
        u0 = u0 / nrm
    u = np.empty_like(t)
    u[0] = u0

    for i in range(n - 1):
        v1 = pos[i + 1] - pos[i]
        c1 = float(v1 @ v1)
        if c1 < 1e-20:
            u[i + 1] = u[i]
            continue
        uL = u[i] - (2.0 / c1) * (v1 @ u[i]) * v1
        tL = t[i] - (2.0 / c1) * (v1 @ t[i]) * v1
        v2 = t[i + 1] - tL
        c2 = float(v2 @ v2)
        if c2 < 1e-20:
            ui = uL
        else:
            ui = uL - (2.0 / c2) * (v2 @ uL) * v2
        # strip numerical drift out of the frame
        ui = ui - (ui @ t[i + 1]) * t[i + 1]
        u[i + 1] = ui / np.linalg.norm(ui)
    v = np.cross(t, u)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    # exact right-handed orthonormal triad: recompute u = v x t
    u = np.cross(v, t)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u, np.cross(t, u)


def save_centerline(cl: BranchCenterline, path) -> None:
    """VMCL1 text: header line, then `x y z tx ty tz` per sample."""
    with open(path, "w") as fh:
        fh.write("VMCL1\n")
        for p, t in zip(cl.positions, cl.tangents):
            fh.write("%.17g %.17g %.17g %.17g %.17g %.17g\n" % (*p, *t))


def load_centerline(path) -> BranchCenterline:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "VMCL1":
            raise CenterlineError(f"bad centerline header {header!r}")
        rows = []
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6:
                raise CenterlineError(f"line {line_no}: expected 6 fields")
            rows.append([float(x) for x in parts])
    arr = np.asarray(rows, dtype=np.float64)
    if len(arr) < 2:
        raise CenterlineError("centerline file has < 2 samples")
    pos, tan = arr[:, :3], arr[:, 3:]
    tan = tan / np.linalg.norm(tan, axis=1, keepdims=True)
    gaps = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    spacing = float(np.median(gaps))
    return BranchCenterline(pos, tan, arc_spacing=spacing)
