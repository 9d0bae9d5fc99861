"""Agreement metrics between meshes, masks, and point clouds.

Distance metrics (Hausdorff, ASSD, chamfer) operate on point sets in
world mm and are exact: nearest neighbors come from a KD-tree, which
returns the same answers as the quadratic scan. Mask-based metrics
(Dice, hit ratio) and mesh-based ones (smoothness, segment count) are
combined by evaluate() into a single report row.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .deform import chamfer_loss
from .meshops import TriMesh, voxelize
from .volume import MASK, VoxelVolume

CSV_HEADER = "dice,hd_mm,assd_mm,cd_mm2,smooth,nos,precision,recall,f1,accuracy"

_STRUCT_26 = np.ones((3, 3, 3), dtype=bool)


class MetricsError(ValueError):
    """Raised on empty or mismatched metric inputs."""


def _as_points(obj, name: str) -> np.ndarray:
    pts = np.asarray(obj, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise MetricsError(f"{name}: need a nonempty (N, 3) point cloud")
    if not np.isfinite(pts).all():
        raise MetricsError(f"{name}: points must be finite")
    return pts


@dataclass(frozen=True)
class MetricsReport:
    """One evaluation row; fields are None when the pairing cannot supply them."""
    dice: float | None = None
    hd_mm: float | None = None
    assd_mm: float | None = None
    cd_mm2: float | None = None
    smooth: float | None = None
    nos: int | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    accuracy: float | None = None

    def csv_row(self) -> str:
        cells = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                cells.append("")
            elif f.name == "nos":
                cells.append(str(int(v)))
            else:
                cells.append(f"{v:.9g}")
        return ",".join(cells)

    def text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if f.name == "nos":
                lines.append(f"  {f.name:<10s} {int(v)}")
            else:
                lines.append(f"  {f.name:<10s} {v:.6g}")
        return "\n".join(lines)


def write_report_csv(reports, path_or_buf) -> None:
    """CSV with the fixed header and one row per report."""
    if isinstance(reports, MetricsReport):
        reports = [reports]
    buf = path_or_buf if hasattr(path_or_buf, "write") else None
    text = CSV_HEADER + "\n" + "".join(r.csv_row() + "\n" for r in reports)
    if buf is not None:
        buf.write(text)
    else:
        with open(path_or_buf, "w") as fh:
            fh.write(text)


def report_csv(reports) -> str:
    buf = io.StringIO()
    write_report_csv(reports, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# point-cloud distances


def _directed_nn(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point of a to its nearest neighbor in b."""
    d, _ = cKDTree(b).query(a, k=1)
    return d


def hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance max(sup inf, sup inf) in mm."""
    a = _as_points(a, "hausdorff a")
    b = _as_points(b, "hausdorff b")
    return float(max(_directed_nn(a, b).max(), _directed_nn(b, a).max()))


def assd(a, b) -> float:
    """Average symmetric surface distance: pooled mean of NN distances."""
    a = _as_points(a, "assd a")
    b = _as_points(b, "assd b")
    total = _directed_nn(a, b).sum() + _directed_nn(b, a).sum()
    return float(total / (len(a) + len(b)))


def chamfer(a, b) -> float:
    """Chamfer distance in mm^2: symmetric mean squared NN distance."""
    a = _as_points(a, "chamfer a")
    b = _as_points(b, "chamfer b")
    val, _ = chamfer_loss(a, b, return_grad=False)
    return val


# ---------------------------------------------------------------------------
# mesh metrics


def smooth_metric(mesh: TriMesh) -> float:
    """Mean over interior edges of 1 - cos(angle between face normals).

    0 on a plane; lower is smoother. Scale-invariant.
    """
    pairs = mesh.interior_edge_faces
    if len(pairs) == 0:
        raise MetricsError("smooth_metric: mesh has no interior edges")
    n = mesh.face_normals
    cos = np.einsum("ij,ij->i", n[pairs[:, 0]], n[pairs[:, 1]])
    return float(np.mean(1.0 - np.clip(cos, -1.0, 1.0)))


def nos_metric(obj) -> int:
    """Number of segments: connected components of a mesh or mask.

    Meshes use face adjacency across shared edges; masks use
    26-connectivity over set voxels.
    """
    if isinstance(obj, TriMesh):
        if len(obj.faces) == 0:
            raise MetricsError("nos_metric: empty mesh")
        return obj.face_component_count
    if isinstance(obj, VoxelVolume):
        data = obj.data if obj.kind == MASK else obj.data > 0.5
        if not data.any():
            raise MetricsError("nos_metric: empty mask")
        _, count = ndimage.label(data, structure=_STRUCT_26)
        return int(count)
    raise MetricsError(f"nos_metric: unsupported input {type(obj).__name__}")


# ---------------------------------------------------------------------------
# voxel helpers


def _voxel_centers(mask: VoxelVolume, where: np.ndarray) -> np.ndarray:
    idx = np.argwhere(where)
    return mask.origin + idx * mask.spacing


def surface_voxels(mask: VoxelVolume) -> np.ndarray:
    """Boolean grid of set voxels with at least one empty 6-neighbor.

    Voxels on the grid boundary count as surface: the outside is empty.
    """
    if mask.kind != MASK:
        raise MetricsError("surface_voxels: need a binary mask")
    data = mask.data.astype(bool, copy=False)
    padded = np.pad(data, 1, mode="constant", constant_values=False)
    core = np.ones_like(data, dtype=bool)
    for ax in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        core &= padded[tuple(lo)] & padded[tuple(hi)]
    return data & ~core


def surface_voxel_centers(mask: VoxelVolume) -> np.ndarray:
    """World-mm centers of the mask's surface voxels."""
    surf = surface_voxels(mask)
    if not surf.any():
        raise MetricsError("surface_voxel_centers: mask is empty")
    return _voxel_centers(mask, surf)


def hit_ratio(pred, gt_mask: VoxelVolume, threshold: float = 0.5):
    """Point-vs-annotation agreement at a distance threshold.

    A predicted point is a hit when it lies within threshold mm of the
    nearest set-voxel center. Precision is the hit fraction of the
    prediction; recall is the fraction of mask surface-voxel centers
    within threshold of some predicted point; accuracy pools both.
    """
    pred = _as_points(pred, "hit_ratio pred")
    if gt_mask.kind != MASK or not gt_mask.data.any():
        raise MetricsError("hit_ratio: ground-truth mask is empty")
    set_centers = _voxel_centers(gt_mask, gt_mask.data)
    hits = int(np.sum(_directed_nn(pred, set_centers) < threshold))
    precision = hits / len(pred)

    surf_centers = surface_voxel_centers(gt_mask)
    covered = int(np.sum(_directed_nn(surf_centers, pred) < threshold))
    recall = covered / len(surf_centers)

    f1 = 0.0 if precision + recall == 0 else \
        2.0 * precision * recall / (precision + recall)
    accuracy = (hits + covered) / (len(pred) + len(surf_centers))
    return precision, recall, f1, accuracy


# ---------------------------------------------------------------------------
# surface sampling


def sample_surface(mesh: TriMesh, density: float = 4.0, seed: int = 0) -> np.ndarray:
    """Stratified uniform surface samples, about density points per mm^2.

    Each face receives ceil(density * area) samples (at least one), drawn
    uniformly over the face with the square-root warp, from a generator
    seeded per call: identical inputs give identical samples.
    """
    if len(mesh.faces) == 0:
        raise MetricsError("sample_surface: empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas
    counts = np.ceil(density * areas).astype(np.int64)
    counts[counts < 1] = 1
    total = int(counts.sum())
    face_of = np.repeat(np.arange(len(mesh.faces)), counts)
    r1 = np.sqrt(rng.random(total))
    r2 = rng.random(total)
    tri = mesh.vertices[mesh.faces[face_of]]
    w0 = 1.0 - r1
    w1 = r1 * (1.0 - r2)
    w2 = r1 * r2
    return (w0[:, None] * tri[:, 0] + w1[:, None] * tri[:, 1]
            + w2[:, None] * tri[:, 2])


def dice_masks(a: VoxelVolume, b: VoxelVolume) -> float:
    """Dice overlap of two masks on the same grid."""
    for m in (a, b):
        if m.kind != MASK:
            raise MetricsError("dice_masks: need binary masks")
    if a.dims != b.dims:
        raise MetricsError("dice_masks: grids differ; resample first")
    inter = int(np.sum(a.data & b.data))
    denom = int(a.data.sum()) + int(b.data.sum())
    if denom == 0:
        raise MetricsError("dice_masks: both masks empty")
    return 2.0 * inter / denom


# ---------------------------------------------------------------------------
# combined evaluation


def evaluate(pred: TriMesh, gt: VoxelVolume, density: float = 4.0,
             seed: int = 0, threshold: float = 0.5) -> MetricsReport:
    """Full report of a predicted mesh against a ground-truth mask.

    Dice voxelizes the mesh onto the mask's grid; distance metrics
    compare seeded surface samples of the mesh against the mask's
    surface-voxel centers; the hit ratio uses the mesh vertices.
    """
    if len(pred.faces) == 0 or len(pred.vertices) == 0:
        raise MetricsError("evaluate: empty prediction mesh")
    if gt.kind != MASK or not gt.data.any():
        raise MetricsError("evaluate: empty ground-truth mask")

    vox = voxelize(pred, gt)
    d = dice_masks(vox, gt)

    samples = sample_surface(pred, density=density, seed=seed)
    surf = surface_voxel_centers(gt)
    hd = hausdorff(samples, surf)
    ad = assd(samples, surf)
    cd = chamfer(samples, surf)

    precision, recall, f1, accuracy = hit_ratio(pred.vertices, gt, threshold)

    return MetricsReport(
        dice=d, hd_mm=hd, assd_mm=ad, cd_mm2=cd,
        smooth=smooth_metric(pred), nos=nos_metric(pred),
        precision=precision, recall=recall, f1=f1, accuracy=accuracy,
    )
