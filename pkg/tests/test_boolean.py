import numpy as np
import pytest

from vesselmesh.deform import make_icosphere
from vesselmesh.meshops import MeshError, TriMesh, mesh_union, voxelize
from vesselmesh.volume import MASK, VoxelVolume


def tube_mesh(radius, length, axis, center, n_seg=24, step=0.5):
    """Closed straight tube: vertex rings plus fan caps, outward CCW."""
    axis = np.asarray(axis, float)
    axis = axis / np.linalg.norm(axis)
    ref = np.array([1.0, 0, 0]) if abs(axis[0]) < 0.9 else np.array([0, 1.0, 0])
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)
    n_ring = int(round(length / step)) + 1
    ts = np.linspace(-length / 2, length / 2, n_ring)
    ang = np.arange(n_seg) * 2 * np.pi / n_seg
    verts, faces = [], []
    for t in ts:
        c = np.asarray(center, float) + t * axis
        for a in ang:
            verts.append(c + radius * (np.cos(a) * u + np.sin(a) * v))
    for i in range(n_ring - 1):
        a0, b0 = i * n_seg, (i + 1) * n_seg
        for j in range(n_seg):
            k = (j + 1) % n_seg
            faces.append((a0 + j, a0 + k, b0 + j))
            faces.append((a0 + k, b0 + k, b0 + j))
    c0 = len(verts)
    verts.append(np.asarray(center, float) - length / 2 * axis)
    c1 = len(verts)
    verts.append(np.asarray(center, float) + length / 2 * axis)
    last = (n_ring - 1) * n_seg
    for j in range(n_seg):
        k = (j + 1) % n_seg
        faces.append((c0, k, j))
        faces.append((c1, last + j, last + k))
    m = TriMesh(np.array(verts), np.array(faces))
    assert m.signed_volume() > 0
    return m


def mask_template(lo, hi, spacing):
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    dims = tuple(np.ceil((hi - lo) / spacing).astype(int))
    return VoxelVolume(np.zeros(dims, dtype=bool), spacing=(spacing,) * 3,
                       origin=tuple(lo + spacing / 2), kind=MASK)


@pytest.fixture(scope="module")
def sphere():
    return make_icosphere(2, radius=1.0).mesh


class TestDegenerateUnions:
    def test_single_input_passthrough(self, sphere):
        u = mesh_union([sphere])
        assert len(u.faces) == len(sphere.faces)
        assert abs(u.signed_volume() - sphere.signed_volume()) < 1e-12

    def test_disjoint_is_concatenation(self, sphere):
        far = make_icosphere(2, radius=1.0, center=(5.0, 0.0, 0.0)).mesh
        u = mesh_union([sphere, far])
        assert len(u.faces) == len(sphere.faces) + len(far.faces)
        assert u.face_component_count == 2
        assert u.is_watertight

    def test_self_union_idempotent(self, sphere):
        u = mesh_union([sphere, sphere])
        v0 = sphere.signed_volume()
        assert u.is_watertight
        assert u.face_component_count == 1
        assert abs(u.signed_volume() - v0) < 1e-3 * v0

    def test_empty_input_rejected(self):
        with pytest.raises(MeshError):
            mesh_union([])

    def test_non_watertight_rejected(self, sphere):
        holed = TriMesh(sphere.vertices, sphere.faces[1:], validate=False)
        with pytest.raises(MeshError, match="watertight"):
            mesh_union([sphere, holed])

    def test_inconsistent_orientation_rejected(self, sphere):
        f = sphere.faces.copy()
        f[0] = f[0, ::-1]
        bad = TriMesh(sphere.vertices, f, validate=False)
        with pytest.raises(MeshError, match="orient"):
            mesh_union([sphere, bad])


class TestOverlappingSpheres:
    def test_watertight_single_component(self, sphere):
        moved = make_icosphere(2, radius=1.0, center=(1.2, 0.0, 0.0)).mesh
        u = mesh_union([sphere, moved])
        assert u.is_watertight
        assert u.is_orientation_consistent
        assert u.face_component_count == 1
        assert u.euler_characteristic == 2

    def test_volume_bounds(self, sphere):
        moved = make_icosphere(2, radius=1.0, center=(1.2, 0.0, 0.0)).mesh
        u = mesh_union([sphere, moved])
        v = u.signed_volume()
        va, vb = sphere.signed_volume(), moved.signed_volume()
        assert v >= max(va, vb) * (1 - 1e-3)
        assert v <= (va + vb) * (1 + 1e-3)

    def test_volume_against_lens_formula(self, sphere):
        # equal spheres radius r at distance d overlap in a lens of volume
        # pi (4 r + d) (2 r - d)^2 / 12; the faceted icosphere carries a
        # uniform volume deficit, so compare deficit-scaled expectations
        moved = make_icosphere(2, radius=1.0, center=(1.2, 0.0, 0.0)).mesh
        u = mesh_union([sphere, moved])
        exact_sphere = 4.0 * np.pi / 3.0
        lens = np.pi * (4 + 1.2) * (2 - 1.2) ** 2 / 12.0
        exact_union = 2 * exact_sphere - lens
        scale = sphere.signed_volume() / exact_sphere
        assert u.signed_volume() == pytest.approx(exact_union * scale, rel=0.02)


@pytest.fixture(scope="module")
def crossing():
    a = tube_mesh(1.5, 8.0, (0, 0, 1), (0, 0, 0))
    b = tube_mesh(1.5, 8.0, (1, 0, 0), (0, 0, 0))
    return a, b, mesh_union([a, b])


class TestTubeCrossing:
    def test_topology(self, crossing):
        a, b, u = crossing
        assert u.is_watertight
        assert u.is_orientation_consistent
        assert u.face_component_count == 1
        assert u.euler_characteristic == 2

    def test_volume_within_bounds(self, crossing):
        a, b, u = crossing
        v = u.signed_volume()
        assert max(a.signed_volume(), b.signed_volume()) * (1 - 1e-3) <= v
        assert v <= (a.signed_volume() + b.signed_volume()) * (1 + 1e-3)

    def test_volume_against_fine_voxel_oracle(self, crossing):
        a, b, u = crossing
        tmpl = mask_template((-4.6, -2.1, -4.6), (4.6, 2.1, 4.6), 0.1)
        vox = voxelize(u, tmpl)
        v_ref = float(vox.data.sum()) * 0.1 ** 3
        assert u.signed_volume() == pytest.approx(v_ref, rel=0.02)

    def test_order_insensitive_voxelization(self, crossing):
        a, b, u = crossing
        u_rev = mesh_union([b, a])
        tmpl = mask_template((-4.8, -2.4, -4.8), (4.8, 2.4, 4.8), 0.2)
        v1 = voxelize(u, tmpl)
        v2 = voxelize(u_rev, tmpl)
        assert np.array_equal(v1.data, v2.data)


class TestSharedWalls:
    def test_shared_trunk_rings_merge_cleanly(self):
        # two tubes stacked along z sharing the ring plane at z=0 verbatim:
        # the dedup stage must remove the anti-oriented cap pair
        a = tube_mesh(1.0, 4.0, (0, 0, 1), (0, 0, -2.0))
        b = tube_mesh(1.0, 4.0, (0, 0, 1), (0, 0, 2.0))
        u = mesh_union([a, b])
        assert u.is_watertight
        assert u.face_component_count == 1
        combined = a.signed_volume() + b.signed_volume()
        assert u.signed_volume() == pytest.approx(combined, rel=1e-6)

    def test_three_way_fold(self):
        a = tube_mesh(1.0, 6.0, (0, 0, 1), (0, 0, 0))
        b = tube_mesh(1.0, 6.0, (1, 0, 0), (0, 0, 0))
        c = tube_mesh(1.0, 6.0, (0, 1, 0), (0, 0, 0))
        u = mesh_union([a, b, c])
        assert u.is_watertight
        assert u.face_component_count == 1
        v = u.signed_volume()
        assert v > a.signed_volume()
        assert v < a.signed_volume() + b.signed_volume() + c.signed_volume()


class TestNearTangent:
    def test_tubes_touching_at_finite_angle(self):
        # 30 degree crossing stresses long skinny intersection fragments
        a = tube_mesh(1.0, 8.0, (0, 0, 1), (0, 0, 0), n_seg=16)
        b = tube_mesh(1.0, 8.0, (0.5, 0, np.sqrt(3) / 2), (0, 0, 0), n_seg=16)
        u = mesh_union([a, b])
        assert u.is_watertight
        assert u.face_component_count == 1
        v = u.signed_volume()
        assert max(a.signed_volume(), b.signed_volume()) <= v * (1 + 1e-9)
        assert v <= a.signed_volume() + b.signed_volume()
