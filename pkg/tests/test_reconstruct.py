import numpy as np
import pytest

from vesselmesh.centerline import BranchCenterline, propagate_frames
from vesselmesh.reconstruct import (CrossSectionRing, ReconstructConfig,
                                    ReconstructError, cast_rays,
                                    reconstruct_branch, reconstruct_tree,
                                    smooth_radii_angular,
                                    smooth_radii_longitudinal, stitch_rings)
from vesselmesh.skeleton import KeyPointTree
from vesselmesh.volume import FIELD, MASK, VoxelVolume

AXES = (np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]),
        np.array([0.0, 1.0, 0.0]))


def cylinder_mask(radius=2.0, length=20.0, spacing=0.5, pad=3):
    """Axis-aligned z tube spanning z in [0, length], with empty margins.

    The margins matter: sampling clamps at the grid boundary, so a solid
    that runs to the edge of the grid never reads as exited.
    """
    half = int(np.ceil(radius / spacing)) + pad
    n_xy = 2 * half + 1
    nz = int(np.ceil(length / spacing)) + 1
    ii, jj = np.meshgrid(np.arange(n_xy), np.arange(n_xy), indexing="ij")
    r2 = ((ii - half) ** 2 + (jj - half) ** 2) * spacing ** 2
    data = np.zeros((n_xy, n_xy, nz + 2 * pad), dtype=bool)
    data[:, :, pad:pad + nz] = (r2 <= radius ** 2)[:, :, None]
    vol = VoxelVolume(data, (spacing,) * 3, (0.0, 0.0, -pad * spacing),
                      kind=MASK)
    return vol, np.array([half * spacing, half * spacing])


def straight_centerline(z0, z1, xy, spacing=0.2):
    n = int(round((z1 - z0) / spacing)) + 1
    z = np.linspace(z0, z1, n)
    pos = np.column_stack([np.full(n, xy[0]), np.full(n, xy[1]), z])
    tan = np.tile([0.0, 0.0, 1.0], (n, 1))
    return propagate_frames(BranchCenterline(pos, tan, spacing))


def make_ring(center, radii, frame=AXES):
    t, u, v = frame
    return CrossSectionRing(np.asarray(center, float), t, u, v, radii)


def interior_edge_smoothness(mesh):
    """Mean (1 - cos) over interior edges, computed from first principles."""
    pairs = mesh.interior_edge_faces
    n = mesh.face_normals
    return float(np.mean(1.0 - np.einsum("ij,ij->i",
                                         n[pairs[:, 0]], n[pairs[:, 1]])))


class TestCastRays:
    def test_on_axis_tube(self):
        vol, xy = cylinder_mask()
        r = cast_rays([xy[0], xy[1], 10.0], AXES, vol)
        # voxel centers landing exactly on the circle make the half-voxel
        # bound exact, hence the fuzz
        assert np.all(np.abs(r - 2.0) <= 0.25 + 1e-6)

    def test_off_axis_chords(self):
        vol, xy = cylinder_mask()
        center = [xy[0] + 1.0, xy[1], 10.0]
        r = cast_rays(center, AXES, vol)
        ang = np.arange(24) * 15 * np.pi / 180
        # chord length from an interior point 1 mm off-center of a 2 mm disc
        chord = -np.cos(ang) + np.sqrt(4.0 - np.sin(ang) ** 2)
        assert np.abs(r - chord).max() <= 0.25 + 1e-6
        assert r.min() == pytest.approx(1.0, abs=0.26)
        assert r.max() == pytest.approx(3.0, abs=0.26)

    def test_full_mask_caps_at_r_max(self):
        full = VoxelVolume(np.ones((13, 13, 13), dtype=bool), (0.5,) * 3,
                           (0.0,) * 3, kind=MASK)
        r = cast_rays([3.0, 3.0, 3.0], AXES, full)
        assert np.all(r == 10.0)

    def test_center_outside_is_invalid(self):
        vol, xy = cylinder_mask()
        assert cast_rays([0.0, 0.0, 10.0], AXES, vol) is None

    def test_hole_tolerance_bridges_gap(self):
        # solid slab with a one-voxel air gap: the ray must march through it
        data = np.ones((41, 9, 9), dtype=bool)
        data[20] = False  # 0.5 mm gap at x = 10
        data[0] = data[-1] = False  # genuine exits at both slab ends
        vol = VoxelVolume(data, (0.5,) * 3, (0.0,) * 3, kind=MASK)
        frame = (np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]),
                 np.array([0.0, 1.0, 0.0]))
        r = cast_rays([2.0, 2.0, 2.0], frame, vol,
                      hole_tolerance=1.0, r_max=25.0)
        # ray 0 (+x) crosses the gap and continues to the far slab end
        assert r[0] == pytest.approx(17.75, abs=0.3)
        # a tolerance smaller than the gap stops at the near side instead
        r_tight = cast_rays([2.0, 2.0, 2.0], frame, vol,
                            hole_tolerance=0.2, r_max=25.0)
        assert r_tight[0] == pytest.approx(7.75, abs=0.3)

    def test_requires_mask_kind(self):
        field = VoxelVolume(np.zeros((4, 4, 4)), (1.0,) * 3, (0.0,) * 3,
                            kind=FIELD)
        with pytest.raises(ReconstructError, match="mask"):
            cast_rays([1.0, 1.0, 1.0], AXES, field)


class TestAngularSmoothing:
    def test_constant_unchanged(self):
        out = smooth_radii_angular(np.full(24, 2.0), sigma=1.0)
        assert np.allclose(out, 2.0, atol=1e-12)

    def test_impulse_matches_circular_convolution(self):
        r = np.full(24, 2.0)
        r[7] = 3.0
        out = smooth_radii_angular(r, sigma=1.0)
        # brute-force circular convolution with the same kernel
        x = np.arange(-3, 4)
        k = np.exp(-x ** 2 / 2.0)
        k /= k.sum()
        brute = np.array([sum(k[o + 3] * r[(i + o) % 24] for o in range(-3, 4))
                          for i in range(24)])
        assert np.abs(out - brute).max() <= 1e-12
        assert out[7] == pytest.approx(2.0 + 1.0 * k[3], abs=1e-12)

    def test_sigma_zero_identity(self):
        r = np.linspace(1.0, 3.0, 24)
        assert np.array_equal(smooth_radii_angular(r, sigma=0.0), r)

    def test_mean_preserved(self):
        rng = np.random.default_rng(5)
        r = rng.uniform(1.0, 3.0, 24)
        out = smooth_radii_angular(r, sigma=2.5)
        assert out.mean() == pytest.approx(r.mean(), abs=1e-9)


class TestLongitudinalSmoothing:
    def test_identical_rings_unchanged(self):
        rings = [make_ring((0, 0, z), np.full(24, 2.0)) for z in range(5)]
        out = smooth_radii_longitudinal(rings, sigma=2.0)
        for r in out:
            assert np.allclose(r.radii, 2.0, atol=1e-12)

    def test_single_ring_unchanged(self):
        rings = [make_ring((0, 0, 0), np.full(24, 2.0))]
        out = smooth_radii_longitudinal(rings, sigma=2.0)
        assert len(out) == 1
        assert np.array_equal(out[0].radii, rings[0].radii)

    def test_step_profile_matches_convolution(self):
        values = [2.0] * 10 + [3.0] * 10
        rings = [make_ring((0, 0, 0.2 * i), np.full(24, v))
                 for i, v in enumerate(values)]
        out = smooth_radii_longitudinal(rings, sigma=2.0)
        prof = np.array([r.radii[0] for r in out])
        # replicated-end convolution oracle
        x = np.arange(-6, 7)
        k = np.exp(-x ** 2 / 8.0)
        k /= k.sum()
        seq = np.array(values)
        padded = np.pad(seq, 6, mode="edge")
        brute = np.array([float(k @ padded[i:i + 13]) for i in range(20)])
        assert np.abs(prof - brute).max() <= 1e-12
        assert np.all(np.diff(prof) >= -1e-12)  # monotone through the step

    def test_boundary_points_follow_radii(self):
        values = [2.0] * 5 + [3.0] * 5
        rings = [make_ring((0, 0, 0.2 * i), np.full(24, v))
                 for i, v in enumerate(values)]
        out = smooth_radii_longitudinal(rings, sigma=2.0)
        for ring in out:
            expect = ring.center + ring.radii[0] * ring.frame_u
            assert np.allclose(ring.boundary_points[0], expect, atol=1e-9)


class TestStitchRings:
    def test_two_rings_counts_and_topology(self):
        rings = [make_ring((0, 0, 0), np.full(24, 2.0)),
                 make_ring((0, 0, 1), np.full(24, 2.0))]
        mesh = stitch_rings(rings)
        assert len(mesh.faces) == 96
        assert mesh.is_watertight
        assert mesh.euler_characteristic == 2
        assert mesh.signed_volume() > 0

    def test_51_ring_tube_face_count(self):
        rings = [make_ring((0, 0, 0.2 * i), np.full(24, 2.0)) for i in range(51)]
        mesh = stitch_rings(rings)
        assert len(mesh.faces) == 50 * 48 + 48

    def test_reversed_order_identical(self):
        rng = np.random.default_rng(3)
        rings = [make_ring((0, 0, 0.2 * i), rng.uniform(1.5, 2.5, 24))
                 for i in range(9)]
        fwd = stitch_rings(rings)
        rev = stitch_rings(rings[::-1])
        assert np.array_equal(fwd.vertices, rev.vertices)
        assert np.array_equal(fwd.faces, rev.faces)
        assert rev.signed_volume() > 0

    def test_too_few_rings(self):
        with pytest.raises(ReconstructError, match="2 rings"):
            stitch_rings([make_ring((0, 0, 0), np.full(24, 2.0))])

    def test_open_tube_without_caps(self):
        rings = [make_ring((0, 0, 0), np.full(24, 2.0)),
                 make_ring((0, 0, 1), np.full(24, 2.0))]
        mesh = stitch_rings(rings, cap_ends=False)
        assert len(mesh.faces) == 48
        assert not mesh.is_watertight

    def test_ray_count_mismatch_rejected(self):
        a = make_ring((0, 0, 0), np.full(24, 2.0))
        b = CrossSectionRing(np.array([0.0, 0, 1]), *AXES, np.full(12, 2.0))
        with pytest.raises(ReconstructError, match="ray count"):
            stitch_rings([a, b])


class TestRingType:
    def test_boundary_point_formula(self):
        rng = np.random.default_rng(11)
        radii = rng.uniform(1.0, 3.0, 24)
        ring = make_ring((1.0, -2.0, 5.0), radii)
        ang = np.arange(24) * 15 * np.pi / 180
        for j in (0, 5, 13, 23):
            expect = (np.array([1.0, -2.0, 5.0])
                      + radii[j] * (np.cos(ang[j]) * AXES[1] + np.sin(ang[j]) * AXES[2]))
            assert np.linalg.norm(ring.boundary_points[j] - expect) <= 1e-9

    def test_rejects_bad_frames_and_radii(self):
        t, u, v = AXES
        with pytest.raises(ReconstructError, match="unit"):
            CrossSectionRing(np.zeros(3), t * 2.0, u, v, np.full(24, 1.0))
        with pytest.raises(ReconstructError, match="right-handed"):
            CrossSectionRing(np.zeros(3), t, u, -v, np.full(24, 1.0))
        with pytest.raises(ReconstructError, match="positive"):
            CrossSectionRing(np.zeros(3), t, u, v, np.full(24, -1.0))
        with pytest.raises(ReconstructError, match="at least 8"):
            CrossSectionRing(np.zeros(3), t, u, v, np.full(4, 1.0))


class TestConfig:
    def test_rejects_degenerate_settings(self):
        with pytest.raises(ReconstructError, match="n_rays"):
            ReconstructConfig(n_rays=6)
        with pytest.raises(ReconstructError, match="positive"):
            ReconstructConfig(ray_step=0.0)
        with pytest.raises(ReconstructError, match="r_min"):
            ReconstructConfig(r_min=5.0, r_max=2.0)
        with pytest.raises(ReconstructError, match="nonneg"):
            ReconstructConfig(sigma_angular=-1.0)


class TestReconstructBranch:
    def test_straight_tube_surface_accuracy(self):
        vol, xy = cylinder_mask(radius=2.0, length=20.0, spacing=0.5)
        cl = straight_centerline(1.0, 19.0, xy)
        mesh = reconstruct_branch(cl, vol)
        assert mesh.is_watertight
        assert mesh.euler_characteristic == 2
        # one-sided surface distance to the analytic cylinder over the
        # side vertices (away from the cap fans)
        verts = mesh.vertices
        side = (verts[:, 2] > 1.4) & (verts[:, 2] < 18.6)
        d = np.abs(np.hypot(verts[side, 0] - xy[0], verts[side, 1] - xy[1]) - 2.0)
        assert d.mean() <= 0.25

    def test_straight_tube_is_smooth(self):
        vol, xy = cylinder_mask(radius=2.0, length=20.0, spacing=0.5)
        cl = straight_centerline(1.0, 19.0, xy)
        mesh = reconstruct_branch(cl, vol)
        assert interior_edge_smoothness(mesh) < 0.1

    def test_surface_within_voxel_diagonal(self):
        vol, xy = cylinder_mask(radius=2.0, length=20.0, spacing=0.5)
        cl = straight_centerline(1.0, 19.0, xy)
        mesh = reconstruct_branch(cl, vol)
        verts = mesh.vertices
        side = (verts[:, 2] > 1.4) & (verts[:, 2] < 18.6)
        d = np.abs(np.hypot(verts[side, 0] - xy[0], verts[side, 1] - xy[1]) - 2.0)
        assert d.max() <= 0.5 * np.sqrt(3)

    def test_tip_exit_rings_dropped_watertight(self):
        vol, xy = cylinder_mask(radius=2.0, length=12.5, spacing=0.5)
        cl = straight_centerline(1.0, 18.0, xy)
        with pytest.warns(UserWarning, match="dropped"):
            mesh = reconstruct_branch(cl, vol)
        assert mesh.is_watertight
        assert mesh.vertices[:, 2].max() < 13.0

    def test_majority_invalid_rejected(self):
        vol, xy = cylinder_mask(radius=2.0, length=12.5, spacing=0.5)
        cl = straight_centerline(1.0, 40.0, xy)
        with pytest.warns(UserWarning, match="dropped"):
            with pytest.raises(ReconstructError, match="invalid"):
                reconstruct_branch(cl, vol)

    def test_curved_tube_volume_matches_torus_segment(self):
        # quarter arc, centerline circle radius 10, tube radius 2
        R, r, sp = 10.0, 2.0, 0.4
        ox, oy, oz = -4.0, -4.0, -3.2
        xs = ox + (np.arange(44) + 0.0) * sp
        ys = oy + (np.arange(44) + 0.0) * sp
        zs = oz + (np.arange(17) + 0.0) * sp
        X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
        rho = np.hypot(X, Y)
        torus = (rho - R) ** 2 + Z ** 2 <= r ** 2
        quarter = (X >= 0) & (Y >= 0)
        vol = VoxelVolume(torus & quarter, (sp,) * 3, (ox, oy, oz), kind=MASK)

        phi0, phi1 = 0.04, np.pi / 2 - 0.04
        n_s = int(np.round((phi1 - phi0) * R / 0.2)) + 1
        phi = np.linspace(phi0, phi1, n_s)
        pos = np.column_stack([R * np.cos(phi), R * np.sin(phi), np.zeros(n_s)])
        tan = np.column_stack([-np.sin(phi), np.cos(phi), np.zeros(n_s)])
        cl = propagate_frames(BranchCenterline(pos, tan, (phi1 - phi0) * R / (n_s - 1)))
        mesh = reconstruct_branch(cl, vol)
        assert mesh.is_watertight
        expect = (phi1 - phi0) * R * np.pi * r ** 2
        assert mesh.signed_volume() == pytest.approx(expect, rel=0.05)

    def test_tip_extension_reaches_mask_end(self):
        vol, xy = cylinder_mask(radius=2.0, length=20.0, spacing=0.5)
        short = straight_centerline(2.0, 18.0, xy)
        plain = reconstruct_branch(short, vol)
        extended = reconstruct_branch(short, vol,
                                      ReconstructConfig(tip_extend=True))
        assert extended.vertices[:, 2].max() > plain.vertices[:, 2].max() + 0.5
        assert extended.vertices[:, 2].min() < plain.vertices[:, 2].min() - 0.5
        assert extended.is_watertight


def capsule_mask(segments, radius, spacing, lo, hi):
    """Mask of a union of capsules given by (p, q) segment endpoints."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    dims = np.ceil((hi - lo) / spacing).astype(int)
    xs = lo[0] + np.arange(dims[0]) * spacing
    ys = lo[1] + np.arange(dims[1]) * spacing
    zs = lo[2] + np.arange(dims[2]) * spacing
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    pts = np.stack([X, Y, Z], axis=-1)
    inside = np.zeros(tuple(dims), dtype=bool)
    for p, q in segments:
        p = np.asarray(p, float)
        d = np.asarray(q, float) - p
        L2 = float(d @ d)
        t = np.clip(((pts - p) @ d) / L2, 0.0, 1.0)
        nearest = p + t[..., None] * d
        inside |= np.linalg.norm(pts - nearest, axis=-1) <= radius
    return VoxelVolume(inside, (spacing,) * 3, tuple(lo), kind=MASK)


class TestReconstructTree:
    def make_y(self):
        """Trunk along z splitting into two 30-degree arms."""
        trunk = [(0.0, 0.0, 0.5 * k) for k in range(17)]  # z = 0..8
        d_a = np.array([0.5, 0.0, np.sqrt(3) / 2])
        d_b = np.array([-0.5, 0.0, np.sqrt(3) / 2])
        top = np.array([0.0, 0.0, 8.0])
        arm_a = [tuple(top + 0.5 * k * d_a) for k in range(1, 13)]
        arm_b = [tuple(top + 0.5 * k * d_b) for k in range(1, 13)]
        pos = np.array(trunk + arm_a + arm_b)
        parents = list(range(-1, 16)) + [16] + list(range(17, 28)) \
            + [16] + list(range(29, 40))
        tree = KeyPointTree(pos, np.array(parents), root=0)
        segs = [((0, 0, 0), (0, 0, 8.0)),
                (tuple(top), tuple(top + 6.0 * d_a)),
                (tuple(top), tuple(top + 6.0 * d_b))]
        mask = capsule_mask(segs, radius=1.5, spacing=0.4,
                            lo=(-7.0, -3.4, -2.0), hi=(7.0, 3.4, 16.0))
        return tree, mask

    def test_y_tree_single_watertight_component(self):
        tree, mask = self.make_y()
        mesh = reconstruct_tree(tree, mask)
        assert mesh.is_watertight
        assert mesh.is_orientation_consistent
        assert mesh.face_component_count == 1
        assert mesh.euler_characteristic == 2

    def test_y_tree_volume_plausible(self):
        tree, mask = self.make_y()
        mesh = reconstruct_tree(tree, mask)
        v = mesh.signed_volume()
        mask_volume = float(mask.data.sum()) * 0.4 ** 3
        assert v == pytest.approx(mask_volume, rel=0.25)

    def test_single_branch_tree(self):
        vol, xy = cylinder_mask(radius=2.0, length=20.0, spacing=0.5)
        n = 37
        pos = np.column_stack([np.full(n, xy[0]), np.full(n, xy[1]),
                               np.linspace(1.0, 19.0, n)])
        tree = KeyPointTree(pos, np.array([-1] + list(range(n - 1))), root=0)
        mesh = reconstruct_tree(tree, vol)
        assert mesh.is_watertight
        assert mesh.face_component_count == 1
