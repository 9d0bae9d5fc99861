import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesselmesh import volume as vol
from vesselmesh.volume import (
    FIELD,
    MASK,
    FeatureGrid,
    VolumeError,
    VoxelVolume,
    connected_components,
    crop,
    dice,
    load_volume,
    sample_trilinear,
    save_volume,
)


def _mask(data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    return VoxelVolume(np.asarray(data), spacing, origin, kind=MASK)


def test_invariants_rejected():
    with pytest.raises(VolumeError):
        VoxelVolume(np.zeros((2, 2)), (1, 1, 1), (0, 0, 0))
    with pytest.raises(VolumeError):
        VoxelVolume(np.zeros((2, 2, 2)), (1, 0, 1), (0, 0, 0))
    with pytest.raises(VolumeError):
        VoxelVolume(np.full((2, 2, 2), 3.0), (1, 1, 1), (0, 0, 0), kind=MASK)


def test_world_index_bijection():
    v = _mask(np.ones((3, 4, 5)), spacing=(0.5, 0.25, 2.0), origin=(-1.0, 3.0, 0.5))
    idx = np.array([[0, 0, 0], [2, 3, 4], [1, 2, 3]])
    world = v.index_to_world(idx)
    assert np.allclose(world[0], (-1.0, 3.0, 0.5))
    assert np.allclose(world[1], (-1.0 + 2 * 0.5, 3.0 + 3 * 0.25, 0.5 + 4 * 2.0))
    back = v.world_to_index(world)
    assert np.allclose(back, idx, atol=1e-12)


# ---------------------------------------------------------------------------
# raw format


def test_vmv_round_trip_constant_volume(tmp_path):
    # 2x2x2 of ones at spacing 0.5 -> 8 set voxels
    p = tmp_path / "ones.vmv"
    save_volume(_mask(np.ones((2, 2, 2)), spacing=(0.5, 0.5, 0.5)), p)
    v = load_volume(p)
    assert v.kind == MASK
    assert v.count() == 8
    assert np.allclose(v.spacing, 0.5)


def test_vmv_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(7)
    data = rng.random((4, 3, 5)).astype(np.float32).astype(np.float64)
    v0 = VoxelVolume(data, (0.3, 0.7, 1.1), (-2.0, 0.25, 9.0), kind=FIELD)
    p1, p2 = tmp_path / "a.vmv", tmp_path / "b.vmv"
    save_volume(v0, p1)
    v1 = load_volume(p1)
    save_volume(v1, p2)
    v2 = load_volume(p2)
    assert np.array_equal(v1.data, v2.data)
    assert np.array_equal(v1.spacing, v2.spacing)
    assert np.array_equal(v1.origin, v2.origin)
    assert p1.read_bytes() == p2.read_bytes()


def test_vmv_payload_is_x_fastest(tmp_path):
    data = np.arange(8, dtype=float).reshape((2, 2, 2), order="F")  # flat value = linear index
    v = VoxelVolume(data, (1, 1, 1), (0, 0, 0), kind=FIELD)
    p = tmp_path / "lin.vmv"
    save_volume(v, p)
    blob = p.read_bytes().split(b"\n", 1)[1]
    flat = np.frombuffer(blob, dtype="<f4")
    assert np.array_equal(flat, np.arange(8, dtype=np.float32))


def test_float_mask_threshold(tmp_path):
    data = np.zeros((2, 2, 2), dtype=np.float64)
    data[0, 0, 0] = 0.2
    data[1, 1, 1] = 0.7
    p = tmp_path / "soft.vmv"
    save_volume(VoxelVolume(data, (1, 1, 1), (0, 0, 0), kind=FIELD), p)
    m = load_volume(p, as_mask=True)
    assert m.kind == MASK
    assert m.count() == 1
    assert m.data[1, 1, 1] == 1 and m.data[0, 0, 0] == 0


def test_vmv_errors(tmp_path):
    p = tmp_path / "bad.vmv"
    p.write_bytes(b"VMV1 2 2 2 1 1 1 0 0 0 u8\n\x01\x02")  # 2 bytes, needs 8
    with pytest.raises(VolumeError, match="payload"):
        load_volume(p, format_hint="vmv")
    p2 = tmp_path / "bad2.vmv"
    p2.write_bytes(b"VMV1 2 2 2 1 1 1 0 0 0 i64\n" + b"\x00" * 64)
    with pytest.raises(VolumeError, match="datatype"):
        load_volume(p2, format_hint="vmv")
    with pytest.raises(VolumeError, match="no such file"):
        load_volume(tmp_path / "missing.vmv")


# ---------------------------------------------------------------------------
# NIfTI subset


def _write_nifti(path, data, pixdim=(1.0, 1.0, 1.0), magic=b"n+1\x00", datatype=2):
    nx, ny, nz = data.shape
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, 8 if datatype == 2 else 32)
    struct.pack_into("<8f", hdr, 76, 0.0, *pixdim, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    hdr[344:348] = magic
    np_dtype = "<u1" if datatype == 2 else "<f4"
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00" * 4)  # pad to vox_offset 352
        fh.write(np.asarray(data).astype(np_dtype).ravel(order="F").tobytes())


def test_nifti_roundtrip(tmp_path):
    data = np.zeros((3, 4, 2), dtype=np.uint8)
    data[1, 2, 0] = 1
    data[0, 0, 1] = 1
    p = tmp_path / "m.nii"
    _write_nifti(p, data, pixdim=(0.5, 0.5, 0.625))
    v = load_volume(p)
    assert v.kind == MASK
    assert v.dims == (3, 4, 2)
    assert np.allclose(v.spacing, (0.5, 0.5, 0.625))
    assert np.array_equal(v.data, data)


def test_nifti_bad_magic(tmp_path):
    p = tmp_path / "bad.nii"
    _write_nifti(p, np.zeros((2, 2, 2), dtype=np.uint8), magic=b"ni1\x00")
    with pytest.raises(VolumeError, match="magic"):
        load_volume(p, format_hint="nifti")


def test_nifti_unsupported_datatype(tmp_path):
    p = tmp_path / "bad16.nii"
    _write_nifti(p, np.zeros((2, 2, 2), dtype=np.uint8), datatype=4)
    with pytest.raises(VolumeError, match="datatype"):
        load_volume(p)


# ---------------------------------------------------------------------------
# connected components


def test_components_empty():
    _, n = connected_components(_mask(np.zeros((3, 3, 3))))
    assert n == 0


def test_components_corner_touch_is_connected():
    data = np.zeros((3, 3, 3))
    data[0, 0, 0] = 1
    data[1, 1, 1] = 1  # touches only at a corner
    _, n = connected_components(_mask(data))
    assert n == 1


def test_components_two_tubes():
    data = np.zeros((7, 3, 10))
    data[1, 1, :] = 1
    data[4, 1, :] = 1  # separated by 2 empty voxels along x
    labels, n = connected_components(_mask(data))
    assert n == 2
    # deterministic first-visit order: tube at x=1 is seen first
    assert labels.data[1, 1, 0] == 1
    assert labels.data[4, 1, 0] == 2


def _flood_fill_count(data):
    # oracle: BFS flood fill with 26-neighborhood
    data = np.asarray(data) > 0
    seen = np.zeros_like(data, dtype=bool)
    count = 0
    offs = [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)
            if (i, j, k) != (0, 0, 0)]
    for idx in np.argwhere(data):
        if seen[tuple(idx)]:
            continue
        count += 1
        stack = [tuple(idx)]
        seen[tuple(idx)] = True
        while stack:
            x, y, z = stack.pop()
            for dx, dy, dz in offs:
                p = (x + dx, y + dy, z + dz)
                if all(0 <= p[a] < data.shape[a] for a in range(3)) and data[p] and not seen[p]:
                    seen[p] = True
                    stack.append(p)
    return count


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**30))
def test_components_match_flood_fill_oracle(seed):
    rng = np.random.default_rng(seed)
    data = (rng.random((6, 6, 6)) < 0.25).astype(np.uint8)
    _, n = connected_components(_mask(data))
    assert n == _flood_fill_count(data)


def test_components_invariant_under_grid_symmetry():
    rng = np.random.default_rng(3)
    data = (rng.random((5, 6, 7)) < 0.3).astype(np.uint8)
    _, n = connected_components(_mask(data))
    for perm in [(1, 0, 2), (2, 1, 0), (0, 2, 1)]:
        _, np_ = connected_components(_mask(np.transpose(data, perm)))
        assert np_ == n
    _, nf = connected_components(_mask(data[::-1].copy()))
    assert nf == n


# ---------------------------------------------------------------------------
# dice


def test_dice_values():
    a = np.zeros((3, 3, 3))
    a[0, 0, 0] = 1
    a[1, 1, 1] = 1
    b = np.zeros((3, 3, 3))
    b[1, 1, 1] = 1
    b[2, 2, 2] = 1
    assert dice(_mask(a), _mask(a)) == 1.0
    assert dice(_mask(a), _mask(b)) == pytest.approx(0.5)  # |A|=2,|B|=2,|A∩B|=1
    c = np.zeros((3, 3, 3))
    c[0, 2, 0] = 1
    assert dice(_mask(a), _mask(c)) == 0.0
    assert dice(_mask(np.zeros((3, 3, 3))), _mask(np.zeros((3, 3, 3)))) == 1.0
    with pytest.raises(VolumeError, match="dims"):
        dice(_mask(a), _mask(np.zeros((2, 3, 3))))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**30))
def test_dice_symmetry(seed):
    rng = np.random.default_rng(seed)
    a = _mask((rng.random((4, 4, 4)) < 0.4).astype(np.uint8))
    b = _mask((rng.random((4, 4, 4)) < 0.4).astype(np.uint8))
    assert dice(a, b) == dice(b, a)
    if a.count():
        assert dice(a, a) == 1.0


# ---------------------------------------------------------------------------
# trilinear sampling


def _grid_from(fn, dims, spacing=(1, 1, 1), origin=(0, 0, 0)):
    idx = np.indices(dims).astype(float)
    world = [origin[a] + idx[a] * spacing[a] for a in range(3)]
    data = fn(*world)
    base = VoxelVolume(data, spacing, origin, kind=FIELD)
    return FeatureGrid(base, data[None])


def test_trilinear_constant():
    g = _grid_from(lambda x, y, z: np.full_like(x, 3.0), (4, 4, 4))
    assert sample_trilinear(g, (1.3, 2.7, 0.2))[0] == pytest.approx(3.0, abs=1e-12)


def test_trilinear_reproduces_linear_field():
    g = _grid_from(lambda x, y, z: x, (5, 4, 4), spacing=(0.5, 1, 1), origin=(-1, 0, 0))
    rng = np.random.default_rng(11)
    pts = np.column_stack([
        rng.uniform(-1, 1, 20),
        rng.uniform(0, 3, 20),
        rng.uniform(0, 3, 20),
    ])
    vals = sample_trilinear(g, pts)
    assert np.allclose(vals[:, 0], pts[:, 0], atol=1e-12)


def test_trilinear_exact_at_centers():
    rng = np.random.default_rng(5)
    data = rng.random((4, 5, 6))
    base = VoxelVolume(data, (0.7, 0.3, 1.3), (2, -1, 0), kind=FIELD)
    g = FeatureGrid(base, data[None])
    idx = np.array([[0, 0, 0], [3, 4, 5], [2, 1, 3]])
    vals = sample_trilinear(g, base.index_to_world(idx))
    want = data[idx[:, 0], idx[:, 1], idx[:, 2]]
    assert np.allclose(vals[:, 0], want, rtol=1e-12, atol=0)


def test_trilinear_clamps_outside():
    g = _grid_from(lambda x, y, z: x, (4, 4, 4))
    far = sample_trilinear(g, (100.0, 1.0, 1.0))
    assert far[0] == pytest.approx(3.0, abs=1e-12)  # boundary value of f(x)=x at x=3
    low = sample_trilinear(g, (-50.0, 1.0, 1.0))
    assert low[0] == pytest.approx(0.0, abs=1e-12)


def test_multichannel_shapes():
    data = np.zeros((3, 3, 3))
    base = VoxelVolume(data, (1, 1, 1), (0, 0, 0), kind=FIELD)
    g = FeatureGrid(base, np.stack([data, data + 1, data + 2]))
    out = sample_trilinear(g, [(0.5, 0.5, 0.5), (1.0, 1.0, 1.0)])
    assert out.shape == (2, 3)
    assert np.allclose(out[0], (0, 1, 2))


# ---------------------------------------------------------------------------
# crop


def test_crop_shifts_origin():
    data = np.arange(27, dtype=float).reshape((3, 3, 3), order="F")
    v = VoxelVolume(data, (0.5, 0.5, 0.5), (1, 1, 1), kind=FIELD)
    c = crop(v, (1, 0, 2), (3, 2, 3))
    assert c.dims == (2, 2, 1)
    assert np.allclose(c.origin, (1.5, 1.0, 2.0))
    assert np.array_equal(c.data, data[1:3, 0:2, 2:3])
    with pytest.raises(VolumeError):
        crop(v, (0, 0, 0), (4, 2, 2))
