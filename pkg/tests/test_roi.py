import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.ndimage import binary_fill_holes, generate_binary_structure

from pseudoct.errors import BoxOutOfRange, DimsMismatch, EmptyMask
from pseudoct.roi import (
    BoundingBox, apply_mask, crop, expand_and_clamp, exterior_zeros, fit_window, fov_mask,
    mask_bounding_box, preprocess_case,
)
from pseudoct.volgrid import Volume, voxel_to_world

SIX = generate_binary_structure(3, 1)


def vol(data, affine=None):
    return Volume(np.asarray(data, dtype=float), np.eye(4) if affine is None else affine)


def test_bounding_box_examples():
    m = np.zeros((32, 32, 32))
    m[5, 6, 7] = 1
    assert mask_bounding_box(vol(m)) == BoundingBox((5, 6, 7), (5, 6, 7))
    m[:] = 0
    m[10, 12, 14] = m[20, 22, 24] = 1
    assert mask_bounding_box(vol(m)) == BoundingBox((10, 12, 14), (20, 22, 24))
    assert mask_bounding_box(vol(np.ones((4, 4, 4)))) == BoundingBox((0, 0, 0), (3, 3, 3))
    with pytest.raises(EmptyMask):
        mask_bounding_box(vol(np.zeros((3, 3, 3))))


def test_expand_and_clamp_examples():
    box = BoundingBox((10, 10, 10), (20, 20, 20))
    assert expand_and_clamp(box, 5, (64, 64, 64)) == BoundingBox((5, 5, 5), (25, 25, 25))
    assert expand_and_clamp(box, dims=(64, 64, 64)) == BoundingBox((5, 5, 5), (25, 25, 25))
    edge = BoundingBox((0, 2, 3), (60, 61, 63))
    assert expand_and_clamp(edge, 5, (64, 64, 64)) == BoundingBox((0, 0, 0), (63, 63, 63))
    assert expand_and_clamp(box, 0, (64, 64, 64)) == box


@given(
    lo=st.tuples(*[st.integers(0, 20)] * 3),
    ext=st.tuples(*[st.integers(0, 10)] * 3),
    margin=st.integers(0, 12),
)
def test_expand_and_clamp_arithmetic(lo, ext, margin):
    dims = (30, 31, 32)
    hi = tuple(min(a + e, n - 1) for a, e, n in zip(lo, ext, dims))
    out = expand_and_clamp(BoundingBox(lo, hi), margin, dims)
    for a, b, c, d, n in zip(lo, hi, out.b_min, out.b_max, dims):
        assert c == max(0, a - margin)
        assert d == min(n - 1, b + margin)


def test_crop_affine_bookkeeping(rng):
    A = np.eye(4)
    A[:3, :3] = np.diag([0.7, 1.2, 2.0])
    A[:3, 3] = (3, -4, 5)
    v = vol(rng.normal(size=(10, 11, 12)), A)
    full = crop(v, BoundingBox((0, 0, 0), (9, 10, 11)))
    assert np.array_equal(full.data, v.data) and np.array_equal(full.affine, v.affine)
    box = BoundingBox((2, 3, 4), (7, 9, 10))
    c = crop(v, box)
    assert c.dims == (6, 7, 7)
    assert np.allclose(voxel_to_world(c, (0, 0, 0)), voxel_to_world(v, box.b_min), atol=1e-12)
    idx = rng.integers(0, 6, size=(50, 3))
    assert np.max(np.abs(voxel_to_world(c, idx) - voxel_to_world(v, idx + box.b_min))) < 1e-9
    assert np.array_equal(c.data, v.data[2:8, 3:10, 4:11])
    with pytest.raises(BoxOutOfRange):
        crop(v, BoundingBox((0, 0, 0), (10, 0, 0)))


def test_shared_box_gives_equal_dims(rng):
    vols = [vol(rng.normal(size=(9, 9, 9))) for _ in range(4)]
    box = BoundingBox((1, 2, 3), (5, 6, 8))
    assert len({crop(v, box).dims for v in vols}) == 1


def test_fov_mask_examples():
    assert np.all(fov_mask(vol(np.ones((5, 5, 5)))).data == 1)
    assert np.all(fov_mask(vol(np.zeros((5, 5, 5)))).data == 0)
    us = np.zeros((16, 16, 16))
    us[4:12, 4:12, 4:12] = 1.0
    us[7, 8, 6] = 0.0
    m = fov_mask(vol(us)).data
    assert m[7, 8, 6] == 1
    assert m.sum() == 8**3
    assert set(np.unique(m)) <= {0.0, 1.0}


def test_fov_threshold_is_strict():
    us = np.full((5, 5, 5), 1.0)
    us[0, 0, 0] = 0.0
    us[0, 0, 1] = -1.0
    m = fov_mask(vol(us)).data
    assert m[0, 0, 0] == 0 and m[0, 0, 1] == 0


def test_flood_fill_cavities_and_tunnels():
    # a hollow shell with a sealed cavity and a second shell with a tunnel to the border
    us = np.zeros((20, 20, 20))
    us[2:9, 2:9, 2:9] = 1
    us[4:7, 4:7, 4:7] = 0  # sealed cavity
    us[11:18, 11:18, 11:18] = 1
    us[13:16, 13:16, 13:16] = 0
    us[14, 14, 16:] = 0  # tunnel out to the border region
    m = fov_mask(vol(us)).data
    assert np.all(m[4:7, 4:7, 4:7] == 1)
    assert np.all(m[13:16, 13:16, 13:16] == 0)
    assert np.all(m[us == 1] == 1)
    assert m[0, 0, 0] == 0


def test_diagonal_contact_does_not_leak():
    # a cavity touching the exterior only through an edge stays filled under 6-connectivity
    us = np.ones((7, 7, 7))
    us[3, 3, 3] = 0
    us[2, 2, 3] = 0
    us[1, 1, 3] = 0
    us[0, 0, 3] = 0
    m = fov_mask(vol(us)).data
    assert m[3, 3, 3] == 1 and m[0, 0, 3] == 0


@given(arrays(np.bool_, (6, 7, 5)))
def test_flood_fill_matches_independent_fill(inside):
    ours = fov_mask(vol(inside.astype(float))).data.astype(bool)
    ref = binary_fill_holes(inside, structure=SIX)
    assert np.array_equal(ours, ref)


@given(arrays(np.bool_, (5, 5, 6)))
def test_exterior_zeros_are_never_filled(zero):
    ext = exterior_zeros(zero)
    assert not np.any(ext & ~zero)
    mask = fov_mask(vol((~zero).astype(float))).data
    assert np.all(mask[ext] == 0)
    assert np.all(mask[~ext] == 1)


@given(arrays(np.float64, (4, 5, 6), elements=st.floats(-5, 5)))
def test_fov_mask_idempotent_on_masked_volume(us):
    m = fov_mask(vol(us))
    again = fov_mask(apply_mask(vol(np.abs(us) + 1.0), m))
    assert np.array_equal(again.data, m.data)


def test_apply_mask_examples(rng):
    v = vol(rng.normal(size=(4, 4, 4)))
    assert np.array_equal(apply_mask(v, vol(np.ones((4, 4, 4)))).data, v.data)
    z = apply_mask(v, vol(np.zeros((4, 4, 4)))).data
    assert np.all(z == 0) and not np.any(np.signbit(z))
    with pytest.raises(DimsMismatch):
        apply_mask(v, vol(np.ones((4, 4, 5))))


@given(
    arrays(np.float64, (3, 4, 5), elements=st.floats(-10, 10)),
    arrays(np.bool_, (3, 4, 5)),
)
def test_apply_mask_idempotent(data, mask):
    m = vol(mask.astype(float))
    once = apply_mask(vol(data), m)
    assert np.array_equal(apply_mask(once, m).data, once.data)


def blob_fixture(rng, dims=(30, 32, 34), lo=(8, 9, 10), hi=(16, 18, 20)):
    mask = np.zeros(dims)
    mask[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1] = 1
    us = rng.uniform(0.1, 1.0, size=dims)
    us[:, :, :3] = 0  # outside the field of view
    ct = rng.normal(40, 10, size=dims)
    return vol(ct), vol(us), vol(mask)


def test_preprocess_dims_and_masking(rng):
    ct, us, mask = blob_fixture(rng)
    out = preprocess_case(ct, us, mask, margin=5)
    assert out["box"] == BoundingBox((3, 4, 5), (21, 23, 25))
    assert out["us"].dims == (9 + 10, 10 + 10, 11 + 10)
    assert out["ct"].data.min() == 0
    fov = out["fov"].data
    assert np.all(out["ct"].data[fov == 0] == 0)
    assert np.array_equal(out["ct"].data[fov == 1], out["ct_unmasked"].data[fov == 1])
    tight = preprocess_case(ct, us, mask, margin=0)
    assert tight["us"].dims == (9, 10, 11)
    clamped = preprocess_case(ct, us, mask, margin=12)
    assert clamped["box"] == BoundingBox((0, 0, 0), (28, 30, 32))
    for key in ("us", "us_mask", "fov", "ct", "ct_unmasked"):
        assert out[key].dims == out["us"].dims
        assert np.array_equal(out[key].affine, out["us"].affine)


def test_preprocess_fov_uses_leftmost_zero_slab(rng):
    ct, us, mask = blob_fixture(rng, lo=(8, 9, 4))
    out = preprocess_case(ct, us, mask, margin=5)
    # box starts at w=0, so the outside-FOV slab w<3 is in the crop and zeroed
    assert out["box"].b_min[2] == 0
    assert np.all(out["ct"].data[:, :, :3] == 0)
    assert np.all(out["ct"].data[:, :, 3:] >= 0)


def test_preprocess_guards(rng):
    ct, us, mask = blob_fixture(rng)
    with pytest.raises(DimsMismatch):
        preprocess_case(vol(np.zeros((3, 3, 3))), us, mask)
    with pytest.raises(EmptyMask):
        preprocess_case(ct, us, vol(np.zeros(us.dims)))


def test_fit_window():
    box = BoundingBox((10, 10, 10), (19, 19, 19))
    w = fit_window(box, (16, 8, 16), (40, 40, 24))
    assert w.dims == (16, 8, 16)
    assert w == BoundingBox((7, 11, 7), (22, 18, 22))
    edge = fit_window(BoundingBox((0, 0, 0), (3, 3, 3)), (8, 8, 8), (10, 10, 10))
    assert edge == BoundingBox((0, 0, 0), (7, 7, 7))
    with pytest.raises(BoxOutOfRange):
        fit_window(box, (64, 8, 8), (40, 40, 40))
