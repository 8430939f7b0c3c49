import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sliceprior import geometry as geom
from sliceprior import views as V
from sliceprior.geometry import RigidParams, ViewPlane
from sliceprior.model import LA, LV, RA, RV
from sliceprior.phantom import PhantomParams, generate_phantom
from sliceprior.volume import LabelVolume


@pytest.fixture(scope="module")
def vol():
    return generate_phantom(PhantomParams(), 1)


@pytest.fixture(scope="module")
def planes(vol):
    return V.canonical_views(V.compute_landmarks(vol))


def toy_volume():
    lab = np.zeros((8, 4, 4), dtype=np.uint8)
    lab[1, 1, 1] = LV
    lab[5, 1, 1] = LV
    lab[0, 0, 0] = LA
    lab[3, 3, 3] = RA
    lab[7, 3, 0] = RV
    return LabelVolume(lab, [10.0, 10.0, 10.0], [-5.0, -15.0, -15.0])


def test_landmarks_toy_case():
    lm = V.compute_landmarks(toy_volume())
    # single-voxel classes sit at their voxel centre; LV voxels at world x = 10 and 50
    np.testing.assert_array_equal(lm.coms[LA], [0.0, -10.0, -10.0])
    np.testing.assert_array_equal(lm.coms[RA], [30.0, 20.0, 20.0])
    np.testing.assert_array_equal(lm.apex, [50.0, 0.0, 0.0])


def test_landmarks_missing_class_named():
    v = toy_volume()
    v.labels[v.labels == RV] = 0
    with pytest.raises(V.MissingClassError, match="RV"):
        V.compute_landmarks(v)


def test_apex_tie_goes_to_lowest_linear_index():
    lab = np.zeros((3, 3, 3), dtype=np.uint8)
    lab[1, 1, 1] = LA
    lab[0, 1, 1] = LV
    lab[2, 1, 1] = LV
    lab[1, 0, 1] = LV
    lab[0, 0, 0], lab[2, 2, 2] = RA, RV
    lm = V.compute_landmarks(LabelVolume(lab, [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]))
    # (0,1,1), (2,1,1), (1,0,1) are all 1 mm from the LA voxel; x-fastest order puts (1,0,1) first
    np.testing.assert_array_equal(lm.apex, [1.5, 0.5, 1.5])


def test_apex_is_farthest_lv_voxel(vol):
    lm = V.compute_landmarks(vol)
    idx = np.argwhere(vol.labels == LV)
    pts = vol.origin + (idx + 0.5) * vol.spacing
    d = np.linalg.norm(pts - lm.coms[LA], axis=1)
    assert np.linalg.norm(lm.apex - lm.coms[LA]) >= d.max() - 1e-12
    assert vol.lookup(lm.apex[None])[0] == LV
    for c in (LA, LV, RA, RV):
        np.testing.assert_allclose(lm.coms[c], vol.class_centers(c).mean(axis=0), atol=1e-12)


def test_canonical_angles(planes):
    u4, u3, u2 = planes["A4C"].basis_u, planes["A3C"].basis_u, planes["A2C"].basis_u
    ev = planes["A2C"].basis_v
    # undo the shared in-plane rotation of A4C before comparing long-axis rotations
    n4 = planes["A4C"].normal
    base_u4 = geom.rotate_about(u4, n4, np.deg2rad(-V.IN_PLANE_DEG))
    assert abs(u2 @ base_u4) < 1e-9 and abs(u2 @ u4) < 1e-9
    assert abs(u3 @ base_u4 - np.cos(np.pi / 4)) < 1e-9
    assert abs(u3 @ u2 - np.cos(np.pi / 4)) < 1e-9
    assert abs(u2 @ ev) < 1e-9
    for p in planes.values():
        p.validate()
        np.testing.assert_array_equal(p.anchor, planes["A4C"].anchor)


def test_a5c_normal_tilt_is_five_degrees(planes):
    n4, n5 = planes["A4C"].normal, planes["A5C"].normal
    ang = np.degrees(np.arccos(np.clip(abs(n4 @ n5), -1, 1)))
    assert abs(ang - 5.0) < 1e-6


def test_in_plane_rotation_of_a4c(vol, planes):
    lm = V.compute_landmarks(vol)
    ev = (lm.coms[LV] - lm.apex) / np.linalg.norm(lm.coms[LV] - lm.apex)
    assert abs(np.degrees(np.arccos(planes["A4C"].basis_v @ ev)) - 10.0) < 1e-6
    # the in-plane rotation keeps the plane: its normal is still orthogonal to the long axis
    assert abs(planes["A4C"].normal @ ev) < 1e-9


def test_extent_and_pixel_grid(vol, planes):
    lm = V.compute_landmarks(vol)
    extent = 1.5 * np.linalg.norm(lm.apex - lm.coms[LA])
    p = planes["A4C"]
    step = extent / 256
    assert p.width == p.height == 256
    np.testing.assert_allclose(p.alphas[0] - step / 2, -extent / 2)
    np.testing.assert_allclose(p.alphas[-1] + step / 2, extent / 2)
    np.testing.assert_allclose(p.alphas, -p.alphas[::-1], atol=1e-12)
    np.testing.assert_allclose(p.betas[0] - step / 2, -0.1 * extent)
    np.testing.assert_allclose(p.betas[-1] + step / 2, 0.9 * extent)


def test_four_chamber_view_shows_chambers(vol, planes):
    mask = V.render_slice(vol, planes["A4C"])
    assert len(np.unique(mask.labels)) >= 5
    assert mask.labels.shape == (256, 256)
    # apex near the top: the LV's first row is in the upper fifth
    rows = np.flatnonzero((mask.labels == LV).any(axis=1))
    assert rows[0] < 256 // 5


def test_render_uniform_and_outside():
    v = LabelVolume(np.full((10, 10, 10), 3, dtype=np.uint8), [1.0] * 3, [0.0] * 3)
    inside = ViewPlane([5, 5, 5], [1, 0, 0], [0, 1, 0], np.linspace(-4, 4, 9), np.linspace(-4, 4, 9))
    assert np.all(V.render_slice(v, inside).labels == 3)
    far = ViewPlane([500, 5, 5], [1, 0, 0], [0, 1, 0], np.linspace(-4, 4, 9), np.linspace(-4, 4, 9))
    assert np.all(V.render_slice(v, far).labels == 0)


def test_render_grid_slice_matches_index_mapping():
    rng = np.random.default_rng(0)
    lab = rng.integers(0, 6, (12, 9, 7)).astype(np.uint8)
    v = LabelVolume(lab, [2.0, 2.0, 2.0], [-4.0, 0.0, 6.0])
    k = 3
    # plane through voxel centres of slice z = k, columns along x, rows along y
    z = 6.0 + (k + 0.5) * 2.0
    plane = ViewPlane([-4.0, 0.0, z], [1, 0, 0], [0, 1, 0], (np.arange(12) + 0.5) * 2.0, (np.arange(9) + 0.5) * 2.0)
    mask = V.render_slice(v, plane)
    np.testing.assert_array_equal(mask.labels, lab[:, :, k].T)


def test_render_is_pure(vol, planes):
    r = RigidParams([0.01, -0.02, 0.03], [1.0, 0.0, -1.0])
    a = V.render_slice(vol, planes["A2C"], r).labels
    b = V.render_slice(vol, planes["A2C"], r).labels
    assert a.tobytes() == b.tobytes()


def test_perturb_examples(vol):
    lm = V.compute_landmarks(vol)
    same = V.perturb_landmarks(lm, 0.0, np.random.default_rng(0))
    assert np.array_equal(same.apex, lm.apex) and all(np.array_equal(same.coms[c], lm.coms[c]) for c in lm.coms)
    a = V.perturb_landmarks(lm, 5.0, np.random.default_rng(3))
    b = V.perturb_landmarks(lm, 5.0, np.random.default_rng(3))
    assert np.array_equal(a.apex, b.apex) and not np.array_equal(a.apex, lm.apex)
    with pytest.raises(ValueError):
        V.perturb_landmarks(lm, -1.0, np.random.default_rng(0))


def test_perturbation_std():
    lm = V.Landmarks({c: np.zeros(3) for c in (LA, LV, RA, RV)}, np.zeros(3))
    rng = np.random.default_rng(11)
    draws = np.array([V.perturb_landmarks(lm, 5.0, rng).apex for _ in range(100_000)])
    assert np.all(np.abs(draws.std(axis=0) - 5.0) < 0.05)


def test_acquisition_protocol(vol, planes):
    b = V.acquire_views(vol, "c", sigma=5.0, seed=4)
    assert list(b.masks) == list(V.VIEW_NAMES)
    for name in V.VIEW_NAMES:
        stored, true = b.masks[name].plane, b.true_planes[name]
        if name == "A4C":
            # the anchored view keeps the pose it was acquired with
            assert np.array_equal(stored.basis_u, true.basis_u) and np.array_equal(stored.anchor, true.anchor)
        else:
            assert np.array_equal(stored.basis_u, planes[name].basis_u)
            assert np.array_equal(stored.anchor, planes[name].anchor)
            assert not np.array_equal(true.anchor, planes[name].anchor)
        # pixels were rendered from the true pose
        np.testing.assert_array_equal(b.masks[name].labels, V.render_slice(vol, true).labels)
    # independent noise per view
    assert not np.array_equal(b.true_planes["A2C"].anchor, b.true_planes["A3C"].anchor)


def test_zero_sigma_stores_true_poses(vol, planes):
    b = V.acquire_views(vol, "c", sigma=0.0, seed=4)
    for name in V.VIEW_NAMES:
        assert np.array_equal(b.masks[name].plane.basis_v, b.true_planes[name].basis_v)
        assert np.array_equal(b.masks[name].plane.anchor, planes[name].anchor)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_views_are_valid_for_any_seed(seed):
    v = generate_phantom(PhantomParams(grid=48, spacing=4.0), seed)
    for p in V.canonical_views(V.compute_landmarks(v), size=32).values():
        p.validate()
