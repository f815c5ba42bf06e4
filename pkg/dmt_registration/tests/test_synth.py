"""Tests for source synthesis, keypoints, pre-alignment and toy data."""

import warnings

import numpy as np
import pytest
from scipy.spatial.distance import pdist

from dmt_registration.services.geometry import DisplacementField, PointCloud
from dmt_registration.services.synth import (
    LATTICE_STEP,
    DeformationKind,
    DeformationSpec,
    LandmarkPairs,
    PreAlignWarning,
    RegistrationCase,
    SourceTriplet,
    apply_deformation,
    extract_keypoints,
    keypoint_indices,
    make_source_triplet,
    make_toy_case,
    make_toy_dataset,
    pre_align,
    rigid_transform,
    snap_to_lattice,
)


@pytest.fixture
def lattice_cloud(rng):
    return PointCloud(snap_to_lattice(rng.normal(scale=30.0, size=(200, 3))))


class TestApplyDeformation:
    """Test synthetic deformations and their ground truth."""

    @pytest.mark.parametrize("kind", list(DeformationKind))
    def test_ground_truth_is_exact(self, lattice_cloud, kind):
        """Test that warped + gt reproduces the input cloud bit for bit."""
        spec = DeformationSpec(kind=kind)
        warped, gt = apply_deformation(lattice_cloud, spec, np.random.default_rng(5))
        assert len(warped) == len(lattice_cloud)
        assert np.array_equal(warped.points + gt.vectors, lattice_cloud.points)

    def test_zero_ranges_are_identity(self, lattice_cloud):
        """Test that a rigid spec with zero ranges leaves the cloud unchanged."""
        spec = DeformationSpec(max_rotation_deg=0.0, max_translation_mm=0.0)
        warped, gt = apply_deformation(lattice_cloud, spec, np.random.default_rng(0))
        assert np.array_equal(warped.points, lattice_cloud.points)
        assert not np.any(gt.vectors)

    def test_zero_amplitudes_are_identity(self, lattice_cloud):
        """Test that a random field with zero amplitudes leaves the cloud unchanged."""
        spec = DeformationSpec(
            kind=DeformationKind.TWO_SCALE_RANDOM_FIELD,
            coarse_amplitude_mm=0.0,
            fine_amplitude_mm=0.0,
        )
        warped, _ = apply_deformation(lattice_cloud, spec, np.random.default_rng(0))
        assert np.array_equal(warped.points, lattice_cloud.points)

    def test_rigid_is_isometry(self, lattice_cloud):
        """Test that rigid deformations preserve pairwise distances."""
        warped, _ = apply_deformation(lattice_cloud, DeformationSpec(), np.random.default_rng(9))
        np.testing.assert_allclose(pdist(warped.points), pdist(lattice_cloud.points), rtol=1e-9, atol=1e-8)

    def test_rigid_lattice_bound_on_close_pairs(self, rng):
        """Test the absolute distance bound for points less than a millimetre apart."""
        base = rng.normal(scale=30.0, size=(50, 3))
        cloud = PointCloud(snap_to_lattice(np.concatenate([base, base + rng.uniform(-0.3, 0.3, size=(50, 3))])))
        for seed in range(10):
            warped, _ = apply_deformation(cloud, DeformationSpec(), np.random.default_rng(seed))
            drift = np.abs(pdist(warped.points) - pdist(cloud.points))
            assert drift.max() <= np.sqrt(3.0) * LATTICE_STEP + 1e-12

    def test_rotation_about_z(self):
        """Test a closed-form 30 degree rotation about the z axis."""
        out = rigid_transform(PointCloud([[1.0, 0.0, 0.0]]), [0.0, 0.0, 30.0], [0.0, 0.0, 0.0])
        np.testing.assert_allclose(
            out.points, [[np.cos(np.pi / 6), np.sin(np.pi / 6), 0.0]], atol=1e-12
        )

    def test_spec_seed_used_without_generator(self, lattice_cloud):
        """Test that the deformation seed makes repeated calls identical."""
        spec = DeformationSpec(kind=DeformationKind.TWO_SCALE_RANDOM_FIELD, seed=11)
        a, _ = apply_deformation(lattice_cloud, spec)
        b, _ = apply_deformation(lattice_cloud, spec)
        assert np.array_equal(a.points, b.points)

    def test_invalid_spec(self):
        """Test that out-of-range spec values are rejected."""
        with pytest.raises(ValueError, match="max_rotation_deg"):
            DeformationSpec(max_rotation_deg=200.0)
        with pytest.raises(ValueError, match="spacings"):
            DeformationSpec(fine_spacing_mm=0.0)


class TestSourceTriplet:
    """Test source triplet construction."""

    def test_fixed_is_input_verbatim(self, lattice_cloud):
        """Test that the fixed side is the target cloud itself."""
        triplet = make_source_triplet(lattice_cloud, DeformationSpec(), np.random.default_rng(1))
        assert triplet.fixed is lattice_cloud
        assert np.abs(triplet.moving.points + triplet.gt.vectors - triplet.fixed.points).max() == 0.0

    def test_reproducible_with_seed(self, lattice_cloud):
        """Test that the same seed gives a byte-identical triplet."""
        spec = DeformationSpec(kind=DeformationKind.TWO_SCALE_RANDOM_FIELD)
        a = make_source_triplet(lattice_cloud, spec, np.random.default_rng(42))
        b = make_source_triplet(lattice_cloud, spec, np.random.default_rng(42))
        assert a.moving.points.tobytes() == b.moving.points.tobytes()
        assert a.gt.vectors.tobytes() == b.gt.vectors.tobytes()

    def test_length_mismatch(self):
        """Test that clouds and labels must have equal length."""
        with pytest.raises(ValueError, match="SourceTriplet requires"):
            SourceTriplet(
                moving=PointCloud(np.zeros((2, 3))),
                fixed=PointCloud(np.zeros((3, 3))),
                gt=DisplacementField.zeros(2),
            )


class TestKeypoints:
    """Test density-ranked keypoints with non-maximum suppression."""

    def test_large_nms_radius_keeps_densest(self):
        """Test that a radius larger than the cloud keeps exactly the densest point."""
        pts = np.array([[0.0, 0.0, 0.0], [0.9, 0.0, 0.0], [1.5, 0.0, 0.0], [5.0, 0.0, 0.0]])
        idx = keypoint_indices(PointCloud(pts), density_radius=1.0, nms_radius=100.0, max_points=10)
        assert idx.tolist() == [1]

    def test_zero_nms_radius_keeps_all(self, rng):
        """Test that nothing is suppressed with nms_radius = 0."""
        cloud = PointCloud(rng.normal(size=(30, 3)))
        assert len(extract_keypoints(cloud, 1.0, 0.0, max_points=50)) == 30
        assert len(extract_keypoints(cloud, 1.0, 0.0, max_points=7)) == 7

    def test_one_point_per_cluster(self, rng):
        """Test two well-separated clusters give one keypoint each."""
        a = rng.normal(scale=0.1, size=(10, 3))
        b = rng.normal(scale=0.1, size=(10, 3)) + [50.0, 0.0, 0.0]
        idx = keypoint_indices(PointCloud(np.concatenate([a, b])), 1.0, 10.0, max_points=2)
        assert sorted(i // 10 for i in idx) == [0, 1]

    def test_accepted_points_respect_radius(self, rng):
        """Test that accepted keypoints are at least nms_radius apart."""
        cloud = PointCloud(rng.uniform(0.0, 20.0, size=(300, 3)))
        kp = extract_keypoints(cloud, 3.0, 4.0, max_points=100)
        assert pdist(kp.points).min() >= 4.0

    def test_deterministic(self, rng):
        """Test that repeated extraction gives identical indices."""
        cloud = PointCloud(rng.integers(0, 5, size=(100, 3)).astype(float))
        a = keypoint_indices(cloud, 1.5, 2.0, max_points=20)
        b = keypoint_indices(cloud, 1.5, 2.0, max_points=20)
        assert a.tolist() == b.tolist()

    def test_invalid_arguments(self):
        """Test argument validation."""
        cloud = PointCloud(np.zeros((2, 3)))
        with pytest.raises(ValueError, match="density_radius"):
            keypoint_indices(cloud, 0.0, 1.0, 1)
        with pytest.raises(ValueError, match="max_points"):
            keypoint_indices(cloud, 1.0, 1.0, 0)


class TestPreAlign:
    """Test mean/std pre-alignment."""

    def test_matches_fixed_statistics(self, rng):
        """Test that aligned moving mean and std equal the fixed ones per axis."""
        fixed = PointCloud(rng.normal(scale=[10.0, 20.0, 5.0], size=(100, 3)))
        moving = PointCloud(rng.normal(loc=3.0, scale=[2.0, 7.0, 1.0], size=(80, 3)))
        aligned = pre_align(RegistrationCase(fixed=fixed, moving=moving))
        np.testing.assert_allclose(aligned.moving.points.mean(axis=0), fixed.points.mean(axis=0), atol=1e-9)
        np.testing.assert_allclose(aligned.moving.points.std(axis=0), fixed.points.std(axis=0), rtol=1e-9)

    def test_identical_clouds_unchanged(self, rng):
        """Test that moving = fixed is an identity map."""
        cloud = PointCloud(rng.normal(size=(20, 3)))
        aligned = pre_align(RegistrationCase(fixed=cloud, moving=cloud))
        np.testing.assert_allclose(aligned.moving.points, cloud.points, atol=1e-12)

    def test_translation_only(self, rng):
        """Test that a shifted copy is shifted back."""
        fixed = PointCloud(rng.normal(size=(20, 3)))
        moving = PointCloud(fixed.points + [10.0, 0.0, 0.0])
        aligned = pre_align(RegistrationCase(fixed=fixed, moving=moving))
        np.testing.assert_allclose(aligned.moving.points, fixed.points, atol=1e-9)

    def test_scaled_copy(self, rng):
        """Test that moving = 2 * fixed gets scale 0.5 per axis."""
        fixed = PointCloud(rng.normal(size=(20, 3)))
        aligned = pre_align(RegistrationCase(fixed=fixed, moving=PointCloud(2.0 * fixed.points)))
        np.testing.assert_allclose(aligned.metadata["pre_align_scale"], [0.5, 0.5, 0.5])
        np.testing.assert_allclose(aligned.moving.points, fixed.points, atol=1e-9)

    def test_idempotent(self, toy_case):
        """Test that aligning twice equals aligning once."""
        once = pre_align(toy_case)
        twice = pre_align(once)
        np.testing.assert_allclose(twice.moving.points, once.moving.points, atol=1e-9)

    def test_maps_pool_landmarks_and_label(self, toy_case):
        """Test that the pool, moving landmarks and gt follow the moving cloud."""
        aligned = pre_align(toy_case)
        n = len(toy_case.moving)
        np.testing.assert_array_equal(aligned.moving_highres.points[:n], aligned.moving.points)
        np.testing.assert_allclose(
            aligned.moving.points + aligned.gt.vectors,
            toy_case.moving.points + toy_case.gt.vectors,
            atol=1e-9,
        )
        assert aligned.landmarks.fixed is toy_case.landmarks.fixed
        assert len(aligned.landmarks.moving) == len(toy_case.landmarks.moving)

    def test_flat_axis_warns_and_translates(self, rng):
        """Test that a zero-std axis falls back to translation with a warning."""
        fixed_pts = rng.normal(size=(20, 3))
        fixed_pts[:, 2] = 4.0
        moving_pts = rng.normal(size=(20, 3))
        moving_pts[:, 2] = 1.0
        case = RegistrationCase(fixed=PointCloud(fixed_pts), moving=PointCloud(moving_pts), case_id="flat")
        with pytest.warns(PreAlignWarning, match="axis z"):
            aligned = pre_align(case)
        assert aligned.metadata["pre_align_scale"][2] == 1.0
        np.testing.assert_allclose(aligned.moving.points[:, 2], 4.0)

    def test_no_warning_for_regular_clouds(self, rng):
        """Test that non-degenerate clouds align silently."""
        case = RegistrationCase(
            fixed=PointCloud(rng.normal(size=(10, 3))), moving=PointCloud(rng.normal(size=(10, 3)))
        )
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            pre_align(case)

    def test_too_few_points(self):
        """Test that single-point clouds are rejected."""
        case = RegistrationCase(fixed=PointCloud(np.zeros((1, 3))), moving=PointCloud(np.zeros((1, 3))))
        with pytest.raises(ValueError, match="at least 2"):
            pre_align(case)


class TestToyData:
    """Test the toy branching-tree dataset."""

    def test_case_sizes(self, toy_case):
        """Test cloud sizes and that moving is a prefix of the pool."""
        assert len(toy_case.fixed) == 64
        assert len(toy_case.moving) == 64
        assert len(toy_case.moving_highres) == 128
        assert len(toy_case.gt) == 64
        assert 1 <= len(toy_case.landmarks) <= 6
        np.testing.assert_array_equal(toy_case.moving_highres.points[:64], toy_case.moving.points)

    def test_label_points_are_not_the_fixed_cloud(self, toy_case):
        """Test that the fixed cloud is an independent sample, not the warped moving cloud."""
        assert toy_case.case_id == "case_t"
        assert not np.array_equal(toy_case.moving.points + toy_case.gt.vectors, toy_case.fixed.points)

    def test_deterministic(self, target_spec):
        """Test that equal seeds give identical cases."""
        a = make_toy_case("a", np.random.default_rng(3), target_spec, n_points=32, n_points_highres=64)
        b = make_toy_case("a", np.random.default_rng(3), target_spec, n_points=32, n_points_highres=64)
        assert a.fixed.points.tobytes() == b.fixed.points.tobytes()
        assert a.moving_highres.points.tobytes() == b.moving_highres.points.tobytes()
        assert a.landmarks.moving.points.tobytes() == b.landmarks.moving.points.tobytes()

    def test_dataset_ids(self, target_spec):
        """Test case naming in a generated dataset."""
        cases = make_toy_dataset(
            3, np.random.default_rng(0), target_spec, n_points=16, n_points_highres=32, n_landmarks=3
        )
        assert [c.case_id for c in cases] == ["case_000", "case_001", "case_002"]

    def test_landmark_pairs_length(self):
        """Test that landmark clouds must have equal length."""
        with pytest.raises(ValueError, match="equal length"):
            LandmarkPairs(moving=PointCloud(np.zeros((2, 3))), fixed=PointCloud(np.zeros((3, 3))))
