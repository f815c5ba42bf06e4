"""
Source-domain data synthesis, keypoint extraction and pre-alignment.

IMPORTANT FOR DEVELOPERS:
- Deformations preserve point order, so ground truth is a point-wise subtraction
- Every synthesized coordinate is snapped to a 2^-30 mm lattice; when the input
  cloud lies on the same lattice, ``moving + gt == fixed`` holds exactly in
  floating point (differences of lattice values are exactly representable)
- All randomness flows through an explicit numpy Generator owned by the caller
"""

import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .geometry import DisplacementField, PointCloud

logger = logging.getLogger(__name__)

LATTICE_STEP = 2.0**-30


class PreAlignWarning(UserWarning):
    """Emitted when pre-alignment falls back to translation on an axis."""


class DeformationKind(Enum):
    """Families of the hand-crafted deformation function."""

    RIGID = "rigid"
    TWO_SCALE_RANDOM_FIELD = "two_scale_random_field"


@dataclass(frozen=True)
class DeformationSpec:
    """Parameters of a synthetic deformation."""

    kind: DeformationKind = DeformationKind.RIGID
    # Rigid: angles uniform in [-max, max] per Euler axis, translation likewise
    max_rotation_deg: float = 15.0
    max_translation_mm: float = 20.0
    # Two-scale random field: control grids with trilinear evaluation
    coarse_spacing_mm: float = 60.0
    fine_spacing_mm: float = 20.0
    coarse_amplitude_mm: float = 15.0
    fine_amplitude_mm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.max_rotation_deg <= 180.0:
            raise ValueError("max_rotation_deg must lie in [0, 180]")
        if self.max_translation_mm < 0:
            raise ValueError("max_translation_mm must be non-negative")
        if self.coarse_spacing_mm <= 0 or self.fine_spacing_mm <= 0:
            raise ValueError("Control grid spacings must be positive")
        if self.coarse_amplitude_mm < 0 or self.fine_amplitude_mm < 0:
            raise ValueError("Random field amplitudes must be non-negative")


@dataclass(frozen=True)
class SourceTriplet:
    """
    Labeled training pair: ``gt`` maps ``moving`` onto ``fixed``.

    For synthesized teacher pairs the two clouds are disjoint subsets of a
    larger pool; ``moving_indices``/``fixed_indices`` record which.
    """

    moving: PointCloud
    fixed: PointCloud
    gt: DisplacementField
    moving_indices: Optional[np.ndarray] = None
    fixed_indices: Optional[np.ndarray] = None

    def __post_init__(self):
        if not len(self.moving) == len(self.fixed) == len(self.gt):
            raise ValueError(
                "SourceTriplet requires |moving| = |fixed| = |gt|, got "
                f"{len(self.moving)}, {len(self.fixed)}, {len(self.gt)}"
            )


@dataclass(frozen=True)
class LandmarkPairs:
    """Corresponding annotated landmarks on the moving and fixed side."""

    moving: PointCloud
    fixed: PointCloud

    def __post_init__(self):
        if len(self.moving) != len(self.fixed):
            raise ValueError("Landmark clouds must have equal length")

    def __len__(self) -> int:
        return len(self.moving)


@dataclass(frozen=True)
class RegistrationCase:
    """Fixed/moving pair with optional high-res pool, ground truth and landmarks."""

    fixed: PointCloud
    moving: PointCloud
    moving_highres: Optional[PointCloud] = None
    gt: Optional[DisplacementField] = None
    landmarks: Optional[LandmarkPairs] = None
    case_id: str = ""
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.gt is not None:
            self.gt.check_matches(self.moving)


def snap_to_lattice(points) -> np.ndarray:
    """Round coordinates to the nearest multiple of LATTICE_STEP (exact in float64)."""
    return np.round(np.asarray(points, dtype=np.float64) / LATTICE_STEP) * LATTICE_STEP


def rigid_transform(cloud: PointCloud, rotation_deg, translation_mm) -> PointCloud:
    """Rotate about the origin (extrinsic Euler xyz, degrees) then translate."""
    rot = Rotation.from_euler("xyz", np.asarray(rotation_deg, float), degrees=True)
    moved = cloud.points @ rot.as_matrix().T + np.asarray(translation_mm, float)
    return PointCloud(moved)


def _control_grid_displacement(
    points: np.ndarray, spacing: float, amplitude: float, rng: np.random.Generator
) -> np.ndarray:
    """Sample a random vector per control node and evaluate it trilinearly."""
    origin = points.min(axis=0) - spacing
    shape = np.ceil((points.max(axis=0) - origin) / spacing).astype(int) + 2
    nodes = rng.uniform(-1.0, 1.0, size=(*shape, 3)) * amplitude
    coords = ((points - origin) / spacing).T
    return np.stack(
        [map_coordinates(nodes[..., c], coords, order=1, mode="nearest") for c in range(3)],
        axis=1,
    )


def apply_deformation(
    cloud: PointCloud,
    spec: DeformationSpec,
    rng: Optional[np.random.Generator] = None,
) -> tuple[PointCloud, DisplacementField]:
    """
    Warp ``cloud`` with a random deformation drawn from ``spec``.

    Returns ``(warped, gt)`` with ``gt = cloud - warped`` so that
    ``warped + gt`` reproduces ``cloud``.

    The warped points are snapped to the LATTICE_STEP lattice. Each point moves
    by at most sqrt(3)/2 steps, so a rigid warp preserves pairwise distances
    to within sqrt(3) * LATTICE_STEP (about 1.6e-9 mm) absolute, not relative.
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)

    if spec.kind is DeformationKind.RIGID:
        angles = rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg, size=3)
        shift = rng.uniform(-spec.max_translation_mm, spec.max_translation_mm, size=3)
        moved = rigid_transform(cloud, angles, shift).points
    else:
        # Both grids are always drawn so the stream stays aligned across specs
        coarse = _control_grid_displacement(
            cloud.points, spec.coarse_spacing_mm, spec.coarse_amplitude_mm, rng
        )
        fine = _control_grid_displacement(
            cloud.points, spec.fine_spacing_mm, spec.fine_amplitude_mm, rng
        )
        moved = cloud.points + (coarse + fine)

    warped = snap_to_lattice(moved)
    return PointCloud(warped), DisplacementField(cloud.points - warped)


def make_source_triplet(
    target_cloud: PointCloud,
    spec: DeformationSpec,
    rng: Optional[np.random.Generator] = None,
) -> SourceTriplet:
    """Build ``(def(C), C, C - def(C))`` from an unlabeled target cloud."""
    warped, gt = apply_deformation(target_cloud, spec, rng)
    return SourceTriplet(moving=warped, fixed=target_cloud, gt=gt)


def keypoint_indices(
    cloud: PointCloud, density_radius: float, nms_radius: float, max_points: int
) -> np.ndarray:
    """Indices of density-ranked keypoints after greedy non-maximum suppression."""
    if density_radius <= 0:
        raise ValueError("density_radius must be positive")
    if nms_radius < 0:
        raise ValueError("nms_radius must be non-negative")
    if max_points < 1:
        raise ValueError("max_points must be at least 1")

    pts = cloud.points
    tree = cKDTree(pts)
    counts = np.asarray(tree.query_ball_point(pts, r=density_radius, return_length=True))
    # Descending count, ties to the lowest index
    order = np.lexsort((np.arange(len(pts)), -counts))

    suppressed = np.zeros(len(pts), dtype=bool)
    accepted = []
    for i in order:
        if suppressed[i]:
            continue
        accepted.append(i)
        if len(accepted) == max_points:
            break
        if nms_radius > 0:
            near = np.asarray(tree.query_ball_point(pts[i], r=nms_radius), dtype=np.int64)
            close = ((pts[near] - pts[i]) ** 2).sum(axis=1) < nms_radius**2
            suppressed[near[close]] = True
    return np.asarray(accepted, dtype=np.int64)


def extract_keypoints(
    cloud: PointCloud, density_radius: float, nms_radius: float, max_points: int
) -> PointCloud:
    """Distinctive keypoints by local density estimation plus NMS."""
    return cloud.subset(keypoint_indices(cloud, density_radius, nms_radius, max_points))


def pre_align(case: RegistrationCase) -> RegistrationCase:
    """
    Match per-axis mean and standard deviation of the moving side to the fixed cloud.

    The map is estimated on ``case.moving`` and applied to the moving cloud,
    the high-res pool and the moving landmarks. Axes with zero std on either
    side are only translated and reported through a PreAlignWarning.
    """
    if len(case.moving) < 2 or len(case.fixed) < 2:
        raise ValueError("pre_align requires at least 2 points per cloud")

    mu_m = case.moving.points.mean(axis=0)
    mu_f = case.fixed.points.mean(axis=0)
    sd_m = case.moving.points.std(axis=0)
    sd_f = case.fixed.points.std(axis=0)

    degenerate = (sd_m == 0) | (sd_f == 0)
    scale = np.where(degenerate, 1.0, sd_f / np.where(sd_m == 0, 1.0, sd_m))
    if np.any(degenerate):
        axes = ", ".join("xyz"[a] for a in np.flatnonzero(degenerate))
        warnings.warn(
            f"Zero coordinate spread on axis {axes} of case '{case.case_id}'; "
            "pre-alignment translates only along it",
            PreAlignWarning,
            stacklevel=2,
        )

    def _map(cloud: Optional[PointCloud]) -> Optional[PointCloud]:
        if cloud is None:
            return None
        return PointCloud((cloud.points - mu_m) * scale + mu_f)

    landmarks = None
    if case.landmarks is not None:
        landmarks = LandmarkPairs(moving=_map(case.landmarks.moving), fixed=case.landmarks.fixed)

    gt = case.gt
    if gt is not None:
        # Keep the label consistent: the fixed side is unchanged
        gt = DisplacementField(gt.vectors + case.moving.points - _map(case.moving).points)

    return RegistrationCase(
        fixed=case.fixed,
        moving=_map(case.moving),
        moving_highres=_map(case.moving_highres),
        gt=gt,
        landmarks=landmarks,
        case_id=case.case_id,
        metadata={**case.metadata, "pre_align_scale": scale.tolist()},
    )


# ---------------------------------------------------------------------------
# Toy branching-curve data for desk-scale experiments
# ---------------------------------------------------------------------------


def make_branching_tree(
    rng: np.random.Generator,
    n_points: int,
    depth: int = 5,
    trunk_length_mm: float = 70.0,
    radius_mm: float = 2.0,
) -> PointCloud:
    """
    Sample a vessel-tree-like cloud of branching curves centred on the origin.

    Each branch is a quadratic Bezier curve; it splits into two children whose
    directions are rotated by 25-50 degrees, with length and radius shrinking
    per generation.
    """
    segments = []  # (p0, p1, p2, radius)

    def grow(start, direction, length, radius, level):
        bend = rng.normal(scale=0.25 * length, size=3)
        end = start + direction * length
        control = 0.5 * (start + end) + bend
        segments.append((start, control, end, radius))
        if level == depth:
            return
        tangent = end - control
        tangent /= np.linalg.norm(tangent)
        for sign in (-1.0, 1.0):
            axis = np.cross(tangent, rng.normal(size=3))
            axis /= np.linalg.norm(axis)
            angle = sign * rng.uniform(25.0, 50.0)
            child = Rotation.from_rotvec(np.deg2rad(angle) * axis).apply(tangent)
            grow(end, child, length * rng.uniform(0.65, 0.85), radius * 0.75, level + 1)

    grow(np.array([0.0, 0.0, trunk_length_mm]), np.array([0.0, 0.0, -1.0]), trunk_length_mm, radius_mm, 1)

    lengths = np.array([np.linalg.norm(p2 - p0) for p0, _, p2, _ in segments])
    counts = rng.multinomial(n_points, lengths / lengths.sum())
    chunks = []
    for (p0, p1, p2, radius), count in zip(segments, counts):
        if count == 0:
            continue
        t = rng.uniform(0.0, 1.0, size=(count, 1))
        curve = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2
        chunks.append(curve + rng.normal(scale=radius / 2.0, size=(count, 3)))
    points = np.concatenate(chunks, axis=0)
    points -= points.mean(axis=0)
    return PointCloud(snap_to_lattice(points))


def make_toy_case(
    case_id: str,
    rng: np.random.Generator,
    target_spec: DeformationSpec,
    n_points: int = 2048,
    n_points_highres: int = 4096,
    n_landmarks: int = 30,
    initial_offset_mm: float = 10.0,
) -> RegistrationCase:
    """
    One synthetic target pair with landmarks.

    The fixed cloud and the high-res moving pool are independent samples of
    the same tree, so the pair has no one-to-one point correspondences.
    """
    dense = make_branching_tree(rng, 2 * n_points_highres)
    landmark_idx = keypoint_indices(dense, density_radius=6.0, nms_radius=12.0, max_points=n_landmarks)

    warped, _ = apply_deformation(dense, target_spec, rng)
    offset = rng.uniform(-initial_offset_mm, initial_offset_mm, size=3)
    moved = snap_to_lattice(warped.points + offset)

    perm = rng.permutation(len(dense))
    fixed_idx = perm[:n_points]
    pool_idx = perm[n_points : n_points + n_points_highres]
    moving_idx = pool_idx[:n_points]

    return RegistrationCase(
        fixed=dense.subset(fixed_idx),
        moving=PointCloud(moved[moving_idx]),
        moving_highres=PointCloud(moved[pool_idx]),
        gt=DisplacementField(dense.points[moving_idx] - moved[moving_idx]),
        landmarks=LandmarkPairs(
            moving=PointCloud(moved[landmark_idx]), fixed=dense.subset(landmark_idx)
        ),
        case_id=case_id,
    )


def make_toy_dataset(
    n_cases: int,
    rng: np.random.Generator,
    target_spec: DeformationSpec,
    **case_kwargs,
) -> list[RegistrationCase]:
    """Generate ``n_cases`` toy target pairs named case_000, case_001, ..."""
    cases = []
    for i in range(n_cases):
        cases.append(make_toy_case(f"case_{i:03d}", rng, target_spec, **case_kwargs))
        logger.debug("Generated toy case %d/%d", i + 1, n_cases)
    return cases
