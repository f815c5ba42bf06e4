"""
Registration quality metrics: landmark TRE and SDlogJ smoothness.

IMPORTANT FOR DEVELOPERS:
- TRE interpolates the predicted displacements to the moving landmarks with an
  isotropic Gaussian kernel (sigma = 5 mm by default)
- SDlogJ rasterizes the field onto a padded bounding-box grid; voxels with a
  non-positive Jacobian determinant are clamped to 1e-6 and counted as folds
- Dataset percentiles pool the landmark errors of all cases (linear
  interpolation between order statistics)
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .geometry import DisplacementField, RasterGrid, gaussian_interpolate, rasterize_displacement
from .synth import RegistrationCase

logger = logging.getLogger(__name__)

JACOBIAN_CLAMP = 1e-6


class EvaluationWeights(Enum):
    """Which parameter vector is used for predictions at evaluation time."""

    STUDENT = "student"
    TEACHER = "teacher"


@dataclass(frozen=True)
class EvaluationConfig:
    """Metric settings and evaluation parallelism."""

    tre_sigma_mm: float = 5.0
    grid_spacing_mm: float = 4.0
    raster_sigma_mm: float = 5.0
    workers: int = 1
    weights: EvaluationWeights = EvaluationWeights.STUDENT

    def __post_init__(self):
        if self.tre_sigma_mm <= 0 or self.raster_sigma_mm <= 0:
            raise ValueError("Kernel widths must be positive")
        if self.grid_spacing_mm <= 0:
            raise ValueError("grid_spacing_mm must be positive")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


@dataclass(frozen=True)
class TreResult:
    errors: np.ndarray
    mean: float


@dataclass(frozen=True)
class SdlogjResult:
    sdlogj: float
    folding_count: int
    n_voxels: int

    @property
    def folding_fraction(self) -> float:
        return self.folding_count / self.n_voxels if self.n_voxels else 0.0


@dataclass
class CaseReport:
    """Metrics of one registered case."""

    case_id: str
    tre_mean_mm: float
    tre_p25_mm: float
    tre_p75_mm: float
    sdlogj: float
    folding_fraction: float
    initial_tre_mm: float
    landmark_errors_mm: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalReport:
    """Dataset-level aggregates plus the per-case reports they were pooled from."""

    tre_mean_mm: float
    tre_p25_mm: float
    tre_p75_mm: float
    sdlogj: float
    folding_fraction: float
    per_case: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "tre_mean_mm": self.tre_mean_mm,
            "tre_p25_mm": self.tre_p25_mm,
            "tre_p75_mm": self.tre_p75_mm,
            "sdlogj": self.sdlogj,
            "folding_fraction": self.folding_fraction,
            "per_case": [c.to_dict() for c in self.per_case],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(
            tre_mean_mm=data["tre_mean_mm"],
            tre_p25_mm=data["tre_p25_mm"],
            tre_p75_mm=data["tre_p75_mm"],
            sdlogj=data["sdlogj"],
            folding_fraction=data["folding_fraction"],
            per_case=[CaseReport(**c) for c in data["per_case"]],
        )


def landmark_displacements(
    case: RegistrationCase, phi: DisplacementField, sigma: float = 5.0
) -> DisplacementField:
    """Predicted displacement interpolated to every moving landmark."""
    if case.landmarks is None:
        raise ValueError(f"Case '{case.case_id}' has no landmarks")
    phi.check_matches(case.moving)
    return gaussian_interpolate(case.moving, phi, case.landmarks.moving, sigma)


def tre(case: RegistrationCase, phi: DisplacementField, sigma: float = 5.0) -> TreResult:
    """Target registration error per landmark (mm) and its mean."""
    flow = landmark_displacements(case, phi, sigma)
    residual = case.landmarks.moving.points + flow.vectors - case.landmarks.fixed.points
    errors = np.sqrt((residual**2).sum(axis=1))
    return TreResult(errors=errors, mean=float(errors.mean()))


def jacobian_determinant(values: np.ndarray, spacing: float) -> np.ndarray:
    """
    det(I + grad u) on interior voxels of a displacement grid (nx, ny, nz, 3).

    Derivatives are central differences; the result has shape (nx-2, ny-2, nz-2).
    """
    if values.ndim != 4 or values.shape[3] != 3:
        raise ValueError(f"Expected a (nx, ny, nz, 3) grid, got shape {values.shape}")
    if min(values.shape[:3]) < 3:
        raise ValueError(f"Grid {values.shape[:3]} is smaller than 3 voxels along an axis")

    jac = np.empty((*(n - 2 for n in values.shape[:3]), 3, 3))
    for axis in range(3):
        ahead = [slice(1, -1)] * 3
        behind = [slice(1, -1)] * 3
        ahead[axis] = slice(2, None)
        behind[axis] = slice(None, -2)
        # Column `axis` holds d(u)/d(x_axis)
        jac[..., :, axis] = (values[tuple(ahead)] - values[tuple(behind)]) / (2.0 * spacing)
    jac += np.eye(3)
    return np.linalg.det(jac)


def sdlogj_from_grid(grid: RasterGrid) -> SdlogjResult:
    """Standard deviation of log det J over the interior voxels of ``grid``."""
    det = jacobian_determinant(grid.values, grid.spacing)
    folds = det <= 0
    log_det = np.log(np.where(folds, JACOBIAN_CLAMP, det))
    return SdlogjResult(
        sdlogj=float(log_det.std()), folding_count=int(folds.sum()), n_voxels=int(det.size)
    )


def sdlogj(
    case: RegistrationCase,
    phi: DisplacementField,
    spacing: float = 4.0,
    sigma: float = 5.0,
) -> SdlogjResult:
    """Rasterize ``phi`` around the moving cloud and measure its smoothness."""
    grid = rasterize_displacement(case.moving, phi, spacing=spacing, sigma=sigma)
    return sdlogj_from_grid(grid)


def _percentiles(errors: np.ndarray) -> tuple[float, float]:
    p25, p75 = np.percentile(errors, [25.0, 75.0])
    return float(p25), float(p75)


def evaluate_case(
    case: RegistrationCase,
    phi: DisplacementField,
    cfg: Optional[EvaluationConfig] = None,
) -> CaseReport:
    """All metrics of one case, including the TRE of the identity registration."""
    cfg = cfg or EvaluationConfig()
    result = tre(case, phi, cfg.tre_sigma_mm)
    initial = tre(case, DisplacementField.zeros(len(case.moving)), cfg.tre_sigma_mm)
    smooth = sdlogj(case, phi, cfg.grid_spacing_mm, cfg.raster_sigma_mm)
    p25, p75 = _percentiles(result.errors)
    logger.debug(
        "Case %s: TRE %.3f mm (initial %.3f), SDlogJ %.4f",
        case.case_id,
        result.mean,
        initial.mean,
        smooth.sdlogj,
    )
    return CaseReport(
        case_id=case.case_id,
        tre_mean_mm=result.mean,
        tre_p25_mm=p25,
        tre_p75_mm=p75,
        sdlogj=smooth.sdlogj,
        folding_fraction=smooth.folding_fraction,
        initial_tre_mm=initial.mean,
        landmark_errors_mm=result.errors.tolist(),
    )


def summarize(reports: list) -> EvalReport:
    """Pool landmark errors over cases; average SDlogJ and folding fraction."""
    if not reports:
        raise ValueError("Cannot summarize an empty list of case reports")
    errors = np.concatenate([np.asarray(r.landmark_errors_mm, dtype=float) for r in reports])
    if errors.size == 0:
        raise ValueError("Case reports contain no landmark errors")
    p25, p75 = _percentiles(errors)
    return EvalReport(
        tre_mean_mm=float(errors.mean()),
        tre_p25_mm=p25,
        tre_p75_mm=p75,
        sdlogj=float(np.mean([r.sdlogj for r in reports])),
        folding_fraction=float(np.mean([r.folding_fraction for r in reports])),
        per_case=list(reports),
    )


def evaluate_predictions(
    cases: list,
    predictions: dict,
    cfg: Optional[EvaluationConfig] = None,
) -> EvalReport:
    """Evaluate every case (in parallel, bounded by ``cfg.workers``) and summarize."""
    cfg = cfg or EvaluationConfig()
    missing = [c.case_id for c in cases if c.case_id not in predictions]
    if missing:
        raise ValueError(f"No prediction for case(s): {', '.join(missing)}")
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        reports = list(
            pool.map(lambda c: evaluate_case(c, predictions[c.case_id], cfg), cases)
        )
    report = summarize(reports)
    logger.info(
        "Evaluated %d cases: TRE %.3f mm [%.3f, %.3f], SDlogJ %.4f",
        len(reports),
        report.tre_mean_mm,
        report.tre_p25_mm,
        report.tre_p75_mm,
        report.sdlogj,
    )
    return report
