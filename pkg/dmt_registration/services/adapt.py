"""
Denoised Mean Teacher training: source pretraining, EMA teacher, Chamfer-filtered
consistency and teacher-synthesized pairs.

IMPORTANT FOR DEVELOPERS:
- Every loss term is a per-point MEAN and is averaged over batch items, so the
  loss weights do not depend on the cloud size
- The teacher never receives gradients; it changes only through ema_update
- A step whose loss or gradient is non-finite is rejected as a whole and the
  TrainState is returned untouched by the caller
- All randomness of an epoch comes from default_rng([seed, phase, epoch]), which
  makes (config, seed) reproduce a run bit for bit
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Union

import numpy as np
import torch

from .geometry import (
    DisplacementField,
    PointCloud,
    build_index,
    chamfer_distance,
    gaussian_interpolate,
)
from .model import (
    AdamState,
    ModelConfig,
    ModelParameters,
    ScaleOutput,
    Tape,
    adam_step,
    backward,
    cloud_neighbors,
    forward,
    init_parameters,
    predict,
)
from .synth import (
    DeformationSpec,
    RegistrationCase,
    SourceTriplet,
    make_source_triplet,
    pre_align,
)

logger = logging.getLogger(__name__)

PHASE_PRETRAIN = 0
PHASE_ADAPT = 1

Prediction = Union[DisplacementField, torch.Tensor, Tape]


class NonFiniteLossError(FloatingPointError):
    """A training step produced a NaN or infinite loss and was rejected."""


class Method(Enum):
    """Training recipes compared in the experiments."""

    SOURCE_ONLY = "source_only"
    MEAN_TEACHER = "mean_teacher"
    DENOISED_NO_SYN = "denoised_no_syn"
    DENOISED_NO_CON = "denoised_no_con"
    DENOISED = "denoised"
    CHAMFER_LOSS = "chamfer_loss"


@dataclass(frozen=True)
class AdaptationConfig:
    """Loss weights, schedule and sampling sizes of the training loop."""

    lambda_sup: float = 10.0
    lambda_con: float = 10.0
    lambda_syn: float = 10.0
    lambda_chamfer: float = 0.0
    alpha: float = 0.996
    lr: float = 1e-3
    pretrain_epochs: int = 160
    adapt_epochs: int = 140
    batch_source: int = 4
    batch_target: int = 4
    n_points: int = 8192
    n_points_highres: int = 16384
    interp_sigma_mm: float = 5.0
    scale_weights: tuple = (1.0, 1.0)
    filter_pseudo_labels: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_sup", "lambda_con", "lambda_syn", "lambda_chamfer"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.pretrain_epochs < 0 or self.adapt_epochs < 0:
            raise ValueError("Epoch counts must be non-negative")
        if self.batch_source < 1 or self.batch_target < 1:
            raise ValueError("Batch sizes must be at least 1")
        if self.n_points < 1:
            raise ValueError("n_points must be at least 1")
        if self.n_points_highres < 2 * self.n_points:
            raise ValueError("n_points_highres must be at least 2 * n_points")
        if self.interp_sigma_mm <= 0:
            raise ValueError("interp_sigma_mm must be positive")
        if not self.scale_weights or any(w < 0 for w in self.scale_weights):
            raise ValueError("scale_weights must be a non-empty list of non-negative weights")
        object.__setattr__(self, "scale_weights", tuple(float(w) for w in self.scale_weights))

    def for_method(self, method: Method) -> "AdaptationConfig":
        """Switch loss terms on or off to realize one of the training recipes."""
        if method is Method.SOURCE_ONLY:
            return replace(self, lambda_con=0.0, lambda_syn=0.0, lambda_chamfer=0.0, adapt_epochs=0)
        if method is Method.MEAN_TEACHER:
            return replace(self, lambda_syn=0.0, lambda_chamfer=0.0, filter_pseudo_labels=False)
        if method is Method.DENOISED_NO_SYN:
            return replace(self, lambda_syn=0.0, lambda_chamfer=0.0, filter_pseudo_labels=True)
        if method is Method.DENOISED_NO_CON:
            return replace(self, lambda_con=0.0, lambda_chamfer=0.0)
        if method is Method.CHAMFER_LOSS:
            return replace(
                self,
                lambda_con=0.0,
                lambda_syn=0.0,
                lambda_chamfer=self.lambda_chamfer or 1.0,
            )
        return replace(self, lambda_chamfer=0.0, filter_pseudo_labels=True)


@dataclass(frozen=True)
class LossRecord:
    """Loss terms of one optimizer step (unweighted batch means)."""

    step: int
    epoch: int
    l_sup: float
    l_con: float
    l_syn: float
    l_chamfer: float
    total: float
    n_accepted: int
    n_target: int

    @property
    def indicator_rate(self) -> float:
        return self.n_accepted / self.n_target if self.n_target else 0.0


@dataclass(frozen=True)
class EpochSummary:
    """Per-epoch means of the step records."""

    phase: str
    epoch: int
    steps: int
    aborted: int
    l_sup: float
    l_con: float
    l_syn: float
    l_chamfer: float
    total: float
    acceptance_rate: float


@dataclass(frozen=True)
class TrainState:
    """Student and teacher parameters plus optimizer state."""

    model_config: ModelConfig
    student: ModelParameters
    teacher: ModelParameters
    optimizer: AdamState
    step: int = 0
    epoch: int = 0

    def __post_init__(self):
        if len(self.student) != len(self.teacher):
            raise ValueError("Student and teacher parameter vectors differ in length")

    @classmethod
    def initial(cls, model_config: ModelConfig) -> "TrainState":
        """Fresh student with an identical teacher copy."""
        student = init_parameters(model_config)
        return cls(
            model_config=model_config,
            student=student,
            teacher=student.copy(),
            optimizer=AdamState.zeros(len(student)),
        )


@dataclass
class AdaptationData:
    """Training inputs: pre-aligned target cases and clouds for the source generator."""

    target_cases: list
    source_clouds: list
    source_spec: DeformationSpec


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def _levels(phi: Prediction) -> list:
    if isinstance(phi, Tape):
        return phi.levels
    if isinstance(phi, DisplacementField):
        phi = torch.tensor(phi.vectors, dtype=torch.float64)
    return [ScaleOutput(indices=None, prediction=phi)]


def _final(phi: Prediction) -> torch.Tensor:
    return _levels(phi)[-1].prediction


def _as_field(phi: Prediction) -> DisplacementField:
    if isinstance(phi, DisplacementField):
        return phi
    return DisplacementField(_final(phi).detach().cpu().numpy().astype(np.float64))


def _mean_squared_norm(diff: torch.Tensor) -> torch.Tensor:
    return (diff * diff).sum(dim=-1).mean()


def supervised_loss(
    phi_hat: Prediction,
    gt: DisplacementField,
    scale_weights: Optional[Sequence[float]] = None,
) -> torch.Tensor:
    """
    Weighted sum over scales of the mean squared per-point vector error.

    ``phi_hat`` is either a single prediction (field or tensor) or a Tape, in
    which case every recorded scale contributes; coarse scales are compared
    with ``gt`` at their subsample indices. The last weight belongs to the
    full-resolution scale.
    """
    levels = _levels(phi_hat)
    weights = tuple(scale_weights) if scale_weights is not None else (1.0,) * len(levels)
    if len(weights) < len(levels):
        raise ValueError(
            f"{len(levels)} prediction scales but only {len(weights)} scale weights"
        )
    weights = weights[len(weights) - len(levels) :]

    total = None
    for weight, level in zip(weights, levels):
        target = gt.vectors if level.indices is None else gt.vectors[level.indices]
        if level.prediction.shape[0] != target.shape[0]:
            raise ValueError(
                f"Prediction length {level.prediction.shape[0]} does not match "
                f"ground truth length {target.shape[0]}"
            )
        term = weight * _mean_squared_norm(
            level.prediction - torch.tensor(target, dtype=level.prediction.dtype)
        )
        total = term if total is None else total + term
    return total


def ema_update(teacher: ModelParameters, student: ModelParameters, alpha: float) -> ModelParameters:
    """theta' <- alpha * theta' + (1 - alpha) * theta, element-wise."""
    if len(teacher) != len(student):
        raise ValueError(
            f"Teacher has {len(teacher)} parameters, student has {len(student)}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    mixed = alpha * teacher.values.astype(np.float64) + (1.0 - alpha) * student.values.astype(
        np.float64
    )
    return ModelParameters(mixed.astype(teacher.values.dtype))


def filter_indicator(
    case: RegistrationCase, phi_student: Prediction, phi_teacher: DisplacementField
) -> int:
    """1 if the teacher warp is strictly closer to the fixed cloud (Chamfer) than the student warp."""
    student_field = _as_field(phi_student)
    teacher_cd = chamfer_distance(case.moving.warped(phi_teacher), case.fixed)
    student_cd = chamfer_distance(case.moving.warped(student_field), case.fixed)
    return int(teacher_cd < student_cd)


def consistency_loss(
    case: RegistrationCase,
    phi_student: Prediction,
    phi_teacher: DisplacementField,
    indicator: Optional[int] = None,
) -> torch.Tensor:
    """
    Indicator times the mean squared student-teacher difference.

    The teacher field enters as a constant. Only the full-resolution student
    prediction is compared. Pass ``indicator`` to reuse a precomputed filter
    decision (1 disables filtering).
    """
    student = _final(phi_student)
    phi_teacher.check_matches(case.moving)
    if indicator is None:
        indicator = filter_indicator(case, phi_student, phi_teacher)
    if not indicator:
        return torch.zeros((), dtype=student.dtype)
    teacher = torch.tensor(phi_teacher.vectors, dtype=student.dtype)
    return _mean_squared_norm(student - teacher)


def chamfer_loss(moving: PointCloud, phi_student: Prediction, fixed: PointCloud) -> torch.Tensor:
    """
    Differentiable symmetric Chamfer loss (per-point means) of the warped moving cloud.

    Nearest-neighbor assignments are computed on detached coordinates.
    """
    phi = _final(phi_student)
    warped = torch.tensor(moving.points, dtype=phi.dtype) + phi
    target = torch.tensor(fixed.points, dtype=phi.dtype)
    warped_cloud = PointCloud(warped.detach().cpu().numpy().astype(np.float64))
    to_fixed = torch.from_numpy(build_index(fixed).nearest(warped_cloud.points))
    to_warped = torch.from_numpy(build_index(warped_cloud).nearest(fixed.points))
    return _mean_squared_norm(warped - target[to_fixed]) + _mean_squared_norm(
        target - warped[to_warped]
    )


def synthesize_pair(
    case: RegistrationCase,
    phi_teacher: DisplacementField,
    cfg: AdaptationConfig,
    rng: np.random.Generator,
) -> SourceTriplet:
    """
    Build a noise-free training pair from the teacher's own prediction.

    The teacher field is interpolated to the high-res pool; the moving side is
    subset A of the pool and the fixed side is the warped subset B, with A and
    B disjoint. The label is the interpolated field on A.
    """
    pool = case.moving_highres
    if pool is None:
        raise ValueError(f"Case '{case.case_id}' has no high-res moving cloud")
    n = cfg.n_points
    if len(pool) < 2 * n:
        raise ValueError(
            f"High-res pool of case '{case.case_id}' has {len(pool)} points, "
            f"need at least {2 * n}"
        )
    dense = gaussian_interpolate(case.moving, phi_teacher, pool, cfg.interp_sigma_mm)
    perm = rng.permutation(len(pool))
    subset_a, subset_b = perm[:n], perm[n : 2 * n]
    warped = pool.points + dense.vectors
    return SourceTriplet(
        moving=pool.subset(subset_a),
        fixed=PointCloud(warped[subset_b]),
        gt=DisplacementField(dense.vectors[subset_a]),
        moving_indices=subset_a,
        fixed_indices=subset_b,
    )


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


def train_step(
    state: TrainState,
    source_batch: Sequence[SourceTriplet],
    target_batch: Sequence[RegistrationCase],
    cfg: AdaptationConfig,
    rng: Optional[np.random.Generator] = None,
) -> tuple[TrainState, LossRecord]:
    """
    One optimizer step on the weighted total loss.

    Gradients of every batch item are accumulated in float64, then one Adam
    step updates the student and the teacher follows by EMA. Raises
    NonFiniteLossError (state untouched) if any loss term is not finite.
    """
    if rng is None:
        rng = np.random.default_rng([cfg.seed, state.step])
    mc = state.model_config
    grad = np.zeros(len(state.student))

    sup_terms, con_terms, syn_terms, cd_terms = [], [], [], []
    n_accepted = 0
    use_teacher = cfg.lambda_con > 0 or cfg.lambda_syn > 0
    use_target = use_teacher or cfg.lambda_chamfer > 0

    for triplet in source_batch:
        _, tape = forward(state.student, triplet.moving, triplet.fixed, mc)
        loss = supervised_loss(tape, triplet.gt, cfg.scale_weights)
        sup_terms.append(loss.item())
        grad += backward(tape, cfg.lambda_sup * loss / len(source_batch))

    if use_target:
        for case in target_batch:
            neighbors = cloud_neighbors(case.moving, case.fixed, mc)
            phi_student, tape = forward(state.student, case.moving, case.fixed, mc, neighbors)
            loss = torch.zeros((), dtype=tape.theta.dtype)
            if use_teacher:
                phi_teacher = predict(state.teacher, case.moving, case.fixed, mc, neighbors)
            if cfg.lambda_con > 0:
                indicator = (
                    filter_indicator(case, phi_student, phi_teacher)
                    if cfg.filter_pseudo_labels
                    else 1
                )
                n_accepted += indicator
                con = consistency_loss(case, tape, phi_teacher, indicator=indicator)
                con_terms.append(con.item())
                loss = loss + cfg.lambda_con * con
            if cfg.lambda_chamfer > 0:
                cd = chamfer_loss(case.moving, tape, case.fixed)
                cd_terms.append(cd.item())
                loss = loss + cfg.lambda_chamfer * cd
            grad += backward(tape, loss / len(target_batch))

            if cfg.lambda_syn > 0:
                triplet = synthesize_pair(case, phi_teacher, cfg, rng)
                _, syn_tape = forward(state.student, triplet.moving, triplet.fixed, mc)
                syn = supervised_loss(syn_tape, triplet.gt, cfg.scale_weights)
                syn_terms.append(syn.item())
                grad += backward(syn_tape, cfg.lambda_syn * syn / len(target_batch))

    def mean(values: list) -> float:
        return float(np.mean(values)) if values else 0.0

    l_sup, l_con, l_syn, l_cd = mean(sup_terms), mean(con_terms), mean(syn_terms), mean(cd_terms)
    total = (
        cfg.lambda_sup * l_sup
        + cfg.lambda_con * l_con
        + cfg.lambda_syn * l_syn
        + cfg.lambda_chamfer * l_cd
    )
    if not math.isfinite(total) or not np.all(np.isfinite(grad)):
        raise NonFiniteLossError(f"Non-finite loss at step {state.step} (total={total})")

    student, optimizer = adam_step(state.student, grad, state.optimizer, cfg.lr)
    teacher = ema_update(state.teacher, student, cfg.alpha)
    record = LossRecord(
        step=state.step,
        epoch=state.epoch,
        l_sup=l_sup,
        l_con=l_con,
        l_syn=l_syn,
        l_chamfer=l_cd,
        total=total,
        n_accepted=n_accepted if cfg.lambda_con > 0 else 0,
        n_target=len(target_batch) if cfg.lambda_con > 0 else 0,
    )
    logger.debug(
        "step %d: sup=%.4g con=%.4g syn=%.4g cd=%.4g accepted=%d/%d",
        record.step,
        l_sup,
        l_con,
        l_syn,
        l_cd,
        record.n_accepted,
        record.n_target,
    )
    new_state = replace(
        state, student=student, teacher=teacher, optimizer=optimizer, step=state.step + 1
    )
    return new_state, record


def epoch_rng(seed: int, phase: int, epoch: int) -> np.random.Generator:
    """Independent random stream for one epoch of one training phase."""
    return np.random.default_rng([seed, phase, epoch])


def _subsample_indices(n_total: int, n: int, rng: np.random.Generator) -> Optional[np.ndarray]:
    if n_total <= n:
        return None
    return np.sort(rng.choice(n_total, size=n, replace=False))


def subsample_case(case: RegistrationCase, n_points: int, rng: np.random.Generator) -> RegistrationCase:
    """Random n_points subsets of the moving (with gt) and fixed clouds."""
    moving_idx = _subsample_indices(len(case.moving), n_points, rng)
    fixed_idx = _subsample_indices(len(case.fixed), n_points, rng)
    if moving_idx is None and fixed_idx is None:
        return case
    moving, gt = case.moving, case.gt
    if moving_idx is not None:
        moving = moving.subset(moving_idx)
        gt = gt.subset(moving_idx) if gt is not None else None
    fixed = case.fixed if fixed_idx is None else case.fixed.subset(fixed_idx)
    return replace(case, moving=moving, fixed=fixed, gt=gt)


def make_source_batch(
    data: AdaptationData,
    indices: Sequence[int],
    cfg: AdaptationConfig,
    rng: np.random.Generator,
) -> list[SourceTriplet]:
    """Deform the chosen source clouds, pre-align each pair and subsample it."""
    batch = []
    for i in indices:
        triplet = make_source_triplet(data.source_clouds[i], data.source_spec, rng)
        case = pre_align(
            RegistrationCase(
                fixed=triplet.fixed, moving=triplet.moving, gt=triplet.gt, case_id=f"source_{i}"
            )
        )
        case = subsample_case(case, cfg.n_points, rng)
        batch.append(SourceTriplet(moving=case.moving, fixed=case.fixed, gt=case.gt))
    return batch


def _summarize_epoch(phase: str, epoch: int, records: list, aborted: int) -> EpochSummary:
    def mean(attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in records])) if records else 0.0

    total_target = sum(r.n_target for r in records)
    accepted = sum(r.n_accepted for r in records)
    return EpochSummary(
        phase=phase,
        epoch=epoch,
        steps=len(records),
        aborted=aborted,
        l_sup=mean("l_sup"),
        l_con=mean("l_con"),
        l_syn=mean("l_syn"),
        l_chamfer=mean("l_chamfer"),
        total=mean("total"),
        acceptance_rate=accepted / total_target if total_target else 0.0,
    )


def _guarded_step(state, source_batch, target_batch, cfg, rng):
    try:
        return train_step(state, source_batch, target_batch, cfg, rng)
    except FloatingPointError as e:
        logger.warning("Step %d aborted: %s", state.step, e)
        return state, None


def run_pretraining(
    data: AdaptationData,
    cfg: AdaptationConfig,
    model_config: ModelConfig,
    on_step: Optional[Callable[[LossRecord], None]] = None,
    on_epoch_end: Optional[Callable[[TrainState, EpochSummary], None]] = None,
) -> TrainState:
    """
    Supervised training on synthesized source pairs only.

    One epoch visits every source cloud once in a shuffled order. The teacher
    is reset to the student at the end.
    """
    if not data.source_clouds:
        raise ValueError("Pretraining needs at least one source cloud")
    pre_cfg = replace(cfg, lambda_con=0.0, lambda_syn=0.0, lambda_chamfer=0.0)
    state = TrainState.initial(model_config)

    for epoch in range(cfg.pretrain_epochs):
        rng = epoch_rng(cfg.seed, PHASE_PRETRAIN, epoch)
        order = rng.permutation(len(data.source_clouds))
        records, aborted = [], 0
        for start in range(0, len(order), cfg.batch_source):
            source_batch = make_source_batch(data, order[start : start + cfg.batch_source], pre_cfg, rng)
            state, record = _guarded_step(state, source_batch, [], pre_cfg, rng)
            if record is None:
                aborted += 1
                continue
            records.append(record)
            if on_step:
                on_step(record)
        state = replace(state, epoch=epoch + 1)
        summary = _summarize_epoch("pretrain", epoch, records, aborted)
        logger.info(
            "pretrain epoch %d/%d: sup=%.4g (%d steps, %d aborted)",
            epoch + 1,
            cfg.pretrain_epochs,
            summary.l_sup,
            summary.steps,
            aborted,
        )
        if on_epoch_end:
            on_epoch_end(state, summary)

    return replace(state, teacher=state.student.copy())


def run_adaptation(
    data: AdaptationData,
    state: TrainState,
    cfg: AdaptationConfig,
    on_step: Optional[Callable[[LossRecord], None]] = None,
    on_epoch_end: Optional[Callable[[TrainState, EpochSummary], None]] = None,
) -> TrainState:
    """
    Joint optimization on mixed source/target batches.

    One epoch visits every target case once; each step pairs ``batch_target``
    target cases with ``batch_source`` freshly deformed source clouds. Target
    clouds are resampled to ``n_points`` per epoch.
    """
    if cfg.adapt_epochs == 0:
        return state
    if not data.target_cases:
        raise ValueError("Adaptation needs at least one target case")
    if not data.source_clouds and cfg.lambda_sup > 0:
        raise ValueError("Adaptation with lambda_sup > 0 needs source clouds")
    state = replace(state, epoch=0)

    for epoch in range(cfg.adapt_epochs):
        rng = epoch_rng(cfg.seed, PHASE_ADAPT, epoch)
        order = rng.permutation(len(data.target_cases))
        records, aborted = [], 0
        for start in range(0, len(order), cfg.batch_target):
            target_batch = [
                subsample_case(data.target_cases[i], cfg.n_points, rng)
                for i in order[start : start + cfg.batch_target]
            ]
            source_batch = []
            if data.source_clouds:
                picks = rng.choice(
                    len(data.source_clouds),
                    size=cfg.batch_source,
                    replace=len(data.source_clouds) < cfg.batch_source,
                )
                source_batch = make_source_batch(data, picks, cfg, rng)
            state, record = _guarded_step(state, source_batch, target_batch, cfg, rng)
            if record is None:
                aborted += 1
                continue
            records.append(record)
            if on_step:
                on_step(record)
        state = replace(state, epoch=epoch + 1)
        summary = _summarize_epoch("adapt", epoch, records, aborted)
        logger.info(
            "adapt epoch %d/%d: sup=%.4g con=%.4g syn=%.4g cd=%.4g accepted=%.2f",
            epoch + 1,
            cfg.adapt_epochs,
            summary.l_sup,
            summary.l_con,
            summary.l_syn,
            summary.l_chamfer,
            summary.acceptance_rate,
        )
        if on_epoch_end:
            on_epoch_end(state, summary)
    return state
