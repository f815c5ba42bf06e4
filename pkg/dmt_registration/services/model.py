"""
Compact cost-volume registration model f(M, F) -> phi with reverse-mode gradients.

IMPORTANT FOR DEVELOPERS:
- Parameters live in ONE flat vector with a fixed, documented layout (see
  ``parameter_layout``); student and teacher always share it
- torch records the computation graph of a forward pass on a Tape; gradients
  are returned as float64 numpy arrays regardless of the parameter precision
- Neighbor indices are computed on detached coordinates with the canonical
  (distance, x, y, z) tie order, which makes the model exactly equivariant to
  permutations of the moving cloud
- The last decoder layer of every scale is zero-initialized, so a fresh model
  is the identity registration (phi = 0)
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F  # noqa: N812

from .geometry import DisplacementField, NeighborIndex, PointCloud, gaussian_weights

logger = logging.getLogger(__name__)


class ParameterLayoutError(ValueError):
    """Parameter vector does not match the layout implied by a ModelConfig."""


class TapeConsumedError(RuntimeError):
    """A Tape was used for a second backward pass."""


class NonFiniteGradientError(FloatingPointError):
    """An optimizer step was requested with NaN or infinite gradient entries."""


class Activation(Enum):
    """Nonlinearity shared by all hidden layers."""

    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    TANH = "tanh"
    SOFTPLUS = "softplus"


_ACTIVATIONS = {
    Activation.RELU: torch.relu,
    Activation.LEAKY_RELU: lambda x: F.leaky_relu(x, negative_slope=0.1),
    Activation.TANH: torch.tanh,
    Activation.SOFTPLUS: F.softplus,
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the registration model."""

    k: int = 8  # local neighborhood (includes the point itself)
    k_corr: int = 8  # fixed-cloud neighbors correlated per moving point
    feature_width: int = 32
    num_scales: int = 2
    coarse_points: int = 512
    activation: Activation = Activation.LEAKY_RELU
    coordinate_scale_mm: float = 50.0
    upsample_sigma_mm: float = 5.0
    dtype: str = "float32"
    init_seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.k_corr < 1:
            raise ValueError("Neighborhood sizes must be at least 1")
        if self.feature_width < 1:
            raise ValueError("feature_width must be at least 1")
        if self.num_scales not in (1, 2):
            raise ValueError("num_scales must be 1 or 2")
        if self.coarse_points < 1:
            raise ValueError("coarse_points must be at least 1")
        if self.coordinate_scale_mm <= 0 or self.upsample_sigma_mm <= 0:
            raise ValueError("coordinate_scale_mm and upsample_sigma_mm must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["activation"] = self.activation.value
        return data


def config_hash(cfg: ModelConfig) -> bytes:
    """SHA-256 digest of the canonical JSON form of a model config."""
    arch = cfg.to_dict()
    # Seed and precision do not change the layout
    arch.pop("init_seed")
    arch.pop("dtype")
    return hashlib.sha256(json.dumps(arch, sort_keys=True).encode("utf-8")).digest()


@dataclass(frozen=True)
class ParameterLayout:
    """Ordered (name, shape) entries of the flat parameter vector."""

    entries: tuple

    @property
    def size(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.entries)

    def offsets(self) -> dict:
        out, pos = {}, 0
        for name, shape in self.entries:
            n = int(np.prod(shape))
            out[name] = (pos, pos + n, shape)
            pos += n
        return out

    def unflatten(self, flat: torch.Tensor) -> dict:
        """Views of ``flat`` keyed by parameter name (gradients flow through)."""
        return {
            name: flat[start:stop].view(*shape)
            for name, (start, stop, shape) in self.offsets().items()
        }


def parameter_layout(cfg: ModelConfig) -> ParameterLayout:
    """
    Flat layout, per scale ``s0`` (coarse or only) and ``s1`` (fine):

    enc1 (3 -> w), enc2 (w -> w)         shared point encoder, max-pooled over k
    cost (2w+3 -> w), attn (w -> 1)      cross-cloud correlation and its softmax logits
    dec1 (2w+3 -> w), dec2 (w -> 3)      decoder; dec2 is zero-initialized

    Each layer stores ``W`` (in, out) followed by ``b`` (out).
    """
    w = cfg.feature_width
    layers = [
        ("enc1", 3, w),
        ("enc2", w, w),
        ("cost", 2 * w + 3, w),
        ("attn", w, 1),
        ("dec1", 2 * w + 3, w),
        ("dec2", w, 3),
    ]
    entries = []
    for scale in range(cfg.num_scales):
        for name, n_in, n_out in layers:
            entries.append((f"s{scale}.{name}.W", (n_in, n_out)))
            entries.append((f"s{scale}.{name}.b", (n_out,)))
    return ParameterLayout(entries=tuple(entries))


@dataclass(frozen=True)
class ModelParameters:
    """Flat parameter vector (theta for the student, theta' for the teacher)."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim != 1:
            raise ValueError("ModelParameters must be a 1-D vector")
        if not np.all(np.isfinite(arr)):
            raise ValueError("ModelParameters must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.values.copy())


def init_parameters(cfg: ModelConfig) -> ModelParameters:
    """Seeded fan-in uniform weights, zero biases and a zero final decoder layer."""
    rng = np.random.default_rng(cfg.init_seed)
    layout = parameter_layout(cfg)
    values = np.zeros(layout.size)
    for name, (start, stop, shape) in layout.offsets().items():
        if name.endswith(".W") and ".dec2." not in name:
            bound = 1.0 / np.sqrt(shape[0])
            values[start:stop] = rng.uniform(-bound, bound, size=stop - start)
    return ModelParameters(values.astype(cfg.dtype))


@dataclass
class ScaleOutput:
    """Prediction at one scale; ``indices`` select its points from the moving cloud."""

    indices: Optional[np.ndarray]
    prediction: torch.Tensor


@dataclass
class Tape:
    """Computation graph of one forward pass, rooted at a parameter leaf tensor."""

    theta: torch.Tensor
    levels: list = field(default_factory=list)
    consumed: bool = False

    @classmethod
    def from_parameters(cls, params: ModelParameters) -> "Tape":
        dtype = torch.float64 if params.values.dtype == np.float64 else torch.float32
        return cls(theta=torch.tensor(params.values, dtype=dtype, requires_grad=True))

    @property
    def prediction(self) -> torch.Tensor:
        """Full-resolution displacement prediction (last scale)."""
        return self.levels[-1].prediction


def knn_canonical(queries, references, k: int) -> np.ndarray:
    """
    Exact k nearest references per query, ordered by (distance, x, y, z).

    Ordering ties by reference coordinates instead of index keeps the result
    independent of the order in which the reference points are stored. The
    references are indexed in lexicographic order, so the index's lowest-index
    tie rule is the coordinate order.
    """
    r = np.asarray(references, dtype=np.float64)
    canon = np.lexsort((r[:, 2], r[:, 1], r[:, 0]))
    index = NeighborIndex(PointCloud(r[canon]))
    return canon[index.query(queries, k)]


@dataclass(frozen=True)
class CloudNeighbors:
    """
    Everything a forward pass derives from the input coordinates alone.

    Computed once per moving/fixed pair and shared between the student and
    teacher passes. Per-scale tuples are ordered coarse to fine.
    """

    coarse_moving: Optional[np.ndarray]
    coarse_fixed: Optional[np.ndarray]
    upsample: Optional[np.ndarray]
    moving_knn: tuple
    fixed_knn: tuple


def cloud_neighbors(moving: PointCloud, fixed: PointCloud, cfg: ModelConfig) -> CloudNeighbors:
    """Within-cloud neighbor lists, coarse subsamples and upsampling weights."""
    m_pts, f_pts = moving.points, fixed.points
    if cfg.num_scales == 1:
        return CloudNeighbors(
            coarse_moving=None,
            coarse_fixed=None,
            upsample=None,
            moving_knn=(knn_canonical(m_pts, m_pts, cfg.k),),
            fixed_knn=(knn_canonical(f_pts, f_pts, cfg.k),),
        )
    coarse_m = canonical_subsample(m_pts, cfg.coarse_points)
    coarse_f = canonical_subsample(f_pts, cfg.coarse_points)
    cm, cf = m_pts[coarse_m], f_pts[coarse_f]
    return CloudNeighbors(
        coarse_moving=coarse_m,
        coarse_fixed=coarse_f,
        upsample=gaussian_weights(cm, m_pts, cfg.upsample_sigma_mm),
        moving_knn=(knn_canonical(cm, cm, cfg.k), knn_canonical(m_pts, m_pts, cfg.k)),
        fixed_knn=(knn_canonical(cf, cf, cfg.k), knn_canonical(f_pts, f_pts, cfg.k)),
    )


def canonical_subsample(points: np.ndarray, n: int) -> np.ndarray:
    """Evenly spaced picks from the lexicographically sorted cloud."""
    total = points.shape[0]
    if n >= total:
        return np.arange(total)
    order = np.lexsort((points[:, 2], points[:, 1], points[:, 0]))
    return order[(np.arange(n) * total) // n]


def _linear(weights: dict, name: str, x: torch.Tensor) -> torch.Tensor:
    return x @ weights[f"{name}.W"] + weights[f"{name}.b"]


def _encode(weights, prefix, pts, idx, scale, act) -> torch.Tensor:
    rel = (pts[idx] - pts.unsqueeze(1)) / scale
    hidden = act(_linear(weights, f"{prefix}.enc1", rel))
    hidden = act(_linear(weights, f"{prefix}.enc2", hidden))
    return hidden.max(dim=1).values


def _scale_level(
    weights: dict,
    prefix: str,
    m_pts: np.ndarray,
    f_pts: np.ndarray,
    knn_m: np.ndarray,
    knn_f: np.ndarray,
    init_flow: Optional[torch.Tensor],
    cfg: ModelConfig,
    dtype: torch.dtype,
) -> torch.Tensor:
    """Displacement (or residual, given ``init_flow``) for one scale."""
    scale = cfg.coordinate_scale_mm
    act = _ACTIVATIONS[cfg.activation]
    moving = torch.tensor(m_pts, dtype=dtype)
    fixed = torch.tensor(f_pts, dtype=dtype)
    if init_flow is None:
        warped, warped_np = moving, m_pts
    else:
        warped = moving + init_flow
        warped_np = warped.detach().cpu().numpy().astype(np.float64)

    idx_m = torch.from_numpy(knn_m)
    idx_f = torch.from_numpy(knn_f)
    idx_c = torch.from_numpy(knn_canonical(warped_np, f_pts, cfg.k_corr))

    feat_m = _encode(weights, prefix, moving, idx_m, scale, act)
    feat_f = _encode(weights, prefix, fixed, idx_f, scale, act)

    offsets = (fixed[idx_c] - warped.unsqueeze(1)) / scale
    n_corr = idx_c.shape[1]
    cost_in = torch.cat(
        [feat_m.unsqueeze(1).expand(-1, n_corr, -1), feat_f[idx_c], offsets], dim=-1
    )
    cost = act(_linear(weights, f"{prefix}.cost", cost_in))
    attn = torch.softmax(_linear(weights, f"{prefix}.attn", cost).squeeze(-1), dim=1)
    attn = attn.unsqueeze(-1)
    agg = (attn * cost).sum(dim=1)
    flow = (attn * offsets).sum(dim=1)

    hidden = act(_linear(weights, f"{prefix}.dec1", torch.cat([feat_m, agg, flow], dim=-1)))
    return _linear(weights, f"{prefix}.dec2", hidden) * scale


def forward(
    params: ModelParameters,
    moving: PointCloud,
    fixed: PointCloud,
    cfg: ModelConfig,
    neighbors: Optional[CloudNeighbors] = None,
) -> tuple[DisplacementField, Tape]:
    """
    Predict one displacement vector per moving point.

    With two scales, a coarse prediction on a canonical subsample is upsampled
    to all moving points by Gaussian interpolation and refined by a residual.
    Pass ``neighbors`` from ``cloud_neighbors`` to reuse them across passes
    over the same pair.
    """
    layout = parameter_layout(cfg)
    if len(params) != layout.size:
        raise ParameterLayoutError(
            f"Parameter vector has {len(params)} entries, config expects {layout.size}"
        )
    if neighbors is None:
        neighbors = cloud_neighbors(moving, fixed, cfg)
    tape = Tape.from_parameters(params)
    weights = layout.unflatten(tape.theta)
    dtype = tape.theta.dtype
    m_pts, f_pts = moving.points, fixed.points

    init_flow = None
    fine_prefix = "s0"
    if cfg.num_scales == 2:
        coarse_m, coarse_f = neighbors.coarse_moving, neighbors.coarse_fixed
        coarse = _scale_level(
            weights,
            "s0",
            m_pts[coarse_m],
            f_pts[coarse_f],
            neighbors.moving_knn[0],
            neighbors.fixed_knn[0],
            None,
            cfg,
            dtype,
        )
        tape.levels.append(ScaleOutput(indices=coarse_m, prediction=coarse))
        init_flow = torch.tensor(neighbors.upsample, dtype=dtype) @ coarse
        fine_prefix = "s1"

    residual = _scale_level(
        weights,
        fine_prefix,
        m_pts,
        f_pts,
        neighbors.moving_knn[-1],
        neighbors.fixed_knn[-1],
        init_flow,
        cfg,
        dtype,
    )
    phi = residual if init_flow is None else init_flow + residual
    tape.levels.append(ScaleOutput(indices=None, prediction=phi))
    return DisplacementField(phi.detach().cpu().numpy().astype(np.float64)), tape


def predict(
    params: ModelParameters,
    moving: PointCloud,
    fixed: PointCloud,
    cfg: ModelConfig,
    neighbors: Optional[CloudNeighbors] = None,
) -> DisplacementField:
    """Forward pass without recording a graph (teacher predictions, evaluation)."""
    with torch.no_grad():
        phi, _ = forward(params, moving, fixed, cfg, neighbors)
    return phi


def backward(tape: Tape, loss: torch.Tensor, seed: float = 1.0) -> np.ndarray:
    """
    Gradient of ``seed * loss`` with respect to the tape's parameters (float64).

    A tape supports a single backward pass. Losses that do not depend on the
    parameters (e.g. a zero-weighted term) yield a zero gradient.
    """
    if tape.consumed:
        raise TapeConsumedError("Tape has already been used for a backward pass")
    tape.consumed = True
    n = tape.theta.numel()
    if not isinstance(loss, torch.Tensor) or not loss.requires_grad:
        return np.zeros(n)
    (grad,) = torch.autograd.grad(
        loss,
        tape.theta,
        grad_outputs=torch.tensor(seed, dtype=loss.dtype),
        allow_unused=True,
    )
    if grad is None:
        return np.zeros(n)
    return grad.detach().cpu().numpy().astype(np.float64)


@dataclass(frozen=True)
class AdamState:
    """First/second moment estimates (float64) and the step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), step=0)


def adam_step(
    params: ModelParameters,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ModelParameters, AdamState]:
    """One bias-corrected Adam update; moments and arithmetic in float64."""
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != params.values.shape or state.m.shape != g.shape:
        raise ValueError(
            f"Shape mismatch: params {params.values.shape}, grad {g.shape}, "
            f"moments {state.m.shape}"
        )
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError("Gradient contains NaN or infinite entries")

    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * (g * g)
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    theta = params.values.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return ModelParameters(theta.astype(params.values.dtype)), AdamState(m=m, v=v, step=t)
