"""Tests for the registration model, its gradients and the Adam optimizer."""

import numpy as np
import pytest
import torch

from dmt_registration.services.adapt import (
    AdaptationConfig,
    chamfer_loss,
    consistency_loss,
    supervised_loss,
    synthesize_pair,
)
from dmt_registration.services.geometry import DisplacementField, PointCloud
from dmt_registration.services.model import (
    Activation,
    AdamState,
    ModelConfig,
    ModelParameters,
    NonFiniteGradientError,
    ParameterLayoutError,
    Tape,
    TapeConsumedError,
    adam_step,
    backward,
    canonical_subsample,
    cloud_neighbors,
    config_hash,
    forward,
    init_parameters,
    knn_canonical,
    parameter_layout,
    predict,
)


def random_parameters(cfg: ModelConfig, seed: int = 0, scale: float = 0.3) -> ModelParameters:
    rng = np.random.default_rng(seed)
    values = rng.normal(scale=scale, size=parameter_layout(cfg).size)
    return ModelParameters(values.astype(cfg.dtype))


@pytest.fixture
def smooth_config():
    """Single-scale float64 model without max-pool or neighbor-set kinks."""
    return ModelConfig(
        k=1,
        k_corr=3,
        feature_width=4,
        num_scales=1,
        activation=Activation.TANH,
        coordinate_scale_mm=20.0,
        dtype="float64",
    )


def assert_gradient_matches(params, loss_of_tape, cfg, moving, fixed, h=1e-4):
    """Compare backward() with central differences on 10 informative coordinates."""
    _, tape = forward(params, moving, fixed, cfg)
    grad = backward(tape, loss_of_tape(tape))
    assert grad.shape == (len(params),)

    scale = np.abs(grad).max()
    assert scale > 0
    candidates = np.flatnonzero(np.abs(grad) > 1e-3 * scale)
    coords = np.random.default_rng(0).choice(candidates, size=min(10, len(candidates)), replace=False)

    def value(values):
        _, t = forward(ModelParameters(values), moving, fixed, cfg)
        return float(loss_of_tape(t))

    for i in coords:
        plus = params.values.copy()
        minus = params.values.copy()
        plus[i] += h
        minus[i] -= h
        numeric = (value(plus) - value(minus)) / (2 * h)
        assert abs(grad[i] - numeric) <= 1e-4 * abs(numeric) + 1e-8 * scale, (i, grad[i], numeric)


class TestModelConfig:
    """Test architecture configuration and parameter layout."""

    def test_layout_size(self, tiny_model_config):
        """Test the flat layout size for width 8 and two scales."""
        # Per scale: (3+1)*8 + (8+1)*8 + (19+1)*8 + (8+1)*1 + (19+1)*8 + (8+1)*3
        assert parameter_layout(tiny_model_config).size == 2 * 460

    def test_layout_order(self, tiny_model_config):
        """Test that weights precede biases and scales are contiguous."""
        names = [name for name, _ in parameter_layout(tiny_model_config).entries]
        assert names[:3] == ["s0.enc1.W", "s0.enc1.b", "s0.enc2.W"]
        assert names[12] == "s1.enc1.W"
        assert names[-1] == "s1.dec2.b"

    def test_invalid_values(self):
        """Test config validation."""
        with pytest.raises(ValueError, match="num_scales"):
            ModelConfig(num_scales=3)
        with pytest.raises(ValueError, match="Neighborhood"):
            ModelConfig(k=0)
        with pytest.raises(ValueError, match="dtype"):
            ModelConfig(dtype="float16")

    def test_config_hash_ignores_seed_and_precision(self, tiny_model_config):
        """Test that the hash identifies the layout only."""
        from dataclasses import replace

        base = config_hash(tiny_model_config)
        assert config_hash(replace(tiny_model_config, init_seed=9, dtype="float32")) == base
        assert config_hash(replace(tiny_model_config, feature_width=9)) != base
        assert len(base) == 32


class TestInitialization:
    """Test seeded parameter initialization."""

    def test_zero_decoder_and_biases(self, tiny_model_config):
        """Test that biases and the last decoder layer start at zero."""
        params = init_parameters(tiny_model_config)
        offsets = parameter_layout(tiny_model_config).offsets()
        for name, (start, stop, _) in offsets.items():
            block = params.values[start:stop]
            if name.endswith(".b") or ".dec2." in name:
                assert not np.any(block), name
            else:
                assert np.any(block), name

    def test_seeded(self, tiny_model_config):
        """Test that the init seed fixes the values."""
        from dataclasses import replace

        a = init_parameters(tiny_model_config)
        b = init_parameters(tiny_model_config)
        c = init_parameters(replace(tiny_model_config, init_seed=1))
        assert np.array_equal(a.values, b.values)
        assert not np.array_equal(a.values, c.values)

    def test_dtype(self):
        """Test that the default model stores single precision."""
        assert init_parameters(ModelConfig(feature_width=4)).values.dtype == np.float32

    def test_parameters_must_be_finite(self):
        """Test that NaN parameters are rejected."""
        with pytest.raises(ValueError, match="finite"):
            ModelParameters(np.array([0.0, np.nan]))


class TestForward:
    """Test the forward pass."""

    def test_zero_init_is_identity(self, tiny_model_config, toy_case):
        """Test that a fresh model predicts a zero field."""
        phi, _ = forward(init_parameters(tiny_model_config), toy_case.moving, toy_case.fixed, tiny_model_config)
        assert phi.vectors.shape == (64, 3)
        assert not np.any(phi.vectors)

    @pytest.mark.parametrize("num_scales", [1, 2])
    def test_output_length(self, tiny_model_config, toy_case, num_scales):
        """Test one vector per moving point for both scale counts."""
        from dataclasses import replace

        cfg = replace(tiny_model_config, num_scales=num_scales)
        moving = toy_case.moving.subset(np.arange(37))
        phi, tape = forward(random_parameters(cfg), moving, toy_case.fixed, cfg)
        assert len(phi) == 37
        assert len(tape.levels) == num_scales
        assert tape.prediction.shape == (37, 3)

    def test_coarse_level_indices(self, tiny_model_config, toy_case):
        """Test that the coarse level records its subsample of the moving cloud."""
        _, tape = forward(random_parameters(tiny_model_config), toy_case.moving, toy_case.fixed, tiny_model_config)
        coarse = tape.levels[0]
        assert coarse.indices is not None
        assert len(coarse.indices) == tiny_model_config.coarse_points
        assert coarse.prediction.shape == (tiny_model_config.coarse_points, 3)

    def test_permutation_equivariance(self, tiny_model_config, toy_case, rng):
        """Test that permuting the moving cloud permutes the prediction."""
        params = random_parameters(tiny_model_config, seed=4)
        phi, _ = forward(params, toy_case.moving, toy_case.fixed, tiny_model_config)
        perm = rng.permutation(len(toy_case.moving))
        phi_p, _ = forward(params, toy_case.moving.subset(perm), toy_case.fixed, tiny_model_config)
        np.testing.assert_allclose(phi_p.vectors, phi.vectors[perm], atol=1e-6)

    def test_bitwise_deterministic(self, tiny_model_config, toy_case):
        """Test that repeated passes give identical bytes."""
        params = random_parameters(tiny_model_config, seed=2)
        a, _ = forward(params, toy_case.moving, toy_case.fixed, tiny_model_config)
        b, _ = forward(params, toy_case.moving, toy_case.fixed, tiny_model_config)
        assert a.vectors.tobytes() == b.vectors.tobytes()

    def test_predict_matches_forward(self, tiny_model_config, toy_case):
        """Test that the no-graph prediction equals the recorded one."""
        params = random_parameters(tiny_model_config, seed=3)
        phi, _ = forward(params, toy_case.moving, toy_case.fixed, tiny_model_config)
        np.testing.assert_array_equal(predict(params, toy_case.moving, toy_case.fixed, tiny_model_config).vectors, phi.vectors)

    def test_shared_neighbors_match(self, tiny_model_config, toy_case):
        """Test that precomputed neighbor lists give a bitwise identical pass."""
        params = random_parameters(tiny_model_config, seed=4)
        neighbors = cloud_neighbors(toy_case.moving, toy_case.fixed, tiny_model_config)
        plain, _ = forward(params, toy_case.moving, toy_case.fixed, tiny_model_config)
        shared, tape = forward(params, toy_case.moving, toy_case.fixed, tiny_model_config, neighbors)
        assert plain.vectors.tobytes() == shared.vectors.tobytes()
        assert tape.levels[0].indices.tolist() == neighbors.coarse_moving.tolist()
        again = predict(params, toy_case.moving, toy_case.fixed, tiny_model_config, neighbors)
        assert again.vectors.tobytes() == plain.vectors.tobytes()

    def test_single_scale_neighbors(self, tiny_model_config, toy_case):
        """Test that one scale needs no coarse subsample or upsampling."""
        from dataclasses import replace

        cfg = replace(tiny_model_config, num_scales=1)
        neighbors = cloud_neighbors(toy_case.moving, toy_case.fixed, cfg)
        assert neighbors.upsample is None
        assert neighbors.moving_knn[0].shape == (len(toy_case.moving), cfg.k)
        assert neighbors.fixed_knn[0].shape == (len(toy_case.fixed), cfg.k)

    def test_single_point_clouds(self, tiny_model_config):
        """Test that one-point clouds are handled."""
        phi, _ = forward(
            random_parameters(tiny_model_config),
            PointCloud([[0.0, 0.0, 0.0]]),
            PointCloud([[1.0, 0.0, 0.0]]),
            tiny_model_config,
        )
        assert len(phi) == 1

    def test_layout_mismatch(self, tiny_model_config, toy_case):
        """Test that a parameter vector of the wrong length is rejected."""
        with pytest.raises(ParameterLayoutError, match="config expects"):
            forward(ModelParameters(np.zeros(5)), toy_case.moving, toy_case.fixed, tiny_model_config)


class TestNeighbors:
    """Test canonical neighbor selection."""

    def test_knn_matches_sorted_oracle(self, rng):
        """Test ordering by distance, then coordinates, on a grid full of ties."""
        grid = np.stack(np.meshgrid(*[np.arange(4.0)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
        refs = grid[rng.permutation(len(grid))]
        queries = rng.integers(0, 4, size=(10, 3)).astype(float) + 0.5
        result = knn_canonical(queries, refs, k=6)

        for row, q in enumerate(queries):
            d = ((refs - q) ** 2).sum(axis=1)
            expected = np.lexsort((refs[:, 2], refs[:, 1], refs[:, 0], d))[:6]
            assert result[row].tolist() == expected.tolist()

    def test_knn_matches_exhaustive_scan(self, rng):
        """Test a large random cloud against an exhaustive distance scan."""
        refs = rng.normal(scale=20.0, size=(600, 3))
        queries = rng.normal(scale=20.0, size=(150, 3))
        result = knn_canonical(queries, refs, k=8)
        d = ((queries[:, np.newaxis, :] - refs[np.newaxis, :, :]) ** 2).sum(axis=-1)
        np.testing.assert_array_equal(result, np.argsort(d, axis=1, kind="stable")[:, :8])

    def test_knn_duplicates_and_dense_ties(self, rng):
        """Test ties beyond the candidate margin on a lattice with duplicate points."""
        refs = rng.integers(0, 3, size=(200, 3)).astype(float)
        queries = rng.integers(0, 3, size=(20, 3)).astype(float)
        result = knn_canonical(queries, refs, k=12)
        for row, q in enumerate(queries):
            d = ((refs - q) ** 2).sum(axis=1)
            expected = np.lexsort((refs[:, 2], refs[:, 1], refs[:, 0], d))[:12]
            assert result[row].tolist() == expected.tolist()

    def test_knn_k_capped(self):
        """Test that k larger than the reference set returns all references."""
        refs = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        assert knn_canonical(np.zeros((1, 3)), refs, k=5).tolist() == [[1, 0]]

    def test_subsample_independent_of_order(self, rng):
        """Test that the coarse subsample picks the same points in any order."""
        pts = rng.normal(size=(50, 3))
        perm = rng.permutation(50)
        a = pts[canonical_subsample(pts, 12)]
        b = pts[perm][canonical_subsample(pts[perm], 12)]
        np.testing.assert_array_equal(a, b)

    def test_subsample_all(self, rng):
        """Test that asking for at least N points keeps every point."""
        assert canonical_subsample(rng.normal(size=(5, 3)), 8).tolist() == [0, 1, 2, 3, 4]


class TestBackward:
    """Test reverse-mode gradients."""

    def test_quadratic_toy_model(self):
        """Test d(a * theta^2)/dtheta = 2 * a * theta."""
        tape = Tape(theta=torch.tensor([3.0], dtype=torch.float64, requires_grad=True))
        loss = 1.5 * (tape.theta**2).sum()
        np.testing.assert_allclose(backward(tape, loss), [9.0])

    def test_seed_scales_gradient(self):
        """Test that the seed multiplies the gradient."""
        tape = Tape(theta=torch.tensor([2.0], dtype=torch.float64, requires_grad=True))
        np.testing.assert_allclose(backward(tape, (tape.theta**2).sum(), seed=0.5), [2.0])

    def test_zero_weight_loss(self, tiny_model_config, toy_case):
        """Test that a zero-weighted loss yields a zero gradient."""
        _, tape = forward(random_parameters(tiny_model_config), toy_case.moving, toy_case.fixed, tiny_model_config)
        grad = backward(tape, 0.0 * supervised_loss(tape, toy_case.gt))
        assert grad.shape == (parameter_layout(tiny_model_config).size,)
        assert not np.any(grad)

    def test_constant_loss(self, tiny_model_config, toy_case):
        """Test that a loss without parameter dependence yields zeros."""
        _, tape = forward(random_parameters(tiny_model_config), toy_case.moving, toy_case.fixed, tiny_model_config)
        assert not np.any(backward(tape, torch.zeros((), dtype=torch.float64)))

    def test_tape_consumed(self, tiny_model_config, toy_case):
        """Test that a tape supports one backward pass only."""
        _, tape = forward(random_parameters(tiny_model_config), toy_case.moving, toy_case.fixed, tiny_model_config)
        backward(tape, supervised_loss(tape, toy_case.gt))
        with pytest.raises(TapeConsumedError):
            backward(tape, supervised_loss(tape, toy_case.gt))

    def test_float32_gradient_is_float64(self, toy_case):
        """Test that single-precision models return double-precision gradients."""
        cfg = ModelConfig(k=2, k_corr=2, feature_width=4, num_scales=1)
        _, tape = forward(random_parameters(cfg), toy_case.moving, toy_case.fixed, cfg)
        assert backward(tape, supervised_loss(tape, toy_case.gt)).dtype == np.float64


class TestGradientCheck:
    """Finite-difference checks of every training loss."""

    def test_supervised_loss(self, smooth_config, toy_case):
        """Test the supervised loss gradient."""
        assert_gradient_matches(
            random_parameters(smooth_config, seed=11, scale=0.5),
            lambda tape: supervised_loss(tape, toy_case.gt),
            smooth_config,
            toy_case.moving,
            toy_case.fixed,
        )

    def test_consistency_loss(self, smooth_config, toy_case, rng):
        """Test the consistency loss gradient with the filter accepting."""
        teacher = DisplacementField(rng.normal(scale=2.0, size=(64, 3)))
        assert_gradient_matches(
            random_parameters(smooth_config, seed=12, scale=0.5),
            lambda tape: consistency_loss(toy_case, tape, teacher, indicator=1),
            smooth_config,
            toy_case.moving,
            toy_case.fixed,
        )

    def test_synthesized_pair_loss(self, smooth_config, toy_case, rng):
        """Test the gradient of the supervised loss on a teacher-synthesized pair."""
        teacher = DisplacementField(rng.normal(scale=2.0, size=(64, 3)))
        cfg = AdaptationConfig(n_points=64, n_points_highres=128)
        triplet = synthesize_pair(toy_case, teacher, cfg, np.random.default_rng(0))
        assert_gradient_matches(
            random_parameters(smooth_config, seed=13, scale=0.5),
            lambda tape: supervised_loss(tape, triplet.gt),
            smooth_config,
            triplet.moving,
            triplet.fixed,
        )

    def test_chamfer_loss(self, smooth_config, toy_case):
        """Test the Chamfer baseline loss gradient."""
        assert_gradient_matches(
            random_parameters(smooth_config, seed=14, scale=0.5),
            lambda tape: chamfer_loss(toy_case.moving, tape, toy_case.fixed),
            smooth_config,
            toy_case.moving,
            toy_case.fixed,
        )


class TestAdam:
    """Test the Adam update."""

    def test_zero_gradient(self):
        """Test that a zero gradient leaves the parameters unchanged."""
        params = ModelParameters(np.array([1.0, -2.0, 3.0]))
        new, state = adam_step(params, np.zeros(3), AdamState.zeros(3), lr=0.1)
        assert np.array_equal(new.values, params.values)
        assert state.step == 1

    def test_first_step_is_sign(self):
        """Test that the bias-corrected first step is about -lr * sign(g)."""
        params = ModelParameters(np.zeros(4))
        grad = np.array([0.5, -3.0, 1e-2, -7.0])
        new, _ = adam_step(params, grad, AdamState.zeros(4), lr=0.01)
        np.testing.assert_allclose(new.values, -0.01 * np.sign(grad), rtol=1e-5)

    def test_converges_on_quadratic(self):
        """Test 100 steps on theta^2 from theta = 1 with lr 0.1."""
        params = ModelParameters(np.array([1.0]))
        state = AdamState.zeros(1)
        for _ in range(100):
            params, state = adam_step(params, 2.0 * params.values, state, lr=0.1)
        assert abs(params.values[0]) < 0.05
        assert state.step == 100

    def test_keeps_single_precision(self):
        """Test that float32 parameters stay float32 while moments are float64."""
        params = ModelParameters(np.ones(2, dtype=np.float32))
        new, state = adam_step(params, np.ones(2), AdamState.zeros(2), lr=0.1)
        assert new.values.dtype == np.float32
        assert state.m.dtype == np.float64

    def test_non_finite_gradient(self):
        """Test that NaN gradients are rejected."""
        with pytest.raises(NonFiniteGradientError):
            adam_step(ModelParameters(np.zeros(2)), np.array([np.nan, 0.0]), AdamState.zeros(2), lr=0.1)

    def test_shape_mismatch(self):
        """Test that mismatched gradient shapes are rejected."""
        with pytest.raises(ValueError, match="Shape mismatch"):
            adam_step(ModelParameters(np.zeros(2)), np.zeros(3), AdamState.zeros(2), lr=0.1)
