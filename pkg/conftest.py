import numpy as np
import pytest

from dmt_registration.services.model import Activation, ModelConfig
from dmt_registration.services.synth import (
    DeformationKind,
    DeformationSpec,
    make_toy_case,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config():
    """Two-scale float64 model small enough for per-test training steps."""
    return ModelConfig(
        k=4,
        k_corr=4,
        feature_width=8,
        num_scales=2,
        coarse_points=16,
        activation=Activation.TANH,
        coordinate_scale_mm=20.0,
        dtype="float64",
    )


@pytest.fixture
def target_spec():
    return DeformationSpec(kind=DeformationKind.TWO_SCALE_RANDOM_FIELD)


@pytest.fixture
def toy_case(target_spec):
    """Small toy target case: 64 moving/fixed points, 128-point pool, landmarks."""
    return make_toy_case(
        "case_t",
        np.random.default_rng(7),
        target_spec,
        n_points=64,
        n_points_highres=128,
        n_landmarks=6,
    )


@pytest.fixture
def tiny_experiment():
    """Config dict of a complete pipeline that runs in seconds."""
    return {
        "dataset": {
            "n_cases": 4,
            "split": [2, 0, 2],
            "n_points": 64,
            "n_points_highres": 128,
            "n_landmarks": 5,
        },
        "model": {
            "k": 4,
            "k_corr": 4,
            "feature_width": 8,
            "num_scales": 2,
            "coarse_points": 16,
            "dtype": "float64",
        },
        "adaptation": {
            "pretrain_epochs": 1,
            "adapt_epochs": 1,
            "batch_source": 2,
            "batch_target": 2,
            "n_points": 64,
            "n_points_highres": 128,
        },
        "evaluation": {"grid_spacing_mm": 8.0},
        "method": "denoised",
        "seed": 3,
    }
