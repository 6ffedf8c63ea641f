import numpy as np
import pytest

from regionstitch import DenoiserConfig, build_denoiser, preset_config


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        print(f"\n[ACCEPTANCE] {name}: {'PASS' if report.passed else 'FAIL'}")


@pytest.fixture(scope="session")
def tiny_configs():
    """Small-but-real preset pair on a 4x4 token grid."""
    large = preset_config("large", tokens=16, channels=4, weight_seed=101)
    small = preset_config("small", tokens=16, channels=4, weight_seed=202)
    return large, small


@pytest.fixture(scope="session")
def tiny_models(tiny_configs):
    large, small = tiny_configs
    return build_denoiser(large), build_denoiser(small)


def micro_config(seed: int, tokens: int = 16, channels: int = 2) -> DenoiserConfig:
    """One-layer micro model for scheduler sweeps where speed matters."""
    return DenoiserConfig(
        layers=1, heads=2, model_dim=16, tokens=tokens, channels=channels, weight_seed=seed
    )


def rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
