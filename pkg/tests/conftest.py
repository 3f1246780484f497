import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sst_parking.model import ModelConfig, SSTModel
from sst_parking.pipeline import PipelineConfig, SynthConfig, make_windows, prepare_synthetic

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TOY = ModelConfig(seq_len=24, pred_len=8, n_channels=6, d_model=16, n_heads=2, n_layers=1, patch_len=4, dropout=0.0)


@pytest.fixture
def toy_cfg():
    return TOY


@pytest.fixture
def toy_model():
    return SSTModel(TOY, seed=0)


@pytest.fixture(scope="session")
def small_data():
    """Ten days, eight lots in two zones."""
    return prepare_synthetic(SynthConfig(n_lots=8, n_zones=2, days=10, seed=3), PipelineConfig(k=2))


@pytest.fixture(scope="session")
def small_windows(small_data):
    return make_windows(small_data, 48, 24, stride=12, stride_eval=12)


@pytest.fixture
def small_cfg():
    return ModelConfig(seq_len=48, pred_len=24, d_model=16, n_heads=2, n_layers=1, patch_len=8, dropout=0.1)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    """Log one criterion outcome; printed in the terminal summary."""
    ACCEPTANCE[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
