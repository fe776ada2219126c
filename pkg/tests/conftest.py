import numpy as np
import pytest
import torch

from setfusion.cohort import PatientRecord, StaticFeatures
from setfusion.model import FusionConfig, build_model
from setfusion.synth import SynthConfig, synth_generate
from setfusion.train import prepare


def tiny_fusion(**kw) -> FusionConfig:
    base = dict(d=16, layers=2, heads=2, bottleneck=2, dropout=0.0, d_enc=8, text_len=8)
    base.update(kw)
    return FusionConfig(**base)


@pytest.fixture(scope="session")
def small_splits():
    return synth_generate(SynthConfig(n_patients=120, seed=3))


@pytest.fixture(scope="session")
def small_data(small_splits):
    return prepare(small_splits, tiny_fusion(), "vasopressor")


@pytest.fixture(scope="session")
def mixed_windows(small_data):
    """Evaluation windows covering every presence pattern."""
    ws = small_data.eval_windows["train"]
    patterns = {}
    for w in ws:
        patterns.setdefault((w.presence.has_image, w.presence.has_text), []).append(w)
    return patterns


def make_model(maa="tsa", seed=0, **kw):
    return build_model(tiny_fusion(maa=maa, **kw), seed, torch.float64).eval()


def simple_record(**kw) -> PatientRecord:
    d = dict(
        id="p1",
        static=StaticFeatures(60.0, 1),
        stay_end=10.0,
        onsets={"mortality": None, "vasopressor": None, "intubation": None},
        ts_time=np.array([0.5, 1.0, 2.0, 9.5]),
        ts_feature=np.array([0, 1, 2, 3]),
        ts_value=np.array([80.0, 16.0, 70.0, 120.0]),
        image_times=[],
        images=[],
        text_times=[],
        texts=[],
    )
    d.update(kw)
    return PatientRecord(**d)


# --- acceptance verdicts ------------------------------------------------------

VERDICTS: dict = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    VERDICTS[criterion] = (passed, detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}", flush=True)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(VERDICTS):
        passed, detail = VERDICTS[c]
        terminalreporter.write_line(f"criterion {c}: {'PASS' if passed else 'FAIL'}  {detail}")
