"""Shared fixtures: the small trained models used by the acceptance and pipeline tests.

Training runs are session-scoped so each model is fit at most once per
pytest invocation, and only when a test asks for it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import pytest
import torch

from still2video.data import FlowClip, SyntheticClipSpec, make_synthetic
from still2video.pipeline import TrainConfig, TrainResult, train_flow2rgb, train_flow_vae

torch.set_num_threads(1)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


# ------------------------------------------------------------ overfit models

OVERFIT_SPEC = SyntheticClipSpec(kind="translate", layer="sprite", n_sprites=3, velocity=(2.0, 0.0), seed=0)
ROTATION_SPEC = SyntheticClipSpec(kind="rotate", layer="sprite", n_sprites=1, angular_velocity=0.12, seed=5)


@dataclass
class TimedRun:
    result: TrainResult
    seconds: float


def _timed(fn, *args) -> TimedRun:
    t0 = time.perf_counter()
    result = fn(*args)
    return TimedRun(result, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def overfit_clip():
    return make_synthetic(OVERFIT_SPEC)


@pytest.fixture(scope="session")
def overfit_vae(overfit_clip, tmp_path_factory):
    cfg = TrainConfig(batch_size=1, max_steps=2000, target=0.01, seed=0, out_dir=str(tmp_path_factory.mktemp("overfit_vae")))
    return _timed(train_flow_vae, [FlowClip.from_synthetic(overfit_clip)], cfg)


@pytest.fixture(scope="session")
def overfit_generator(overfit_clip, tmp_path_factory):
    frames, flows = overfit_clip.clip.frames, overfit_clip.gt_flows
    triple = FlowClip(frames[:2], flows[:1])
    cfg = TrainConfig(batch_size=1, max_steps=2000, target=0.02, seed=0, out_dir=str(tmp_path_factory.mktemp("overfit_gen")))
    return _timed(train_flow2rgb, [triple], cfg)


@pytest.fixture(scope="session")
def rotation_clip():
    return make_synthetic(ROTATION_SPEC)


@pytest.fixture(scope="session")
def rotation_generator(rotation_clip, tmp_path_factory):
    cfg = TrainConfig(batch_size=4, max_steps=300, learning_rate=1e-3, seed=0, out_dir=str(tmp_path_factory.mktemp("rotation_gen")))
    return _timed(train_flow2rgb, [FlowClip.from_synthetic(rotation_clip)], cfg)


# ------------------------------------------------------------------ toy model


def jittered_translate(seed: int) -> SyntheticClipSpec:
    """Scene translation at roughly 2 px/frame to the right, velocity jittered per clip."""
    rng = np.random.default_rng(seed)
    velocity = (float(rng.uniform(1.5, 2.5)), float(rng.uniform(-0.5, 0.5)))
    return SyntheticClipSpec(kind="translate", seed=seed, velocity=velocity)


TOY_TRAIN_SEEDS = tuple(range(100, 108))
TOY_TEST_SEEDS = tuple(range(900, 905))


@dataclass
class ToyModel:
    vae: TimedRun
    generator: TimedRun
    test_clips: list


@pytest.fixture(scope="session")
def toy_model(tmp_path_factory):
    train = [FlowClip.from_synthetic(make_synthetic(jittered_translate(s))) for s in TOY_TRAIN_SEEDS]
    gen = _timed(
        train_flow2rgb,
        train,
        TrainConfig(batch_size=4, max_steps=60, learning_rate=1e-3, seed=0, out_dir=str(tmp_path_factory.mktemp("toy_gen"))),
    )
    vae = _timed(
        train_flow_vae,
        train,
        TrainConfig(batch_size=2, max_steps=150, learning_rate=3e-4, seed=0, out_dir=str(tmp_path_factory.mktemp("toy_vae"))),
    )
    return ToyModel(vae, gen, [make_synthetic(jittered_translate(s)) for s in TOY_TEST_SEEDS])


# ------------------------------------------------------- acceptance reporting

_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "passed": True, "seconds": 0.0, "ran": False, "detail": ""})
    if report.when in ("setup", "call"):
        # setup time includes any model training the criterion depends on
        entry["seconds"] += report.duration
    if report.when == "call":
        entry["ran"] = True
        entry["detail"] = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
    if report.failed:
        entry["passed"] = False
        entry["ran"] = True


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["passed"] and e["ran"] else ("FAIL" if e["ran"] else "SKIP")
        line = f"criterion {number}: {status}  {e['title']}  ({e['seconds']:.1f} s)"
        if e["detail"]:
            line += f"  [{e['detail']}]"
        terminalreporter.write_line(line)
