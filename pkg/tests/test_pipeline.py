import csv

import numpy as np
import pytest
import torch

import still2video.pipeline as pipeline
from still2video import ConfigurationError, InvalidInputError, ModelConfig, TrainingError
from still2video.core import backward_warp
from still2video.data import FlowClip, SyntheticClipSpec, make_synthetic
from still2video.flow2rgb import Flow2Rgb
from still2video.flow_vae import FlowVAE
from still2video.pipeline import (
    TrainConfig,
    baseline_copy,
    baseline_random_flow,
    predict_sequence,
    rollout_with_flows,
    train_flow2rgb,
    train_flow_vae,
)

SMALL = ModelConfig(steps=8, height=32, width=32, latent_dim=16, max_disp=5.0)


def _small_clip(seed=0, velocity=(1.0, 0.5)):
    spec = SyntheticClipSpec(height=32, width=32, velocity=velocity, max_disp=5.0, seed=seed)
    return FlowClip.from_synthetic(make_synthetic(spec))


def _cfg(**kw):
    base = dict(model=SMALL, learning_rate=1e-3, batch_size=2, max_steps=5, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            {"learning_rate": 0.0},
            {"batch_size": 0},
            {"max_steps": -1},
            {"kl_weight": -1.0},
            {"lam": -0.5},
            {"kl_warmup": 1.5},
            {"checkpoint_interval": -2},
            {"trunk": "resnet"},
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kw)

    def test_kl_warmup_ramp(self):
        cfg = TrainConfig(kl_weight=2.0, kl_warmup=0.5, max_steps=100)
        assert cfg.kl_weight_at(0) == 0.0
        assert cfg.kl_weight_at(25) == pytest.approx(1.0)
        assert cfg.kl_weight_at(80) == 2.0


class TestTrainFlowVae:
    def test_seeded_runs_identical(self):
        clip = _small_clip()
        a = train_flow_vae([clip], _cfg())
        b = train_flow_vae([clip], _cfg())
        assert a.history == b.history
        for pa, pb in zip(a.model.state_dict().values(), b.model.state_dict().values()):
            assert torch.equal(pa, pb)

    def test_zero_kl_weight_drops_kl_term(self):
        r = train_flow_vae([_small_clip()], _cfg(kl_weight=0.0, max_steps=3))
        for row in r.history:
            assert row["total"] == pytest.approx(row["recon"], abs=1e-7)
            assert row["kl"] >= 0

    def test_non_finite_loss_raises(self, monkeypatch):
        real = pipeline.loss_cvae

        def poisoned(*args, **kw):
            out = real(*args, **kw)
            return out._replace(total=out.total * float("nan"))

        monkeypatch.setattr(pipeline, "loss_cvae", poisoned)
        with pytest.raises(TrainingError, match="step 1"):
            train_flow_vae([_small_clip()], _cfg())

    def test_outputs_on_disk(self, tmp_path):
        r = train_flow_vae([_small_clip()], _cfg(max_steps=4, checkpoint_interval=2, out_dir=str(tmp_path)))
        assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == [
            "flow_vae.ckpt",
            "flow_vae_step000002.ckpt",
            "flow_vae_step000004.ckpt",
        ]
        with open(tmp_path / "train_flow_vae.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["step", "total", "recon", "kl"]
        assert [int(r["step"]) for r in rows] == [1, 2, 3, 4]
        assert r.checkpoint == tmp_path / "flow_vae.ckpt"

    def test_short_clip_rejected(self):
        clip = _small_clip()
        short = FlowClip(clip.frames[:4], clip.flows[:3])
        with pytest.raises(InvalidInputError):
            train_flow_vae([short], _cfg())

    def test_single_sample_batch_at_unit_bottleneck(self):
        with pytest.raises(ConfigurationError, match="batch_size"):
            train_flow_vae([_small_clip()], _cfg(batch_size=1))

    def test_resolution_mismatch(self):
        clip = FlowClip.from_synthetic(make_synthetic(SyntheticClipSpec(length=9)))
        with pytest.raises(ConfigurationError):
            train_flow_vae([clip], _cfg())


class TestTrainFlow2Rgb:
    def test_seeded_runs_identical(self):
        clip = _small_clip()
        a = train_flow2rgb([clip], _cfg(max_steps=3))
        b = train_flow2rgb([clip], _cfg(max_steps=3))
        assert a.history == b.history

    def test_log_columns(self, tmp_path):
        train_flow2rgb([_small_clip()], _cfg(max_steps=2, out_dir=str(tmp_path)))
        with open(tmp_path / "train_flow2rgb.csv") as fh:
            header = next(csv.reader(fh))
        assert header == ["step", "total", "pixel", "feature"]
        assert (tmp_path / "flow2rgb.ckpt").exists()

    def test_overfit_loss_trend(self, overfit_generator):
        # 10-step block means of the single-triple run never rise by more than 5%
        pixel = np.array([h["pixel"] for h in overfit_generator.result.history])
        blocks = pixel[: len(pixel) // 10 * 10].reshape(-1, 10).mean(axis=1)
        assert len(blocks) >= 2
        assert np.all(blocks[1:] <= blocks[:-1] * 1.05)
        assert blocks[-1] < blocks[0]


@pytest.fixture(scope="module")
def small_models():
    torch.manual_seed(0)
    gen = Flow2Rgb(SMALL, seed=1).eval()
    with torch.no_grad():
        gen.output.weight.normal_(0, 0.05, generator=torch.Generator().manual_seed(4))
    return FlowVAE(SMALL, seed=1).eval(), gen


class TestPredictSequence:
    def test_same_seed_identical(self, small_models):
        x0 = np.random.default_rng(0).random((32, 32, 3))
        a = predict_sequence(x0, 3, *small_models)
        b = predict_sequence(x0, 3, *small_models)
        assert np.array_equal(a.frames, b.frames) and np.array_equal(a.flows, b.flows)
        assert a.frames.shape == (8, 32, 32, 3) and a.flows.shape == (8, 32, 32, 2)

    def test_different_seeds_differ(self, small_models):
        x0 = np.random.default_rng(0).random((32, 32, 3))
        a = predict_sequence(x0, 1, *small_models)
        b = predict_sequence(x0, 2, *small_models)
        assert not np.array_equal(a.flows, b.flows)

    def test_flows_within_max_disp(self, small_models):
        x0 = np.random.default_rng(1).random((32, 32, 3))
        assert np.abs(predict_sequence(x0, 0, *small_models).flows).max() <= SMALL.max_disp

    def test_config_mismatch(self, small_models):
        other = Flow2Rgb(ModelConfig(steps=8, height=64, width=64, latent_dim=16))
        with pytest.raises(ConfigurationError):
            predict_sequence(np.zeros((32, 32, 3)), 0, small_models[0], other)

    def test_frame_resolution_mismatch(self, small_models):
        with pytest.raises(ConfigurationError):
            predict_sequence(np.zeros((16, 16, 3)), 0, *small_models)

    def test_checkpoint_paths(self, small_models, tmp_path):
        from still2video.checkpoint import save_checkpoint

        save_checkpoint(tmp_path / "v.ckpt", small_models[0])
        save_checkpoint(tmp_path / "g.ckpt", small_models[1])
        x0 = np.random.default_rng(2).random((32, 32, 3))
        a = predict_sequence(x0, 5, tmp_path / "v.ckpt", str(tmp_path / "g.ckpt"))
        b = predict_sequence(x0, 5, *small_models)
        assert np.array_equal(a.frames, b.frames)

    @pytest.mark.slow
    def test_full_configuration_lengths(self):
        cfg = ModelConfig.full()
        x0 = np.random.default_rng(3).random((128, 128, 3))
        r = predict_sequence(x0, 0, FlowVAE(cfg).eval(), Flow2Rgb(cfg).eval())
        assert r.flows.shape == (16, 128, 128, 2) and r.frames.shape == (16, 128, 128, 3)


class TestRollout:
    def test_zero_flows_warp_only(self):
        x0 = np.random.default_rng(0).random((16, 16, 3))
        frames = rollout_with_flows(x0, np.zeros((5, 16, 16, 2)), mode="warp_only")
        assert len(frames) == 5
        assert all(np.array_equal(f, x0) for f in frames)

    def test_translating_sprite_warp_only(self):
        s = make_synthetic(SyntheticClipSpec(kind="translate", layer="sprite", velocity=(1.0, 0.0), seed=2))
        frames = rollout_with_flows(s.clip.frames[0], s.gt_flows, mode="warp_only")
        assert len(frames) == s.spec.steps
        for t, f in enumerate(frames, 1):
            mask = s.interior[t]
            assert np.sqrt(np.mean((f - s.clip.frames[t])[mask] ** 2)) < 0.05

    def test_warp_only_is_iterated_warp(self):
        rng = np.random.default_rng(1)
        x0, flows = rng.random((8, 8, 3)), rng.uniform(-2, 2, (3, 8, 8, 2))
        expected = backward_warp(backward_warp(backward_warp(x0, flows[0]), flows[1]), flows[2])
        assert np.array_equal(rollout_with_flows(x0, flows, mode="warp_only")[-1], expected)

    def test_bad_mode(self):
        with pytest.raises(InvalidInputError):
            rollout_with_flows(np.zeros((8, 8, 3)), np.zeros((1, 8, 8, 2)), mode="blend")

    def test_generate_needs_generator(self):
        with pytest.raises(InvalidInputError):
            rollout_with_flows(np.zeros((8, 8, 3)), np.zeros((1, 8, 8, 2)))

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            rollout_with_flows(np.zeros((8, 8, 3)), np.zeros((2, 8, 4, 2)), mode="warp_only")


class TestBaselines:
    def test_copy(self):
        x0 = np.random.default_rng(0).random((8, 8, 3))
        out = baseline_copy(x0, 16)
        assert len(out) == 16 and all(np.array_equal(f, x0) for f in out)
        assert baseline_copy(x0, 1) == [x0]

    def test_copy_static_clip_zero_error(self):
        s = make_synthetic(SyntheticClipSpec(velocity=(0.0, 0.0), length=5))
        out = baseline_copy(s.clip.frames[0], 4)
        assert max(np.abs(a - b).max() for a, b in zip(out, s.clip.frames[1:])) == 0.0

    def test_copy_needs_positive_length(self):
        with pytest.raises(InvalidInputError):
            baseline_copy(np.zeros((8, 8, 3)), 0)

    def test_random_flow_seeded(self, small_models):
        x0 = np.random.default_rng(1).random((32, 32, 3))
        a = baseline_random_flow(x0, 3, seed=4, gen_ckpt=small_models[1])
        b = baseline_random_flow(x0, 3, seed=4, gen_ckpt=small_models[1])
        c = baseline_random_flow(x0, 3, seed=5, gen_ckpt=small_models[1])
        assert np.array_equal(a.frames, b.frames)
        assert not np.array_equal(a.flows, c.flows)

    def test_random_flow_statistics(self):
        cfg = ModelConfig.full()
        r = baseline_random_flow(np.full((128, 128, 3), 0.5), 16, seed=0, gen_ckpt=Flow2Rgb(cfg).eval())
        assert r.flows.shape == (16, 128, 128, 2)
        assert abs(r.flows.mean()) < 0.05
        assert r.flows.std() == pytest.approx(2.0, rel=0.01)

    @pytest.mark.parametrize("sigma", [0.0, -1.0])
    def test_random_flow_bad_sigma(self, sigma, small_models):
        with pytest.raises(InvalidInputError):
            baseline_random_flow(np.zeros((32, 32, 3)), 2, sigma=sigma, gen_ckpt=small_models[1])
