import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from still2video import FlowFormatError, IngestionError, InvalidInputError
from still2video.core import backward_warp
from still2video.data import (
    CoarseToFineEstimator,
    DatasetSpec,
    FlowClip,
    GroundTruthEstimator,
    ImportedFlowEstimator,
    SyntheticClipSpec,
    estimate_backward_flow,
    ingest_video,
    load_dataset,
    make_synthetic,
    read_flo,
    split_videos,
    write_flo,
    write_video,
)
from still2video.errors import EstimationError


class TestFlo:
    def test_hand_built_bytes(self, tmp_path):
        payload = b"PIEH" + struct.pack("<ii", 2, 1) + struct.pack("<4f", 1.0, 0.0, -1.0, 0.0)
        p = tmp_path / "hand.flo"
        p.write_bytes(payload)
        f = read_flo(p)
        assert f.shape == (1, 2, 2) and f.dtype == np.float32
        assert f[0, :, 0].tolist() == [1.0, -1.0]
        assert f[0, :, 1].tolist() == [0.0, 0.0]

    def test_writer_emits_layout(self, tmp_path):
        flow = np.array([[[1.0, 0.0], [-1.0, 0.0]]], dtype=np.float32)
        write_flo(flow, tmp_path / "w.flo")
        expected = b"PIEH" + struct.pack("<ii", 2, 1) + struct.pack("<4f", 1.0, 0.0, -1.0, 0.0)
        assert (tmp_path / "w.flo").read_bytes() == expected

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 7), st.integers(1, 7), st.just(2)), elements=st.floats(-1e6, 1e6, width=32)))
    def test_round_trip_bitwise(self, tmp_path_factory, flow):
        p = tmp_path_factory.mktemp("flo") / "f.flo"
        write_flo(flow, p)
        assert read_flo(p).tobytes() == flow.tobytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.flo"
        p.write_bytes(b"XXXX" + struct.pack("<ii", 1, 1) + struct.pack("<2f", 0, 0))
        with pytest.raises(FlowFormatError):
            read_flo(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "short.flo"
        p.write_bytes(b"PIEH" + struct.pack("<ii", 4, 4) + b"\x00" * 12)
        with pytest.raises(FlowFormatError):
            read_flo(p)


class TestSynthetic:
    def test_translate_flows_constant(self):
        s = make_synthetic(SyntheticClipSpec(kind="translate", velocity=(2.0, 0.0), length=5))
        assert s.gt_flows.shape == (4, 64, 64, 2)
        assert np.all(s.gt_flows[..., 0] == -2.0) and np.all(s.gt_flows[..., 1] == 0.0)

    def test_static_clip(self):
        s = make_synthetic(SyntheticClipSpec(kind="translate", velocity=(0.0, 0.0), length=4))
        assert np.all(s.gt_flows == 0.0)
        for f in s.clip.frames[1:]:
            assert np.array_equal(f, s.clip.frames[0])

    def test_rotation_center_is_fixed(self):
        s = make_synthetic(SyntheticClipSpec(kind="rotate", angular_velocity=0.1))
        cx, cy = s.spec.resolved_center
        assert np.all(np.linalg.norm(s.gt_flows[:, int(cy), int(cx)], axis=-1) == 0.0)

    def test_seeded_rendering(self):
        a = make_synthetic(SyntheticClipSpec(seed=4, layer="sprite"))
        b = make_synthetic(SyntheticClipSpec(seed=4, layer="sprite"))
        assert np.array_equal(a.clip.frames, b.clip.frames)

    def test_excess_displacement_rejected(self):
        with pytest.raises(InvalidInputError):
            make_synthetic(SyntheticClipSpec(velocity=(9.0, 0.0)))

    def test_unknown_kind(self):
        with pytest.raises(InvalidInputError):
            make_synthetic(SyntheticClipSpec(kind="zoom"))

    @pytest.mark.parametrize(
        "spec",
        [
            SyntheticClipSpec(kind="translate", layer="sprite", velocity=(2.0, 1.0)),
            SyntheticClipSpec(kind="rotate", layer="sprite", angular_velocity=0.12, n_sprites=1, seed=5),
            SyntheticClipSpec(kind="sine_warp", layer="scene"),
            SyntheticClipSpec(kind="translate", layer="scene", velocity=(1.5, -0.5)),
        ],
        ids=["sprite-translate", "sprite-rotate", "scene-sine", "scene-translate"],
    )
    def test_warp_consistency(self, spec):
        s = make_synthetic(spec)
        frames = s.clip.frames
        for t in range(spec.steps):
            mask = s.interior[t + 1]
            assert mask.sum() > 0
            err = backward_warp(frames[t], s.gt_flows[t]) - frames[t + 1]
            assert np.sqrt(np.mean(err[mask] ** 2)) < 0.02

    def test_frames_in_unit_range(self):
        s = make_synthetic(SyntheticClipSpec(kind="sine_warp", layer="sprite"))
        assert s.clip.frames.min() >= 0 and s.clip.frames.max() <= 1


class TestEstimators:
    def test_identical_frames_give_zero_flow(self):
        s = make_synthetic(SyntheticClipSpec(velocity=(0.0, 0.0)))
        f = estimate_backward_flow(s.clip.frames[0], s.clip.frames[0], CoarseToFineEstimator())
        assert np.abs(f).max() <= 0.05

    def test_sprite_translation_accuracy(self):
        s = make_synthetic(SyntheticClipSpec(kind="translate", layer="sprite", velocity=(2.0, 0.0), seed=1))
        f = estimate_backward_flow(s.clip.frames[0], s.clip.frames[1], CoarseToFineEstimator())
        mask = s.interior[1]
        err = np.linalg.norm(f[mask] - np.array([-2.0, 0.0]), axis=-1)
        assert np.median(err) <= 0.25

    def test_scene_rotation_accuracy(self):
        s = make_synthetic(SyntheticClipSpec(kind="rotate", angular_velocity=0.05))
        f = estimate_backward_flow(s.clip.frames[0], s.clip.frames[1], CoarseToFineEstimator())
        err = np.linalg.norm(f - s.gt_flows[0], axis=-1)[8:-8, 8:-8]
        assert np.median(err) <= 0.25

    def test_imported_passthrough(self, tmp_path):
        flow = np.random.default_rng(0).normal(size=(8, 8, 2)).astype(np.float32)
        write_flo(flow, tmp_path / "00000.flo")
        est = ImportedFlowEstimator.from_directory(tmp_path)
        out = estimate_backward_flow(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)), est)
        assert np.array_equal(out, flow)

    def test_ground_truth_passthrough_and_errors(self):
        flows = np.zeros((2, 4, 4, 2))
        est = GroundTruthEstimator(flows)
        assert np.array_equal(est(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), step=1), flows[1])
        with pytest.raises(EstimationError):
            est(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), step=2)

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            estimate_backward_flow(np.zeros((8, 8, 3)), np.zeros((8, 4, 3)), CoarseToFineEstimator())


def _png_dir(path, n, size=(40, 30), seed=0):
    path.mkdir(parents=True)
    rng = np.random.default_rng(seed)
    for i in range(n):
        arr = (rng.random((size[1], size[0], 3)) * 255).astype(np.uint8)
        Image.fromarray(arr).save(path / f"{i:05d}.png")
    return path


class TestIngest:
    def test_count_and_resize(self, tmp_path):
        d = _png_dir(tmp_path / "v", 17, size=(320, 240))
        clip = ingest_video(d, DatasetSpec(root=str(tmp_path), height=128, width=128))
        assert clip.frames.shape == (17, 128, 128, 3)
        assert clip.frames.min() >= 0 and clip.frames.max() <= 1

    def test_same_size_preserves_pixels(self, tmp_path):
        d = _png_dir(tmp_path / "v", 2, size=(32, 32))
        clip = ingest_video(d, DatasetSpec(root=str(tmp_path), height=32, width=32))
        raw = np.asarray(Image.open(d / "00000.png"), dtype=np.float64) / 255
        assert np.abs(clip.frames[0] - raw).max() <= 1 / 255

    def test_numeric_order(self, tmp_path):
        d = tmp_path / "v"
        d.mkdir()
        for i in (10, 2, 1):
            Image.fromarray(np.full((4, 4, 3), i, np.uint8)).save(d / f"frame{i}.png")
        clip = ingest_video(d, DatasetSpec(root=str(tmp_path), height=4, width=4))
        assert [round(f[0, 0, 0] * 255) for f in clip.frames] == [1, 2, 10]

    def test_empty_directory(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(IngestionError):
            ingest_video(tmp_path / "empty", DatasetSpec(root=str(tmp_path)))

    def test_corrupt_file_named(self, tmp_path):
        d = _png_dir(tmp_path / "v", 2)
        (d / "00002.png").write_bytes(b"not a png")
        with pytest.raises(IngestionError, match="00002.png"):
            ingest_video(d, DatasetSpec(root=str(tmp_path), height=32, width=32))

    def test_ratio_split_deterministic(self, tmp_path):
        for i in range(10):
            _png_dir(tmp_path / f"video{i:02d}", 1, seed=i)
        spec = DatasetSpec(root=str(tmp_path), split=0.8, seed=3)
        train, test = split_videos(spec)
        assert len(train) == 8 and len(test) == 2
        assert not set(train) & set(test)
        assert split_videos(spec) == (train, test)

    def test_subject_range_split(self, tmp_path):
        for p in (1, 16, 17, 25):
            _png_dir(tmp_path / f"person{p:02d}_walking", 1)
        train, test = split_videos(DatasetSpec(root=str(tmp_path), split={"train": (1, 16), "test": (17, 25)}))
        assert [v.name[:8] for v in train] == ["person01", "person16"]
        assert [v.name[:8] for v in test] == ["person17", "person25"]

    def test_load_dataset_prefers_stored_flows(self, tmp_path):
        s = make_synthetic(SyntheticClipSpec(length=4))
        write_video(tmp_path / "clip", s.clip.frames, s.gt_flows)
        (clip,) = load_dataset([tmp_path / "clip"], DatasetSpec(root=str(tmp_path), height=64, width=64))
        assert np.array_equal(clip.flows, s.gt_flows.astype(np.float32))
        assert np.abs(clip.frames - s.clip.frames).max() <= 0.5 / 255 + 1e-12

    def test_load_dataset_rescales_flows(self, tmp_path):
        s = make_synthetic(SyntheticClipSpec(length=3))
        write_video(tmp_path / "clip", s.clip.frames, s.gt_flows)
        (clip,) = load_dataset([tmp_path / "clip"], DatasetSpec(root=str(tmp_path), height=32, width=32))
        np.testing.assert_allclose(clip.flows[..., 0], -1.0, atol=1e-6)

    def test_flow_clip_length_check(self):
        with pytest.raises(InvalidInputError):
            FlowClip(np.zeros((3, 4, 4, 3)), np.zeros((3, 4, 4, 2)))
