"""Synthetic corpus: analytic beat grids, phase-locked rendering, disk roundtrip."""

import numpy as np
import pytest

from beatdiff import audio
from beatdiff.dataset import (Clip, ClipSpec, beat_frame_grid, beat_times,
                              build_dataset, click_sample_indices, clip_audio,
                              clip_colors, frames_to_float, float_to_frames,
                              load_clips, load_manifest, make_caption,
                              manifest_digest, motion_phase, sample_clip_specs,
                              synth_audio, synth_video)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifest = build_dataset(3, 7, root)
    return root, manifest


def test_click_sample_indices_grid():
    assert click_sample_indices(120.0, 4.0).tolist() == [
        i * 8000 for i in range(8)]
    assert click_sample_indices(60.0, 4.0).tolist() == [0, 16000, 32000, 48000]
    # A click landing exactly at the end is excluded.
    assert click_sample_indices(60.0, 1.0).tolist() == [0]


def test_beat_times_counts():
    assert beat_times(60.0, 4.0).tolist() == [0.0, 1.0, 2.0, 3.0]
    t = beat_times(150.0, 4.0)
    assert len(t) == 10
    assert np.allclose(np.diff(t), 0.4)


def test_synth_audio_shape_and_peak():
    w = synth_audio(120.0, 4.0, motion_type="sway", seed=3)
    assert w.sample_rate == audio.SAMPLE_RATE
    assert len(w.samples) == 64000
    assert np.abs(w.samples).max() == pytest.approx(0.9, abs=1e-9)
    again = synth_audio(120.0, 4.0, motion_type="sway", seed=3)
    assert np.array_equal(w.samples, again.samples)


def test_clip_spec_validation():
    with pytest.raises(ValueError):
        ClipSpec("c", "tumble", 120.0)
    with pytest.raises(ValueError):
        ClipSpec("c", "bounce", 200.0)
    with pytest.raises(ValueError):
        ClipSpec("c", "bounce", 120.0, duration_s=1.7, fps=12.0)
    spec = ClipSpec("c", "bounce", 120.0)
    assert spec.frame_count == 48


def test_sample_clip_specs_ladder():
    specs = sample_clip_specs(6, 2)
    assert [s.clip_id for s in specs] == [f"clip{i:02d}" for i in range(6)]
    assert [s.bpm for s in specs] == [60.0, 90.0, 120.0, 150.0, 60.0, 90.0]
    assert [s.motion_type for s in specs] == [
        "bounce", "sway", "spin", "bounce", "sway", "spin"]
    assert len({s.seed for s in specs}) == 6
    with pytest.raises(ValueError):
        sample_clip_specs(0, 0)


def test_motion_phase():
    beats = np.array([0, 6, 12, 18])
    assert motion_phase(0, beats) == (0, 0.0)
    assert motion_phase(6, beats) == (1, 0.0)
    assert motion_phase(9, beats) == (1, 0.5)
    # Past the final beat the last interval keeps extrapolating.
    m, u = motion_phase(24, beats)
    assert m == 3 and u == pytest.approx(1.0)
    with pytest.raises(ValueError):
        motion_phase(0, np.array([0]))


def test_synth_video_shapes_and_range():
    spec = ClipSpec("c", "spin", 90.0, duration_s=2.0, fps=12.0, image_size=32, seed=5)
    frames, masks = synth_video(spec)
    assert frames.shape == (24, 32, 32, 3) and frames.dtype == np.uint8
    assert masks.shape == (24, 32, 32) and masks.dtype == np.float32
    assert masks.min() >= 0.0 and masks.max() <= 1.0
    assert masks.max() == 1.0  # sprite interior is fully covered


def test_beat_frames_render_identically():
    # The motion is beat-phase-locked: every beat frame shows the rest pose, so
    # bounce renders bitwise-identical frames on the whole beat grid.
    spec = ClipSpec("c", "bounce", 120.0, seed=9)
    frames, masks = synth_video(spec)
    beats = beat_frame_grid(spec)
    assert beats.tolist() == [0, 6, 12, 18, 24, 30, 36, 42]
    for b in beats[1:]:
        assert np.array_equal(frames[0], frames[b])
        assert np.array_equal(masks[0], masks[b])
    # Mid-interval frames differ from the rest pose.
    assert not np.array_equal(frames[0], frames[3])


def test_mask_matches_background_split():
    spec = ClipSpec("c", "sway", 90.0, duration_s=2.0, fps=12.0, image_size=48, seed=4)
    frames, masks = synth_video(spec)
    sprite, background = clip_colors(spec)
    outside = masks[5] == 0.0
    inside = masks[5] == 1.0
    assert outside.any() and inside.any()
    assert np.array_equal(frames[5][outside],
                          np.broadcast_to(background, (int(outside.sum()), 3)))
    assert np.array_equal(frames[5][inside],
                          np.broadcast_to(sprite, (int(inside.sum()), 3)))


def test_caption_mentions_motion_and_tempo():
    assert "bounce" in make_caption(ClipSpec("c", "bounce", 60.0))
    assert "slow" in make_caption(ClipSpec("c", "bounce", 60.0))
    assert "quick" in make_caption(ClipSpec("c", "spin", 150.0))
    assert "steady" in make_caption(ClipSpec("c", "sway", 120.0))


def test_pixel_range_roundtrip():
    rng = np.random.default_rng(0)
    pix = rng.integers(0, 256, size=(5, 4, 4, 3), dtype=np.uint8)
    f = frames_to_float(pix)
    assert f.dtype == np.float32
    assert f.min() >= -1.0 and f.max() <= 1.0
    assert np.array_equal(float_to_frames(f), pix)
    assert float_to_frames(np.array([[-3.0, 3.0]])).tolist() == [[0, 255]]


def test_build_dataset_files_and_manifest(corpus):
    root, manifest = corpus
    assert len(manifest["entries"]) == 3
    for entry in manifest["entries"]:
        clip_dir = root / entry["clip_id"]
        assert (clip_dir / "audio.wav").exists()
        frames = sorted((clip_dir / "frames").glob("frame_*.png"))
        masks = sorted((clip_dir / "masks").glob("mask_*.png"))
        assert len(frames) == entry["frame_count"] == 48
        assert len(masks) == 48
    assert load_manifest(root)["dataset_seed"] == 7


def test_build_dataset_is_byte_deterministic(corpus, tmp_path):
    root, _ = corpus
    build_dataset(3, 7, tmp_path)
    assert manifest_digest(tmp_path) == manifest_digest(root)
    a = (tmp_path / "clip01" / "audio.wav").read_bytes()
    b = (root / "clip01" / "audio.wav").read_bytes()
    assert a == b


def test_load_clips_roundtrip(corpus):
    root, manifest = corpus
    clips = load_clips(root)
    assert len(clips) == 3
    specs = sample_clip_specs(3, 7)
    for clip, spec, entry in zip(clips, specs, manifest["entries"]):
        frames, masks = synth_video(spec)
        assert np.array_equal(clip.frames, frames)   # PNG is lossless
        assert np.abs(clip.masks - masks).max() <= 0.5 / 255.0 + 1e-6
        assert clip.caption == entry["caption"]
        # Tracked beats reproduce the analytic grid exactly.
        assert clip.beat_frames.tolist() == beat_frame_grid(spec).tolist()


def test_load_manifest_rejects_unknown_version(corpus, tmp_path):
    root, _ = corpus
    text = (root / "manifest.json").read_text()
    bad = tmp_path / "manifest.json"
    bad.write_text(text.replace('"format_version": 1', '"format_version": 99'))
    with pytest.raises(ValueError):
        load_manifest(tmp_path)


def test_clip_validation():
    w = audio.Waveform(np.zeros(16000), 16000)
    frames = np.zeros((4, 8, 8, 3), dtype=np.uint8)
    masks = np.zeros((4, 8, 8), dtype=np.float32)
    bits = np.zeros(4, dtype=np.uint8)
    clip = Clip(frames, masks, w, "c", 4.0, bits)
    assert clip.frame_count == 4
    with pytest.raises(ValueError):
        Clip(frames[:1], masks[:1], w, "c", 4.0, bits[:1])
    with pytest.raises(ValueError):
        Clip(frames, masks[:3], w, "c", 4.0, bits)
    with pytest.raises(ValueError):
        Clip(frames, masks, audio.Waveform(np.zeros(100), 16000), "c", 4.0, bits)
