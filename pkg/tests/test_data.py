import json
from dataclasses import replace

import numpy as np
import pytest

from gebd_ssl.data import (
    AnnotationSet, DataError, ObjectSpec, SyntheticSceneSpec, VideoFrames, annotations_to_dict,
    generate_corpus, generate_synthetic_video, load_annotations, load_corpus, parse_annotations,
    random_scene_spec, read_frame_dir, render_scene, save_annotations, write_video_frames,
)


def scene(events, seed=0):
    obj = ObjectSpec("disc", (200, 180, 160), 5.0, (16.0, 16.0), 6.0, 0.0, 0.25)
    return SyntheticSceneSpec(length=60, fps=10.0, size=32, seed=seed, background_seed=seed,
                              objects=[obj], events=events)


def test_single_shot_cut_annotation():
    _, ann = generate_synthetic_video(scene([(30, "shot_cut")]))
    assert ann.annotators == [[3.0]] and ann.duration == 6.0


def test_render_is_deterministic():
    s = scene([(20, "color_change"), (40, "speed_change")])
    np.testing.assert_array_equal(render_scene(s), render_scene(s))


@pytest.mark.parametrize("kind", ["direction_change", "speed_change"])
def test_motion_event_invisible_at_boundary_frame(kind):
    with_event = render_scene(scene([(30, kind)])).astype(int)
    without = render_scene(scene([])).astype(int)
    np.testing.assert_array_equal(with_event[:31], without[:31])
    assert np.abs(with_event[35] - without[35]).sum() > 0


@pytest.mark.parametrize("kind", ["shot_cut", "color_change"])
def test_appearance_event_visible_at_boundary_frame(kind):
    with_event = render_scene(scene([(30, kind)])).astype(int)
    without = render_scene(scene([])).astype(int)
    np.testing.assert_array_equal(with_event[:30], without[:30])
    assert np.abs(with_event[30] - without[30]).sum() > 0


def test_random_specs_tag_every_boundary_correctly():
    for seed in range(20):
        spec = random_scene_spec(seed)
        kinds = spec.boundary_kinds()
        assert sum(k["kind"] == "motion" for k in kinds) >= len(kinds) / 2
        base = render_scene(replace(spec, events=[])).astype(int)
        for f, k in spec.events:
            alone = render_scene(replace(spec, events=[(f, k)])).astype(int)
            diff = np.abs(alone[f] - base[f]).sum()
            assert (diff == 0) if k in ("direction_change", "speed_change") else (diff > 0)


def test_spec_validation():
    with pytest.raises(DataError, match="overlapping"):
        scene([(10, "shot_cut"), (10, "color_change")]).validate()
    with pytest.raises(DataError):
        scene([(20, "shot_cut"), (10, "color_change")]).validate()
    with pytest.raises(DataError):
        scene([(0, "shot_cut")]).validate()
    with pytest.raises(DataError):
        scene([(5, "explosion")]).validate()


def test_annotation_round_trip(tmp_path):
    anns = {"a": AnnotationSet("a", 10.0, 25.0, [[1.0, 2.5], [3.0]]),
            "b": AnnotationSet("b", 4.0, 30.0, [[]])}
    save_annotations(anns, tmp_path / "a.json")
    back = load_annotations(tmp_path / "a.json")
    assert annotations_to_dict(back) == annotations_to_dict(anns)
    assert len(back) == 2


@pytest.mark.parametrize("mutate, field", [
    (lambda v: v.update(annotators=[[1.0, 20.0]]), "annotators[0][1]"),
    (lambda v: v.update(annotators=[[3.0, 1.0]]), "annotators[0][1]"),
    (lambda v: v.pop("fps"), "fps"),
    (lambda v: v.update(duration_sec="ten"), "duration_sec"),
])
def test_annotation_errors_name_the_field(mutate, field):
    v = {"video_id": "x", "duration_sec": 10.0, "fps": 10.0, "annotators": [[1.0, 2.0]]}
    mutate(v)
    with pytest.raises(DataError, match=field.replace("[", r"\[").replace("]", r"\]")):
        parse_annotations({"videos": [v]})


@pytest.mark.parametrize("storage", ["png", "raw"])
def test_frame_storage_round_trip(tmp_path, storage):
    video, _ = generate_synthetic_video(scene([(30, "shot_cut")]), "vid")
    write_video_frames(video, tmp_path / "v", storage)
    back = read_frame_dir(tmp_path / "v", "vid", 10.0)
    np.testing.assert_array_equal(back.frames, video.frames)
    assert back.num_frames == 60 and back.duration == 6.0


def test_missing_frame_cites_index(tmp_path):
    video, _ = generate_synthetic_video(scene([]), "vid")
    write_video_frames(video, tmp_path / "v")
    (tmp_path / "v" / "000007.png").unlink()
    with pytest.raises(DataError, match="frame 7"):
        read_frame_dir(tmp_path / "v", "vid", 10.0)


def test_video_frames_validation():
    with pytest.raises(DataError):
        VideoFrames("x", np.zeros((0, 3, 4, 4), np.uint8), 10.0)
    with pytest.raises(DataError):
        VideoFrames("x", np.zeros((2, 3, 4, 4), np.uint8), 0.0)


def test_corpus_generation_and_loading(tmp_path):
    manifest = generate_corpus(tmp_path, 5, seed=2)
    corpus = load_corpus(manifest)
    assert len(corpus.videos) == 5 and len(corpus.split("val")) == 1
    for vid, v in corpus.videos.items():
        assert v.frames.shape == (120, 3, 32, 32)
        assert corpus.annotations[vid].annotators[0] == [e["frame"] / 10.0 for e in corpus.entry(vid).events]
    again = load_corpus(generate_corpus(tmp_path / "again", 5, seed=2))
    for vid in corpus.videos:
        np.testing.assert_array_equal(again.videos[vid].frames, corpus.videos[vid].frames)


def test_corpus_motion_share(tmp_path):
    corpus = load_corpus(generate_corpus(tmp_path, 20, seed=0), load_frames=False)
    kinds = [e["kind"] for entry in corpus.entries for e in entry.events]
    assert kinds.count("motion") / len(kinds) >= 0.4


def test_corpus_load_is_atomic(tmp_path):
    manifest = generate_corpus(tmp_path, 3, seed=0)
    (tmp_path / "videos" / "synth_0002" / "000005.png").write_bytes(b"not a png")
    with pytest.raises(DataError, match="frame 5"):
        load_corpus(manifest)


def test_manifest_rejects_duplicate_ids(tmp_path):
    manifest = generate_corpus(tmp_path, 2, seed=0)
    doc = json.loads(manifest.read_text())
    doc["videos"][1]["video_id"] = doc["videos"][0]["video_id"]
    manifest.write_text(json.dumps(doc))
    with pytest.raises(DataError, match="duplicate"):
        load_corpus(manifest)
