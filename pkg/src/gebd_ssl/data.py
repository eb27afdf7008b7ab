"""Corpus plumbing: synthetic videos with known boundaries, annotation files, frame storage.

A synthetic scene is one object orbiting a point over a static textured
background. Four event kinds change the scene at a given frame:

* ``shot_cut`` - new background, object and orbit (appearance)
* ``color_change`` - object recoloured (appearance)
* ``direction_change`` - orbit reverses (motion only)
* ``speed_change`` - angular speed scaled up or down (motion only)

Motion-only events take effect on the step *after* the event frame, so the
event frame itself renders exactly as it would without the event.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

EVENT_TYPES = ("shot_cut", "direction_change", "color_change", "speed_change")
MOTION_EVENTS = frozenset({"direction_change", "speed_change"})


class DataError(ValueError):
    pass


@dataclass
class VideoFrames:
    video_id: str
    frames: np.ndarray  # (T, 3, H, W) uint8
    fps: float

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise DataError(f"{self.video_id}: frames must be (T, 3, H, W), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise DataError(f"{self.video_id}: empty video")
        if self.fps <= 0:
            raise DataError(f"{self.video_id}: fps must be positive")

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def duration(self) -> float:
        return self.num_frames / self.fps


@dataclass
class AnnotationSet:
    video_id: str
    duration: float
    fps: float
    annotators: list[list[float]]

    def __post_init__(self):
        validate_annotation(self)


def validate_annotation(ann: AnnotationSet, where: str | None = None):
    where = where or ann.video_id
    if not (ann.duration > 0):
        raise DataError(f"{where}.duration_sec: must be positive, got {ann.duration}")
    if not (ann.fps > 0):
        raise DataError(f"{where}.fps: must be positive, got {ann.fps}")
    if len(ann.annotators) < 1:
        raise DataError(f"{where}.annotators: at least one annotator required")
    for k, stamps in enumerate(ann.annotators):
        for i, t in enumerate(stamps):
            if not (0.0 <= t <= ann.duration):
                raise DataError(f"{where}.annotators[{k}][{i}]: timestamp {t} outside [0, {ann.duration}]")
            if i and t <= stamps[i - 1]:
                raise DataError(f"{where}.annotators[{k}][{i}]: timestamps must be strictly ascending")


# ---------------------------------------------------------------- synthetic

@dataclass
class ObjectSpec:
    shape: str  # "disc" | "square"
    color: tuple[int, int, int]
    size: float  # half-width in pixels
    center: tuple[float, float]  # orbit centre (x, y)
    orbit_radius: float
    phase: float
    angular_speed: float  # radians per frame, signed


@dataclass
class SyntheticSceneSpec:
    length: int = 120
    fps: float = 10.0
    size: int = 32
    seed: int = 0
    background_seed: int = 0
    objects: list[ObjectSpec] = field(default_factory=list)
    events: list[tuple[int, str]] = field(default_factory=list)
    noise: float = 3.0

    def validate(self):
        if self.length < 1 or self.fps <= 0 or self.size < 8:
            raise DataError("invalid scene dimensions")
        prev = None
        for frame, kind in self.events:
            if kind not in EVENT_TYPES:
                raise DataError(f"unknown event type {kind!r}")
            if not 0 < frame < self.length:
                raise DataError(f"event frame {frame} outside (0, {self.length})")
            if prev is not None and frame == prev:
                raise DataError(f"overlapping events at frame {frame}")
            if prev is not None and frame < prev:
                raise DataError(f"event frames must ascend ({prev} then {frame})")
            prev = frame

    def boundary_kinds(self) -> list[dict]:
        return [{"frame": f, "type": k, "kind": "motion" if k in MOTION_EVENTS else "appearance"}
                for f, k in self.events]


def _random_object(rng: np.random.Generator, size: int) -> ObjectSpec:
    half = rng.uniform(0.14, 0.19) * size
    orbit = rng.uniform(0.16, 0.24) * size
    margin = half + orbit + 1
    cx = rng.uniform(margin, size - margin)
    cy = rng.uniform(margin, size - margin)
    linear = rng.uniform(1.0, 1.8) * size / 32
    omega = linear / orbit * rng.choice([-1.0, 1.0])
    color = tuple(int(c) for c in rng.integers(150, 256, size=3))
    return ObjectSpec(shape=str(rng.choice(["disc", "square"])), color=color, size=float(half),
                      center=(float(cx), float(cy)), orbit_radius=float(orbit),
                      phase=float(rng.uniform(0, 2 * math.pi)), angular_speed=float(omega))


def random_scene_spec(seed: int, length: int = 120, fps: float = 10.0, size: int = 32,
                      n_events: tuple[int, int] = (2, 4), min_gap: int = 20,
                      margin: int = 12) -> SyntheticSceneSpec:
    """Draw a scene with ``n_events`` boundaries, at least half of them motion-only."""
    rng = np.random.default_rng([seed, 7])
    n = int(rng.integers(n_events[0], n_events[1] + 1))
    for _ in range(1000):
        frames = np.sort(rng.choice(np.arange(margin, length - margin), size=n, replace=False))
        if n < 2 or np.min(np.diff(frames)) >= min_gap:
            break
    else:
        raise DataError("could not place events; video too short for the requested spacing")
    n_motion = math.ceil(n / 2)
    kinds = ["motion"] * n_motion + ["appearance"] * (n - n_motion)
    rng.shuffle(kinds)
    events = []
    for f, kind in zip(frames, kinds):
        pool = ("direction_change", "speed_change") if kind == "motion" else ("shot_cut", "color_change")
        events.append((int(f), str(rng.choice(pool))))
    return SyntheticSceneSpec(length=length, fps=fps, size=size, seed=seed,
                              background_seed=int(rng.integers(2**31)),
                              objects=[_random_object(rng, size)], events=events)


def _background(seed: int, size: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 11])
    base = rng.uniform(20, 110, size=3)
    coarse = rng.uniform(-25, 25, size=(3, 5, 5))
    # separable bilinear upsampling of a coarse grid
    xs = np.linspace(0, 4, size)
    i0 = np.clip(np.floor(xs).astype(int), 0, 3)
    w = xs - i0
    m = np.zeros((size, 5))
    m[np.arange(size), i0] = 1 - w
    m[np.arange(size), i0 + 1] += w
    tex = np.einsum("ya,cab,xb->cyx", m, coarse, m)
    return base[:, None, None] + tex


def _coverage(obj: ObjectSpec, pos, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - pos[0], yy - pos[1]
    if obj.shape == "disc":
        dist = np.hypot(dx, dy)
    else:
        dist = np.maximum(np.abs(dx), np.abs(dy))
    return np.clip(obj.size + 0.5 - dist, 0.0, 1.0)


def _object_position(obj: ObjectSpec, angle: float):
    return (obj.center[0] + obj.orbit_radius * math.cos(angle),
            obj.center[1] + obj.orbit_radius * math.sin(angle))


def render_scene(spec: SyntheticSceneSpec, with_footprint: bool = False):
    """Render ``spec`` to a (T, 3, S, S) uint8 array.

    With ``with_footprint`` also returns the (T, S, S) coverage of the moving
    object in [0, 1].
    """
    spec.validate()
    S = spec.size
    events = dict(spec.events)
    background = _background(spec.background_seed, S)
    objects = [ObjectSpec(**asdict(o)) for o in spec.objects]
    angles = [o.phase for o in objects]
    noise_rng = np.random.default_rng([spec.seed, 13])
    out = np.empty((spec.length, 3, S, S), dtype=np.uint8)
    foot = np.zeros((spec.length, S, S)) if with_footprint else None
    n_cut = n_color = n_speed = 0
    for t in range(spec.length):
        kind = events.get(t)
        if kind == "shot_cut":
            rng = np.random.default_rng([spec.seed, 100 + n_cut])
            n_cut += 1
            background = _background(int(rng.integers(2**31)), S)
            objects = [_random_object(rng, S) for _ in objects]
            angles = [o.phase for o in objects]
        elif kind == "color_change":
            rng = np.random.default_rng([spec.seed, 200 + n_color])
            n_color += 1
            for o in objects:
                old = np.array(o.color, dtype=float)
                for _ in range(100):
                    new = rng.integers(150, 256, size=3)
                    if np.abs(new - old).max() >= 60:
                        break
                o.color = tuple(int(c) for c in new)
        img = background.copy()
        for o, a in zip(objects, angles):
            cov = _coverage(o, _object_position(o, a), S)
            img = img * (1 - cov) + np.asarray(o.color, dtype=float)[:, None, None] * cov
            if foot is not None:
                foot[t] = np.maximum(foot[t], cov)
        img = img + noise_rng.uniform(-spec.noise, spec.noise, size=img.shape)
        out[t] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        # motion events alter the step leaving frame t
        if kind == "direction_change":
            for o in objects:
                o.angular_speed = -o.angular_speed
        elif kind == "speed_change":
            rng = np.random.default_rng([spec.seed, 300 + n_speed])
            n_speed += 1
            for o in objects:
                linear = abs(o.angular_speed) * o.orbit_radius
                factor = 2.5 if linear < 1.4 * S / 32 else 1 / 2.5
                factor *= rng.uniform(0.9, 1.1)
                o.angular_speed *= factor
        angles = [a + o.angular_speed for o, a in zip(objects, angles)]
    if with_footprint:
        return out, foot
    return out


def generate_synthetic_video(spec: SyntheticSceneSpec, video_id: str | None = None):
    """Render a scene and its single-annotator ground truth (event frame / fps)."""
    video_id = video_id or f"synth_{spec.seed:06d}"
    frames = render_scene(spec)
    video = VideoFrames(video_id, frames, spec.fps)
    stamps = [round(f / spec.fps, 6) for f, _ in spec.events]
    ann = AnnotationSet(video_id, video.duration, spec.fps, [stamps])
    return video, ann


# ---------------------------------------------------------------- annotation files

def load_annotations(path) -> dict[str, AnnotationSet]:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not valid JSON ({exc})") from exc
    return parse_annotations(doc)


def parse_annotations(doc) -> dict[str, AnnotationSet]:
    if not isinstance(doc, dict) or not isinstance(doc.get("videos"), list):
        raise DataError("videos: expected a list under key 'videos'")
    out = {}
    for i, v in enumerate(doc["videos"]):
        where = f"videos[{i}]"
        if not isinstance(v, dict):
            raise DataError(f"{where}: expected an object")
        for key, typ in (("video_id", str), ("duration_sec", (int, float)), ("fps", (int, float)),
                         ("annotators", list)):
            if key not in v:
                raise DataError(f"{where}.{key}: missing")
            if not isinstance(v[key], typ) or isinstance(v[key], bool):
                raise DataError(f"{where}.{key}: wrong type {type(v[key]).__name__}")
        for k, a in enumerate(v["annotators"]):
            if not isinstance(a, list) or not all(isinstance(t, (int, float)) and not isinstance(t, bool) for t in a):
                raise DataError(f"{where}.annotators[{k}]: expected a list of numbers")
        if v["video_id"] in out:
            raise DataError(f"{where}.video_id: duplicate {v['video_id']!r}")
        ann = AnnotationSet.__new__(AnnotationSet)
        ann.video_id = v["video_id"]
        ann.duration = float(v["duration_sec"])
        ann.fps = float(v["fps"])
        ann.annotators = [[float(t) for t in a] for a in v["annotators"]]
        validate_annotation(ann, where)
        out[ann.video_id] = ann
    return out


def annotations_to_dict(annotations) -> dict:
    return {"videos": [{"video_id": a.video_id, "duration_sec": a.duration, "fps": a.fps,
                        "annotators": [list(x) for x in a.annotators]}
                       for a in annotations.values()]}


def save_annotations(annotations: dict[str, AnnotationSet], path):
    with open(path, "w") as fh:
        json.dump(annotations_to_dict(annotations), fh, indent=1)


# ---------------------------------------------------------------- frame storage

def write_video_frames(video: VideoFrames, directory, storage: str = "png"):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    T, _, H, W = video.frames.shape
    if storage == "png":
        for i, frame in enumerate(video.frames):
            Image.fromarray(np.ascontiguousarray(frame.transpose(1, 2, 0))).save(d / f"{i:06d}.png")
    elif storage == "raw":
        video.frames.tofile(d / "frames.u8")
    else:
        raise DataError(f"unknown frame storage {storage!r}")
    meta = {"video_id": video.video_id, "fps": video.fps, "num_frames": T,
            "height": H, "width": W, "storage": storage}
    (d / "meta.json").write_text(json.dumps(meta, indent=1))


def read_frame_dir(directory, video_id: str, fps: float) -> VideoFrames:
    d = Path(directory)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise DataError(f"{video_id}: missing {meta_path}")
    meta = json.loads(meta_path.read_text())
    T, H, W = meta["num_frames"], meta["height"], meta["width"]
    if meta.get("storage", "png") == "raw":
        raw = d / "frames.u8"
        try:
            data = np.fromfile(raw, dtype=np.uint8)
        except OSError as exc:
            raise DataError(f"{video_id}: cannot read {raw}") from exc
        if data.size != T * 3 * H * W:
            raise DataError(f"{video_id}: {raw} holds {data.size} bytes, expected {T * 3 * H * W}")
        return VideoFrames(video_id, data.reshape(T, 3, H, W), fps)
    frames = np.empty((T, 3, H, W), dtype=np.uint8)
    for i in range(T):
        p = d / f"{i:06d}.png"
        try:
            with Image.open(p) as im:
                arr = np.asarray(im.convert("RGB"))
        except (OSError, ValueError) as exc:
            raise DataError(f"{video_id}: frame {i} missing or unreadable ({p})") from exc
        if arr.shape != (H, W, 3):
            raise DataError(f"{video_id}: frame {i} has shape {arr.shape}, expected {(H, W, 3)}")
        frames[i] = arr.transpose(2, 0, 1)
    return VideoFrames(video_id, frames, fps)


# ---------------------------------------------------------------- manifests

@dataclass
class ManifestEntry:
    video_id: str
    path: str
    fps: float
    split: str = "train"
    events: list[dict] = field(default_factory=list)


@dataclass
class Corpus:
    root: Path
    entries: list[ManifestEntry]
    annotations: dict[str, AnnotationSet]
    videos: dict[str, VideoFrames]

    def split(self, name: str) -> list[str]:
        return [e.video_id for e in self.entries if e.split == name]

    def entry(self, video_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.video_id == video_id:
                return e
        raise KeyError(video_id)


def load_video_frames(entry: ManifestEntry, root=".") -> VideoFrames:
    return read_frame_dir(Path(root) / entry.path, entry.video_id, entry.fps)


def read_manifest(path) -> tuple[list[ManifestEntry], str | None]:
    doc = json.loads(Path(path).read_text())
    entries = []
    seen = set()
    for i, v in enumerate(doc.get("videos", [])):
        e = ManifestEntry(video_id=v["video_id"], path=v["path"], fps=float(v["fps"]),
                          split=v.get("split", "train"), events=v.get("events", []))
        if e.video_id in seen:
            raise DataError(f"videos[{i}].video_id: duplicate {e.video_id!r}")
        seen.add(e.video_id)
        entries.append(e)
    return entries, doc.get("annotations")


def write_manifest(entries: list[ManifestEntry], path, annotations: str | None = "annotations.json"):
    doc = {"version": 1, "annotations": annotations, "videos": [asdict(e) for e in entries]}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_corpus(manifest_path, load_frames: bool = True) -> Corpus:
    """Load every video and annotation referenced by a manifest, or raise.

    Nothing is returned unless the whole corpus loads.
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    entries, ann_ref = read_manifest(manifest_path)
    annotations = load_annotations(root / ann_ref) if ann_ref else {}
    videos = {}
    for e in entries:
        if not (root / e.path).is_dir():
            raise DataError(f"{e.video_id}: frame directory {root / e.path} does not exist")
        if load_frames:
            videos[e.video_id] = load_video_frames(e, root)
    missing = [e.video_id for e in entries if annotations and e.video_id not in annotations]
    if missing:
        raise DataError(f"annotations missing for {missing[:5]}")
    return Corpus(root, entries, annotations, videos)


PROFILES = {
    "desk": dict(length=120, fps=10.0, size=32, val_fraction=0.2),
    "tiny": dict(length=60, fps=10.0, size=32, val_fraction=0.25),
}


def generate_corpus(out_dir, count: int, seed: int = 0, profile: str = "desk",
                    storage: str = "png") -> Path:
    """Write ``count`` synthetic videos, ``annotations.json`` and ``manifest.json``.

    The last ``val_fraction`` of videos are tagged ``val``.
    """
    if profile not in PROFILES:
        raise DataError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    prof = PROFILES[profile]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_val = int(round(count * prof["val_fraction"])) if count > 1 else 0
    min_gap = 20 if prof["length"] >= 100 else 12
    entries, annotations = [], {}
    for i in range(count):
        vseed = int(np.random.default_rng([seed, i]).integers(2**31))
        spec = random_scene_spec(vseed, length=prof["length"], fps=prof["fps"], size=prof["size"],
                                 min_gap=min_gap, margin=min(12, prof["length"] // 6))
        vid = f"synth_{i:04d}"
        video, ann = generate_synthetic_video(spec, vid)
        write_video_frames(video, out / "videos" / vid, storage=storage)
        annotations[vid] = ann
        entries.append(ManifestEntry(vid, os.path.join("videos", vid), spec.fps,
                                     "val" if i >= count - n_val else "train",
                                     spec.boundary_kinds()))
    save_annotations(annotations, out / "annotations.json")
    write_manifest(entries, out / "manifest.json")
    return out / "manifest.json"
