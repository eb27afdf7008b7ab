"""Stage-2 boundary detection: candidate windows, labels, the windowed
classifier, fine-tuning with balanced batches, inference and post-processing."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import defaults, stage_seed
from .encoder import EncoderConfig, VideoEncoder, load_checkpoint, save_checkpoint
from .evaluation import evaluate_corpus, select_consistent_annotation

log = logging.getLogger(__name__)


@dataclass
class CandidateWindow:
    candidate_index: int
    context_indices: tuple[int, ...]
    label: float = 0.0


def context_offsets(W: int = 5, m: int = 3, include_candidate: bool = False) -> list[int]:
    before = [-m * k for k in range(W, 0, -1)]
    after = [m * k for k in range(1, W + 1)]
    return before + ([0] if include_candidate else []) + after


def build_candidate_windows(T: int, W: int = 5, m: int = 3, candidate_stride: int | None = None,
                            include_candidate: bool = False) -> list[CandidateWindow]:
    """One window per ``candidate_stride``-th frame; context indices clamp to ``[0, T-1]``."""
    if T < 1:
        raise ValueError("video must have at least one frame")
    stride = candidate_stride or m
    offs = context_offsets(W, m, include_candidate)
    return [CandidateWindow(c, tuple(min(max(c + o, 0), T - 1) for o in offs))
            for c in range(0, T, stride)]


def soft_labels(boundary_frames, T: int, sigma: float = 3.0) -> np.ndarray:
    """Per-frame labels: max over boundaries of a unit-height Gaussian; ``sigma=0`` gives indicators."""
    f = np.arange(T, dtype=np.float64)
    out = np.zeros(T)
    for b in boundary_frames:
        if not 0 <= b < T:
            raise ValueError(f"boundary frame {b} outside [0, {T})")
        if sigma <= 0:
            out[int(round(b))] = 1.0
        else:
            out = np.maximum(out, np.exp(-(f - b) ** 2 / (2 * sigma ** 2)))
    return out


def boundary_frames(times, fps: float, T: int) -> list[int]:
    return [min(max(int(round(t * fps)), 0), T - 1) for t in times]


def candidate_labels(candidates, bframes, T: int, mode: str = "soft", sigma: float = 3.0) -> np.ndarray:
    """Labels for candidate frames.

    ``soft``: the per-frame Gaussian track sampled at each candidate.
    ``hard``: 1 for the candidate nearest each boundary (earlier on ties), else 0.
    """
    candidates = np.asarray(candidates)
    if mode == "soft":
        return soft_labels(bframes, T, sigma)[candidates]
    if mode != "hard":
        raise ValueError(f"unknown label mode {mode!r}")
    out = np.zeros(len(candidates))
    for b in bframes:
        out[int(np.argmin(np.abs(candidates - b)))] = 1.0
    return out


def normalize_window(emb: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Subtract the window's mean embedding, then standardise the whole ``(L, D)`` window.

    Contrastively trained embeddings share a large common component; only
    the variation across the window carries boundary evidence.
    """
    x = emb - emb.mean(dim=1, keepdim=True)
    return F.layer_norm(x, x.shape[1:], eps=eps)


class BoundaryClassifier(nn.Module):
    """Encoder over a context window, then the normalised, concatenated frame
    embeddings -> MLP -> logit."""

    def __init__(self, encoder_config: EncoderConfig, context_len: int = 10, hidden: int = 64,
                 temporal: bool = True):
        super().__init__()
        self.encoder = VideoEncoder(encoder_config)
        self.context_len = context_len
        self.temporal = temporal
        self.head = nn.Sequential(nn.Linear(context_len * encoder_config.embedding_dim, hidden),
                                  nn.ReLU(), nn.Linear(hidden, 1))

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        if windows.dim() != 5 or windows.shape[1] != self.context_len:
            raise ValueError(f"expected windows (B, {self.context_len}, 3, S, S), got {tuple(windows.shape)}")
        emb = normalize_window(self.encoder(windows, temporal=self.temporal))
        return self.head(emb.reshape(emb.shape[0], -1)).squeeze(-1)

    @torch.no_grad()
    def predict_proba(self, windows: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self(windows))


def predict_boundary_prob(window_frames: torch.Tensor, model: BoundaryClassifier) -> float:
    """Boundary probability for one ``(2W, 3, S, S)`` window."""
    return float(model.predict_proba(window_frames[None])[0])


def video_tensor(video, side: int) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(video.frames)).float() / 255.0
    if x.shape[-1] != side or x.shape[-2] != side:
        x = F.interpolate(x, size=(side, side), mode="bilinear", align_corners=False, antialias=True)
    return x


def gather_windows(frames: torch.Tensor, windows) -> torch.Tensor:
    idx = torch.tensor([w.context_indices for w in windows], dtype=torch.long)
    return frames[idx]


@torch.no_grad()
def predict_video(model: BoundaryClassifier, video, cfg: dict, batch_size: int = 64,
                  frames: torch.Tensor | None = None):
    """Return (candidate frames, probabilities) for every candidate of ``video``."""
    model.eval()
    frames = video_tensor(video, model.encoder.config.input_side) if frames is None else frames
    wins = build_candidate_windows(len(frames), cfg["finetune.window"], cfg["finetune.stride"],
                                   cfg["finetune.candidate_stride"], cfg["finetune.include_candidate"])
    probs = []
    for i in range(0, len(wins), batch_size):
        probs.append(model.predict_proba(gather_windows(frames, wins[i:i + batch_size])))
    return np.array([w.candidate_index for w in wins]), torch.cat(probs).numpy().astype(np.float64)


def postprocess(probabilities, candidate_frames, fps: float, threshold: float = 0.5,
                window_sec: float = 1.0, mode: str = "peaks") -> list[float]:
    """Turn per-candidate probabilities into boundary timestamps (sorted, seconds).

    Only proposals with probability above ``threshold`` count. ``peaks`` visits
    proposals from most to least probable (earliest first on ties) and keeps
    one unless a kept proposal lies closer than ``window_sec``; kept
    timestamps are therefore at least ``window_sec`` apart, and raising the
    threshold only removes boundaries. ``cluster`` groups proposals left to
    right, joining the open cluster while within ``window_sec`` of its first
    member, and keeps each cluster's most probable frame; neighbouring
    clusters can emit timestamps closer than ``window_sec``.
    """
    if fps <= 0:
        raise ValueError("fps must be positive")
    probs = np.asarray(probabilities, dtype=np.float64)
    frames = np.asarray(candidate_frames)
    live = np.flatnonzero(probs > threshold)
    if mode == "peaks":
        order = sorted(live, key=lambda i: (-probs[i], frames[i]))
        kept = []
        for i in order:
            t = frames[i] / fps
            if all(abs(t - k) >= window_sec for k in kept):
                kept.append(t)
        return sorted(float(t) for t in kept)
    if mode != "cluster":
        raise ValueError(f"unknown aggregation mode {mode!r}")
    live = live[np.argsort(frames[live], kind="stable")]
    out = []
    cluster_start, best_p, best_f = None, -1.0, None
    for i in live:
        p, f = probs[i], frames[i]
        t = f / fps
        if cluster_start is not None and t - cluster_start <= window_sec:
            if p > best_p:
                best_p, best_f = p, f
            continue
        if best_f is not None:
            out.append(best_f / fps)
        cluster_start, best_p, best_f = t, p, f
    if best_f is not None:
        out.append(best_f / fps)
    return [float(x) for x in out]


def balanced_batches(labels, batch_size: int, n_batches: int, rng: np.random.Generator):
    """Yield index arrays with exactly ``ceil(B/2)`` positives (label >= 0.5) per batch.

    The minority class is drawn with replacement; the majority cycles through
    shuffled passes without replacement.
    """
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels >= 0.5)
    neg = np.flatnonzero(labels < 0.5)
    if len(pos) == 0:
        raise ValueError("training set has no positive candidates")
    if len(neg) == 0:
        raise ValueError("training set has no negative candidates")
    n_pos = math.ceil(batch_size / 2)
    n_neg = batch_size - n_pos
    minority_pos = len(pos) <= len(neg)
    stream, cursor = None, 0
    major = neg if minority_pos else pos
    n_major = n_neg if minority_pos else n_pos
    for _ in range(n_batches):
        picked = []
        while len(picked) < n_major:
            if stream is None or cursor >= len(stream):
                stream, cursor = rng.permutation(major), 0
            take = min(n_major - len(picked), len(stream) - cursor)
            picked.extend(stream[cursor:cursor + take])
            cursor += take
        minor = rng.choice(pos if minority_pos else neg, size=batch_size - n_major, replace=True)
        p_idx, n_idx = (minor, picked) if minority_pos else (picked, minor)
        yield np.concatenate([np.asarray(p_idx, dtype=np.int64), np.asarray(n_idx, dtype=np.int64)])


def augment_windows(x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Label-preserving augmentation, shared by all frames of a window:
    horizontal/vertical flips and a random RGB channel permutation."""
    out = x.clone()
    for i in range(x.shape[0]):
        w = out[i]
        if rng.random() < 0.5:
            w = w.flip(-1)
        if rng.random() < 0.5:
            w = w.flip(-2)
        out[i] = w[:, torch.from_numpy(rng.permutation(3))]
    return out


@dataclass
class LabeledVideo:
    video: object
    annotation: object
    frames: torch.Tensor
    windows: list
    labels: np.ndarray


def prepare_videos(videos, annotations, cfg: dict, side: int,
                   candidate_stride: int | None = None) -> list[LabeledVideo]:
    out = []
    stride = candidate_stride or cfg["finetune.candidate_stride"]
    for v in videos:
        ann = annotations[v.video_id]
        chosen = ann.annotators[select_consistent_annotation(ann)]
        T = v.num_frames
        wins = build_candidate_windows(T, cfg["finetune.window"], cfg["finetune.stride"],
                                       stride, cfg["finetune.include_candidate"])
        cands = [w.candidate_index for w in wins]
        labels = candidate_labels(cands, boundary_frames(chosen, v.fps, T), T,
                                  cfg["finetune.labels"], cfg["finetune.sigma"])
        for w, y in zip(wins, labels):
            w.label = float(y)
        out.append(LabeledVideo(v, ann, video_tensor(v, side), wins, labels))
    return out


def detect_videos(model, prepared_or_videos, cfg: dict) -> dict[str, dict]:
    preds = {}
    for item in prepared_or_videos:
        video, frames = (item.video, item.frames) if isinstance(item, LabeledVideo) else (item, None)
        cands, probs = predict_video(model, video, cfg, frames=frames)
        preds[video.video_id] = {
            "video_id": video.video_id,
            "fps": float(video.fps),
            "boundaries_sec": postprocess(probs, cands, video.fps, cfg["detect.threshold"],
                                          cfg["detect.agg_window"], cfg["detect.aggregation"]),
            "probabilities": [[int(c), round(float(p), 6)] for c, p in zip(cands, probs)],
        }
    return preds


def dev_f1(model, prepared, cfg, threshold=0.05) -> float:
    preds = detect_videos(model, prepared, cfg)
    anns = {p.video.video_id: p.annotation for p in prepared}
    rep = evaluate_corpus({k: v["boundaries_sec"] for k, v in preds.items()}, anns, (threshold,))
    return rep.f1[0]


def build_classifier(cfg: dict, checkpoint=None, seed: int = 0) -> BoundaryClassifier:
    """Classifier whose encoder comes from a pre-training checkpoint (query tower) or random init."""
    torch.manual_seed(seed)
    ckpt = load_checkpoint(checkpoint) if checkpoint else None
    enc_cfg = ckpt["encoder_config"] if ckpt else EncoderConfig.from_run_config(cfg)
    ctx = 2 * cfg["finetune.window"] + (1 if cfg["finetune.include_candidate"] else 0)
    model = BoundaryClassifier(enc_cfg, ctx, cfg["finetune.hidden"], cfg["finetune.temporal"])
    if ckpt is not None:
        if ckpt["stage"] == "finetune":
            model.load_state_dict(ckpt["classifier"])
        else:
            enc_state = {k[len("encoder."):]: v for k, v in ckpt["query"].items() if k.startswith("encoder.")}
            model.encoder.load_state_dict(enc_state)
    return model


def finetune(checkpoint, train_videos, dev_videos, annotations, cfg: dict, out_dir,
             seed: int | None = None) -> tuple[Path, list[dict]]:
    """Fine-tune end to end with balanced BCE batches and early stopping on dev F1@0.05.

    ``checkpoint=None`` starts from a randomly initialised encoder. Returns the
    path of the best checkpoint and the per-epoch history.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = stage_seed(cfg["seed"], "finetune") if seed is None else seed
    model = build_classifier(cfg, checkpoint, seed)
    side = model.encoder.config.input_side
    # denser training candidates are extra jittered samples; dev scoring keeps the inference stride
    train = prepare_videos(train_videos, annotations, cfg, side, cfg["finetune.train_candidate_stride"])
    dev = prepare_videos(dev_videos, annotations, cfg, side)
    samples = [(i, w) for i, lv in enumerate(train) for w in lv.windows]
    labels = np.array([w.label for _, w in samples])
    if not (labels >= 0.5).any():
        raise ValueError("fine-tuning corpus has no positive candidates")
    if cfg["finetune.linear_eval"]:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg["finetune.lr"])
    B = cfg["finetune.batch_size"]
    steps = cfg["finetune.steps_per_epoch"] or math.ceil(len(samples) / B)
    rng = np.random.default_rng([seed, 3])
    history, best_state, best_f1, best_epoch, stale = [], None, -1.0, 0, 0
    for epoch in range(1, cfg["finetune.epochs"] + 1):
        model.train()
        losses = []
        for idx in balanced_batches(labels, B, steps, rng):
            x = torch.stack([gather_windows(train[samples[i][0]].frames, [samples[i][1]])[0] for i in idx])
            if cfg["finetune.augment"]:
                x = augment_windows(x, rng)
            y = torch.tensor(labels[idx], dtype=torch.float32)
            loss = F.binary_cross_entropy_with_logits(model(x), y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        f1 = dev_f1(model, dev, cfg) if dev else 0.0
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "first_batch_loss": losses[0], "last_batch_loss": losses[-1], "dev_f1": f1})
        log.info("finetune epoch %d loss %.4f dev F1@0.05 %.4f", epoch, history[-1]["train_loss"], f1)
        if f1 > best_f1:
            best_f1, best_epoch, stale = f1, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= cfg["finetune.patience"]:
                break
    model.load_state_dict(best_state)
    path = out / "finetune_best.pt"
    save_checkpoint(path, stage="finetune", run_config=cfg, encoder_config=model.encoder.config,
                    classifier=model.state_dict(), optimizer=opt.state_dict(),
                    meta={"best_epoch": best_epoch, "best_dev_f1": best_f1, "history": history})
    with open(out / "finetune_history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "dev_f1"])
        for h in history:
            writer.writerow([h["epoch"], f"{h['train_loss']:.6f}", f"{h['dev_f1']:.6f}"])
    return path, history


def load_classifier(path, cfg: dict | None = None) -> tuple[BoundaryClassifier, dict]:
    ckpt = load_checkpoint(path)
    if ckpt["stage"] != "finetune":
        raise ValueError(f"{path}: expected a fine-tuned checkpoint, got stage {ckpt['stage']!r}")
    saved = ckpt["run_config"]
    run_cfg = {**defaults(saved.get("profile", "desk")), **saved}  # keys added after the checkpoint was written
    if cfg:
        run_cfg.update({k: v for k, v in cfg.items() if k.startswith("detect.")})
    model = build_classifier(run_cfg, path)
    model.eval()
    return model, run_cfg
