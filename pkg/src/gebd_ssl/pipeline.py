"""End-to-end desk runs: corpus generation, pre-training, fine-tuning,
detection and evaluation, with the motion ablation and an untrained baseline."""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

from .boundary import detect_videos, finetune, load_classifier
from .config import resolve, stage_seed, write_resolved
from .data import generate_corpus, load_corpus
from .evaluation import evaluate_corpus
from .pretext import pretrain

log = logging.getLogger(__name__)

SMOKE_VIDEOS = {"desk": 80, "full": 80}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _stage(name, fn, *args, **kwargs):
    t0 = time.perf_counter()
    try:
        result = fn(*args, **kwargs)
    except Exception as exc:
        raise StageError(name, exc) from exc
    log.info("stage %s done in %.1fs", name, time.perf_counter() - t0)
    return result


def _relative(path, base) -> str:
    """Path relative to ``base`` when possible, so summaries do not depend on the output root."""
    try:
        return str(Path(path).resolve().relative_to(Path(base).resolve().parent))
    except ValueError:
        return str(path)


def split_train_dev(corpus, dev_fraction: float):
    """Train/dev split carved from the end of the train split; val stays held out."""
    train = corpus.split("train")
    n_dev = max(1, int(round(len(train) * dev_fraction)))
    if n_dev >= len(train):
        raise ValueError("train split too small to carve a dev set")
    return train[:-n_dev], train[-n_dev:], corpus.split("val")


def subset_by_kind(preds: dict, corpus, kind: str, threshold: float):
    """Restrict detections and annotations to boundaries of ``kind``.

    Detections within ``threshold`` relative distance of a boundary of the
    other kind are dropped, so they count neither as hits nor as false alarms.
    """
    sub_preds, sub_anns = {}, {}
    for vid, dets in preds.items():
        entry = corpus.entry(vid)
        ann = corpus.annotations[vid]
        keep_t = [e["frame"] / entry.fps for e in entry.events if e["kind"] == kind]
        other_t = [e["frame"] / entry.fps for e in entry.events if e["kind"] != kind]
        tol = threshold * ann.duration
        sub_preds[vid] = [d for d in dets if all(abs(d - o) > tol for o in other_t)]
        sub_anns[vid] = type(ann)(vid, ann.duration, ann.fps, [keep_t])
    return sub_preds, sub_anns


def evaluate_split(preds: dict, corpus, cfg: dict) -> dict:
    from .evaluation import parse_thresholds
    thresholds = parse_thresholds(cfg["eval.thresholds"])
    dets = {k: v["boundaries_sec"] for k, v in preds.items()}
    anns = {k: corpus.annotations[k] for k in dets}
    greedy = cfg["eval.matcher"] == "greedy"
    full = evaluate_corpus(dets, anns, thresholds, cfg["eval.aggregation"], greedy)
    mp, ma = subset_by_kind(dets, corpus, "motion", 0.05)
    motion = evaluate_corpus(mp, ma, (0.05,), cfg["eval.aggregation"], greedy)
    return {"report": full.to_dict(), "f1@0.05": round(full.f1_at(0.05), 6),
            "motion_only_f1@0.05": round(motion.f1[0], 6), "csv": full.to_csv()}


def run_variant(name: str, corpus, cfg: dict, out_dir, pretrain_ckpt=None, skip_pretrain=False,
                frozen_random=False) -> dict:
    """Pre-train (unless given a checkpoint), fine-tune, detect on val and evaluate.

    ``frozen_random`` trains only the head on a randomly initialised encoder.
    """
    out = Path(out_dir) / name
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    train, dev, val = split_train_dev(corpus, cfg["finetune.dev_fraction"])
    vids = corpus.videos
    ckpt = pretrain_ckpt
    if ckpt is None and not skip_pretrain and not frozen_random:
        ckpt = _stage("pretrain", pretrain, [vids[v] for v in corpus.split("train")], cfg, out / "pretrain")
    ft_cfg = dict(cfg)
    if frozen_random:
        ft_cfg["finetune.linear_eval"] = True
        ckpt = None
    best, history = _stage("finetune", finetune, ckpt, [vids[v] for v in train], [vids[v] for v in dev],
                           corpus.annotations, ft_cfg, out / "finetune")
    model, run_cfg = load_classifier(best)
    preds = _stage("detect", detect_videos, model, [vids[v] for v in val], run_cfg)
    (out / "pred.json").write_text(json.dumps({"predictions": [preds[k] for k in sorted(preds)]}, indent=1) + "\n")
    result = _stage("eval", evaluate_split, preds, corpus, cfg)
    (out / "eval.json").write_text(json.dumps(result["report"], indent=1, sort_keys=True) + "\n")
    (out / "eval.csv").write_text(result["csv"])
    summary = {"variant": name, "f1@0.05": result["f1@0.05"],
               "motion_only_f1@0.05": result["motion_only_f1@0.05"],
               "avg_f1": result["report"]["avg_f1"],
               "best_epoch": max(history, key=lambda h: h["dev_f1"])["epoch"],
               "pretrain_checkpoint": _relative(ckpt, out) if ckpt else None}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def pipeline_smoke(out_dir, profile: str = "desk", seed: int = 0, overrides=(), count: int | None = None,
                   ablation: bool = True, baseline: bool = True) -> dict:
    """gen-synth -> pretrain -> finetune -> detect -> eval, plus the motion-off
    ablation and the untrained-encoder baseline. Returns the summary dict and
    writes it to ``summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = resolve(overrides=list(overrides) + [f"seed={seed}"], profile=profile)
    write_resolved(cfg, out)
    count = count or SMOKE_VIDEOS[profile]
    manifest = _stage("gen-synth", generate_corpus, out / "corpus", count,
                      seed=stage_seed(seed, "gen-synth"), profile="desk")
    corpus = _stage("load", load_corpus, manifest)
    timings = {}
    t0 = time.perf_counter()
    ms_on = run_variant("ms_on", corpus, cfg, out)
    timings["ms_on"] = time.perf_counter() - t0
    summary = {"profile": profile, "seed": seed, "f1@0.05": ms_on["f1@0.05"],
               "motion_only_f1@0.05": ms_on["motion_only_f1@0.05"]}
    if ablation:
        t0 = time.perf_counter()
        off_cfg = dict(cfg, **{"encoder.motion_enabled": False})
        ms_off = run_variant("ms_off", corpus, off_cfg, out)
        timings["ms_off"] = time.perf_counter() - t0
        summary["ablation"] = {
            "ms_on_f1@0.05": ms_on["f1@0.05"], "ms_off_f1@0.05": ms_off["f1@0.05"],
            "difference": round(ms_on["f1@0.05"] - ms_off["f1@0.05"], 6),
            "ms_on_motion_only_f1@0.05": ms_on["motion_only_f1@0.05"],
            "ms_off_motion_only_f1@0.05": ms_off["motion_only_f1@0.05"],
            "motion_only_difference": round(ms_on["motion_only_f1@0.05"] - ms_off["motion_only_f1@0.05"], 6),
        }
    if baseline:
        t0 = time.perf_counter()
        base = run_variant("untrained", corpus, cfg, out, frozen_random=True)
        timings["untrained"] = time.perf_counter() - t0
        summary["untrained_f1@0.05"] = base["f1@0.05"]
        summary["gain_over_untrained"] = round(ms_on["f1@0.05"] - base["f1@0.05"], 6)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    (out / "timings.json").write_text(json.dumps({k: round(v, 1) for k, v in timings.items()}, indent=1) + "\n")
    return summary
