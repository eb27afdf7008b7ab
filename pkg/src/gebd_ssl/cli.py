"""Command-line entry point: ``gebd-ssl <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import config as cfgmod


def _common(p: argparse.ArgumentParser, config=True):
    if config:
        p.add_argument("--config", help="JSON file of dotted config keys")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--workers", type=int, help="worker threads (default 1, deterministic)")
    p.add_argument("--profile", choices=sorted(cfgmod.PROFILES), help="defaults profile")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gebd-ssl", description="Self-supervised event boundary detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic corpus")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--storage", choices=["png", "raw"], default="png")
    _common(p, config=False)

    p = sub.add_parser("pretrain", help="Stage-1 self-supervised pre-training")
    p.add_argument("--corpus", help="manifest.json (train split is used)")
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("finetune", help="Stage-2 boundary fine-tuning")
    p.add_argument("--ckpt", help="pre-training checkpoint; omit to start from random weights")
    p.add_argument("--corpus", help="manifest.json (train split, dev carved from its end)")
    p.add_argument("--labels", choices=["soft", "hard"])
    p.add_argument("--sigma", type=float)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("detect", help="predict boundaries")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--video-manifest", required=True)
    p.add_argument("--split", default="val", help="manifest split to run on, or 'all'")
    p.add_argument("--out", required=True, help="output pred.json")
    p.add_argument("--threshold", type=float)
    p.add_argument("--agg-window", type=float)
    _common(p)

    p = sub.add_parser("eval", help="score predictions against annotations")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--thresholds")
    p.add_argument("--aggregation", choices=["micro", "macro"])
    p.add_argument("--out", required=True, help="output directory for eval.json and eval.csv")
    _common(p)

    p = sub.add_parser("viz-motion", help="render motion-confidence maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--video", required=True, help="frame directory with meta.json")
    p.add_argument("--out-dir", required=True)
    _common(p, config=False)

    p = sub.add_parser("smoke", help="end-to-end desk pipeline with ablation and baseline")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--no-ablation", action="store_true")
    p.add_argument("--no-baseline", action="store_true")
    _common(p, config=False)
    return parser


def _resolve(args, extra=()) -> dict:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    overrides.extend(extra)
    return cfgmod.resolve(getattr(args, "config", None), overrides, args.profile)


def _setup(cfg):
    torch.set_num_threads(max(1, cfg["workers"]))
    torch.use_deterministic_algorithms(True, warn_only=True)


def cmd_gen_synth(args):
    from .data import generate_corpus
    cfg = _resolve(args)
    write_path = cfgmod.write_resolved(cfg, args.out)
    manifest = generate_corpus(args.out, args.count, seed=cfg["seed"], profile="desk", storage=args.storage)
    return {"manifest": str(manifest), "config": str(write_path)}


def _corpus_arg(args, cfg, key):
    path = getattr(args, "corpus", None) or cfg[key]
    if not path:
        raise ValueError(f"no corpus given (use --corpus or --set {key}=PATH)")
    return path


def cmd_pretrain(args):
    from .data import load_corpus
    from .pretext import pretrain
    cfg = _resolve(args, [f"pretrain.corpus={args.corpus}"] if args.corpus else [])
    _setup(cfg)
    cfgmod.write_resolved(cfg, args.out)
    corpus = load_corpus(_corpus_arg(args, cfg, "pretrain.corpus"))
    ckpt = pretrain([corpus.videos[v] for v in corpus.split("train")], cfg, args.out)
    return {"checkpoint": str(ckpt)}


def cmd_finetune(args):
    from .boundary import finetune
    from .data import load_corpus
    from .pipeline import split_train_dev
    extra = [f"finetune.corpus={args.corpus}"] if args.corpus else []
    if args.labels:
        extra.append(f"finetune.labels={args.labels}")
    if args.sigma is not None:
        extra.append(f"finetune.sigma={args.sigma}")
    cfg = _resolve(args, extra)
    _setup(cfg)
    cfgmod.write_resolved(cfg, args.out)
    corpus = load_corpus(_corpus_arg(args, cfg, "finetune.corpus"))
    train, dev, _ = split_train_dev(corpus, cfg["finetune.dev_fraction"])
    best, history = finetune(args.ckpt, [corpus.videos[v] for v in train], [corpus.videos[v] for v in dev],
                             corpus.annotations, cfg, args.out)
    return {"checkpoint": str(best), "epochs": len(history)}


def cmd_detect(args):
    from .boundary import detect_videos, load_classifier
    from .data import load_corpus
    extra = []
    if args.threshold is not None:
        extra.append(f"detect.threshold={args.threshold}")
    if args.agg_window is not None:
        extra.append(f"detect.agg_window={args.agg_window}")
    cfg = _resolve(args, extra)
    _setup(cfg)
    out = Path(args.out)
    cfgmod.write_resolved(cfg, out.parent)
    model, run_cfg = load_classifier(args.ckpt, cfg)
    corpus = load_corpus(args.video_manifest)
    ids = [e.video_id for e in corpus.entries] if args.split == "all" else corpus.split(args.split)
    if not ids:
        raise ValueError(f"manifest has no videos in split {args.split!r}")
    preds = detect_videos(model, [corpus.videos[v] for v in ids], run_cfg)
    out.write_text(json.dumps({"predictions": [preds[k] for k in sorted(preds)]}, indent=1) + "\n")
    return {"predictions": str(out), "videos": len(preds)}


def load_predictions(path) -> dict[str, list[float]]:
    doc = json.loads(Path(path).read_text())
    items = doc["predictions"] if isinstance(doc, dict) and "predictions" in doc else doc
    if isinstance(items, dict):
        items = [items]
    out = {}
    for i, item in enumerate(items):
        try:
            out[item["video_id"]] = [float(t) for t in item["boundaries_sec"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{path}: predictions[{i}] malformed ({exc})") from exc
    return out


def cmd_eval(args):
    from .data import load_annotations
    from .evaluation import evaluate_corpus, parse_thresholds
    extra = []
    if args.thresholds:
        extra.append(f"eval.thresholds={args.thresholds}")
    if args.aggregation:
        extra.append(f"eval.aggregation={args.aggregation}")
    cfg = _resolve(args, extra)
    out = Path(args.out)
    cfgmod.write_resolved(cfg, out)
    preds = load_predictions(args.pred)
    anns = load_annotations(args.gt)
    unknown = sorted(set(preds) - set(anns))
    if unknown:
        raise ValueError(f"predictions for unannotated videos: {unknown[:5]}")
    anns = {k: anns[k] for k in preds}
    report = evaluate_corpus(preds, anns, parse_thresholds(cfg["eval.thresholds"]), cfg["eval.aggregation"],
                             greedy=cfg["eval.matcher"] == "greedy")
    (out / "eval.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    (out / "eval.csv").write_text(report.to_csv())
    return {"f1@0.05": round(report.f1[0], 6), "avg_f1": round(report.avg_f1, 6), "report": str(out / "eval.json")}


def cmd_viz_motion(args):
    from .boundary import video_tensor
    from .data import read_frame_dir
    from .encoder import VideoEncoder, load_checkpoint
    from .viz import confidence_maps, write_confidence_pngs
    cfg = _resolve(args)
    _setup(cfg)
    cfgmod.write_resolved(cfg, args.out_dir)
    ckpt = load_checkpoint(args.ckpt)
    enc_cfg = ckpt["encoder_config"]
    if not enc_cfg.motion_enabled:
        raise ValueError("checkpoint encoder has no motion module")
    encoder = VideoEncoder(enc_cfg)
    if ckpt["stage"] == "finetune":
        state = {k[len("encoder."):]: v for k, v in ckpt["classifier"].items() if k.startswith("encoder.")}
    else:
        state = {k[len("encoder."):]: v for k, v in ckpt["query"].items() if k.startswith("encoder.")}
    encoder.load_state_dict(state)
    meta = json.loads((Path(args.video) / "meta.json").read_text())
    video = read_frame_dir(args.video, meta.get("video_id", Path(args.video).name), float(meta["fps"]))
    conf = confidence_maps(encoder, video_tensor(video, enc_cfg.input_side))
    sidecar = write_confidence_pngs(conf, args.out_dir, video.video_id, upscale_to=enc_cfg.input_side)
    return {"frames": int(conf.shape[0]), "sidecar": str(sidecar)}


def cmd_smoke(args):
    from .pipeline import pipeline_smoke
    overrides = list(args.set)
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    cfg = cfgmod.resolve(None, overrides, args.profile)
    _setup(cfg)
    return pipeline_smoke(args.out, profile=args.profile or "desk", seed=args.seed or 0, overrides=args.set,
                          count=args.count, ablation=not args.no_ablation, baseline=not args.no_baseline)


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "viz-motion": cmd_viz_motion,
    "smoke": cmd_smoke,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except Exception as exc:  # one-line machine-readable error
        stage = getattr(exc, "stage", None)
        err = {"error": type(exc).__name__, "command": args.command, "message": str(exc)}
        if stage:
            err["stage"] = stage
        print(json.dumps(err), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
