"""Motion-confidence maps: extraction from a trained encoder, footprint
statistics for synthetic clips, and grayscale PNG export."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .motion import confidence, correlation

FOOTPRINT_COVERAGE = 0.25


@torch.no_grad()
def confidence_maps(encoder, frames: torch.Tensor, chunk: int = 16) -> np.ndarray:
    """Per-frame confidence ``(T, H, W)`` at the motion insertion stage.

    Frames are float ``(T, 3, S, S)`` in [0, 1]. The video is encoded in chunks
    that overlap by one frame so every adjacent pair is scored once; the last
    frame repeats the previous pair's map.
    """
    c = encoder.config
    T = frames.shape[0]
    if T < 2:
        raise ValueError("need at least 2 frames for motion confidence")
    if chunk < 2:
        raise ValueError("chunk must hold at least 2 frames")
    encoder.eval()
    maps = []
    start = 0
    while start < T - 1:
        clip = frames[start:start + chunk]
        _, feats = encoder(clip[None], temporal=True, return_stage=c.ms_insertion_stage)
        f = feats[0]
        vol = correlation(f[:-1], f[1:], c.motion_radius)
        maps.append(confidence(vol)[:, 0])
        start += len(clip) - 1
    conf = torch.cat(maps)
    conf = torch.cat([conf, conf[-1:]])
    return conf.numpy().astype(np.float64)


def footprint_grid(footprint: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Boolean ``(T, H, W)`` mask of feature cells whose mean object coverage is >= 0.25."""
    cov = torch.from_numpy(np.asarray(footprint, dtype=np.float64))[:, None]
    pooled = F.adaptive_avg_pool2d(cov, grid)[:, 0].numpy()
    return pooled >= FOOTPRINT_COVERAGE


def inside_outside_ratio(conf: np.ndarray, mask: np.ndarray) -> tuple[float, float, float]:
    """Mean confidence inside and outside ``mask`` and their ratio."""
    if not mask.any() or mask.all():
        raise ValueError("footprint mask must have cells both inside and outside")
    inside = float(conf[mask].mean())
    outside = float(conf[~mask].mean())
    ratio = inside / outside if outside > 0 else float("inf")
    return inside, outside, ratio


def write_confidence_pngs(conf: np.ndarray, out_dir, video_id: str, upscale_to: int | None = None) -> Path:
    """8-bit grayscale PNG per frame, min-max normalised over the clip, plus a JSON sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = float(conf.min()), float(conf.max())
    span = hi - lo
    norm = (conf - lo) / span if span > 0 else np.zeros_like(conf)
    files = []
    for t, m in enumerate(norm):
        img = Image.fromarray(np.rint(m * 255).astype(np.uint8), mode="L")
        if upscale_to:
            img = img.resize((upscale_to, upscale_to), Image.NEAREST)
        name = f"conf_{t:06d}.png"
        img.save(out / name)
        files.append(name)
    sidecar = {"video_id": video_id, "raw_min": lo, "raw_max": hi, "grid": list(conf.shape[1:]),
               "normalization": "per-clip min-max", "frames": files}
    path = out / "confidence.json"
    path.write_text(json.dumps(sidecar, indent=1) + "\n")
    return path
