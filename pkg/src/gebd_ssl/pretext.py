"""Stage-1 contrastive pre-training: sampling, the four pretext losses, the
negative queues and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.v2.functional as TF

from .config import stage_seed
from .encoder import ContrastiveModel, EncoderConfig, momentum_update, save_checkpoint

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- augmentation

@dataclass
class AugmentConfig:
    p_scale: float = 1.0
    scale_min: float = 0.5
    p_jitter: float = 0.8
    jitter_strength: float = 0.4
    p_gray: float = 0.2
    p_blur: float = 0.5
    p_flip: float = 0.5

    @classmethod
    def from_run_config(cls, cfg: dict) -> "AugmentConfig":
        return cls(**{k[len("aug."):]: v for k, v in cfg.items() if k.startswith("aug.")})

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_scale=0.0, p_jitter=0.0, p_gray=0.0, p_blur=0.0, p_flip=0.0)


def to_float(frames) -> torch.Tensor:
    """uint8 frames (any leading shape, channels third from last) to float in [0, 1]."""
    t = torch.as_tensor(np.asarray(frames))
    return t.float() / 255.0 if t.dtype == torch.uint8 else t.float()


def augment(frames, seed: int, side: int, config: AugmentConfig | None = None) -> torch.Tensor:
    """Apply one seeded draw of the augmentation pipeline to ``(..., 3, H, W)`` frames.

    Every frame in the input receives the same parameters, so a clip stays
    temporally consistent. Output is float in [0, 1] with spatial side ``side``.
    """
    cfg = config or AugmentConfig()
    x = to_float(frames)
    lead = x.shape[:-3]
    x = x.reshape(-1, *x.shape[-3:])
    H, W = x.shape[-2:]
    rng = np.random.default_rng(seed)
    if rng.random() < cfg.p_scale:
        area = rng.uniform(cfg.scale_min, 1.0) * H * W
        ratio = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
        h = int(round(min(H, math.sqrt(area / ratio))))
        w = int(round(min(W, math.sqrt(area * ratio))))
        top = int(rng.integers(0, H - h + 1))
        left = int(rng.integers(0, W - w + 1))
        x = TF.resized_crop(x, top, left, h, w, [side, side], antialias=True)
    elif (H, W) != (side, side):
        x = TF.resize(x, [side, side], antialias=True)
    if rng.random() < cfg.p_jitter:
        s = cfg.jitter_strength
        factors = rng.uniform(max(0.0, 1 - s), 1 + s, size=3)
        hue = rng.uniform(-s / 4, s / 4)
        for op in rng.permutation(4):
            if op == 0:
                x = TF.adjust_brightness(x, float(factors[0]))
            elif op == 1:
                x = TF.adjust_contrast(x, float(factors[1]))
            elif op == 2:
                x = TF.adjust_saturation(x, float(factors[2]))
            else:
                x = TF.adjust_hue(x, float(hue))
    if rng.random() < cfg.p_gray:
        x = TF.rgb_to_grayscale(x, num_output_channels=3)
    if rng.random() < cfg.p_blur:
        sigma = float(rng.uniform(0.1, 2.0)) * side / 224 * 7
        k = max(3, int(2 * round(2 * sigma) + 1))
        x = TF.gaussian_blur(x, [k, k], [sigma, sigma])
    if rng.random() < cfg.p_flip:
        x = TF.horizontal_flip(x)
    return x.clamp(0, 1).reshape(*lead, 3, side, side)


# ---------------------------------------------------------------- sampling

@dataclass
class FrameTriplet:
    v1_anchor: torch.Tensor
    v1_positive: torch.Tensor
    v2: torch.Tensor
    v3: torch.Tensor
    source_indices: tuple[int, int, int]
    augmentation_seed: int


@dataclass
class ClipTuplePair:
    anchor: torch.Tensor  # (K, L, 3, S, S)
    positive: torch.Tensor
    anchor_indices: np.ndarray  # (K, L)
    positive_indices: np.ndarray
    segment_boundaries: list[tuple[int, int]]


def triplet_indices(num_frames: int, seed: int) -> tuple[int, int, int]:
    if num_frames < 3:
        raise ValueError(f"need at least 3 frames for a triplet, got {num_frames}")
    rng = np.random.default_rng(seed)
    return tuple(int(i) for i in rng.choice(num_frames, size=3, replace=False))


def sample_frame_triplet(video, seed: int, side: int | None = None,
                         aug: AugmentConfig | None = None) -> FrameTriplet:
    frames = video.frames
    idx = triplet_indices(len(frames), seed)
    side = side or frames.shape[-1]
    sub = np.random.default_rng([seed, 1]).integers(2**31, size=4)
    views = [augment(frames[i], int(s), side, aug) for i, s in zip((idx[0], idx[0], idx[1], idx[2]), sub)]
    return FrameTriplet(*views, source_indices=idx, augmentation_seed=seed)


def segment_bounds(num_frames: int, K: int) -> list[tuple[int, int]]:
    edges = [k * num_frames // K for k in range(K + 1)]
    return [(edges[k], edges[k + 1]) for k in range(K)]


def clip_indices(num_frames: int, K: int, clip_len: int, seed: int):
    """Anchor and positive ``(K, clip_len)`` frame indices, one clip per segment."""
    bounds = segment_bounds(num_frames, K)
    if min(b - a for a, b in bounds) < clip_len:
        raise ValueError(f"video of {num_frames} frames too short for {K} segments of {clip_len}-frame clips")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(2):
        starts = [int(rng.integers(a, b - clip_len + 1)) for a, b in bounds]
        out.append(np.array([np.arange(s, s + clip_len) for s in starts]))
    return out[0], out[1], bounds


def sample_clip_tuples(video, K: int = 3, clip_len: int = 4, seed: int = 0, side: int | None = None,
                       aug: AugmentConfig | None = None) -> ClipTuplePair:
    frames = video.frames
    a_idx, p_idx, bounds = clip_indices(len(frames), K, clip_len, seed)
    side = side or frames.shape[-1]
    sub = np.random.default_rng([seed, 2]).integers(2**31, size=(2, K))
    anchor = torch.stack([augment(frames[a_idx[k]], int(sub[0, k]), side, aug) for k in range(K)])
    positive = torch.stack([augment(frames[p_idx[k]], int(sub[1, k]), side, aug) for k in range(K)])
    return ClipTuplePair(anchor, positive, a_idx, p_idx, bounds)


@dataclass
class PretextBatch:
    v1_anchor: torch.Tensor  # (B, 3, S, S)
    v1_positive: torch.Tensor
    v2: torch.Tensor
    v3: torch.Tensor
    tuple_anchor: torch.Tensor  # (B, K, L, 3, S, S)
    tuple_positive: torch.Tensor
    permutation: tuple[int, ...]
    video_ids: list[str] = field(default_factory=list)


def non_identity_permutation(K: int, rng: np.random.Generator) -> tuple[int, ...]:
    """A uniformly drawn non-identity permutation of ``range(K)``."""
    if K < 2:
        raise ValueError("need K >= 2 for a non-identity permutation")
    while True:
        perm = tuple(int(i) for i in rng.permutation(K))
        if perm != tuple(range(K)):
            return perm


def make_batch(videos, seed: int, K: int, clip_len: int, side: int,
               aug: AugmentConfig | None = None) -> PretextBatch:
    rng = np.random.default_rng(seed)
    seeds = rng.integers(2**31, size=(len(videos), 2))
    trips = [sample_frame_triplet(v, int(s[0]), side, aug) for v, s in zip(videos, seeds)]
    tups = [sample_clip_tuples(v, K, clip_len, int(s[1]), side, aug) for v, s in zip(videos, seeds)]
    return PretextBatch(
        v1_anchor=torch.stack([t.v1_anchor for t in trips]),
        v1_positive=torch.stack([t.v1_positive for t in trips]),
        v2=torch.stack([t.v2 for t in trips]),
        v3=torch.stack([t.v3 for t in trips]),
        tuple_anchor=torch.stack([t.anchor for t in tups]),
        tuple_positive=torch.stack([t.positive for t in tups]),
        permutation=non_identity_permutation(K, rng),
        video_ids=[v.video_id for v in videos],
    )


# ---------------------------------------------------------------- losses

def info_nce(q: torch.Tensor, p: torch.Tensor, negatives: torch.Tensor, temperature: float = 0.01,
             reduction: str = "mean") -> torch.Tensor:
    """InfoNCE with dot-product similarity scaled by ``1/temperature``.

    ``q`` and ``p`` are ``(D,)`` or ``(B, D)``; ``negatives`` is ``(N, D)``
    shared across the batch or ``(B, N, D)`` per sample. An empty negative set
    gives zero loss.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    single = q.dim() == 1
    if single:
        q, p = q[None], p[None]
        if negatives.dim() == 2:
            negatives = negatives[None]
    pos = (q * p).sum(-1, keepdim=True)
    if negatives.dim() == 2:
        neg = q @ negatives.T
    else:
        neg = torch.einsum("bd,bnd->bn", q, negatives)
    logits = torch.cat([pos, neg], dim=1) / temperature
    losses = torch.logsumexp(logits, dim=1) - logits[:, 0]
    if single or reduction == "none":
        return losses[0] if single else losses
    return losses.mean()


def intra_loss(q1a, p1p, p2, p3, temperature=0.01):
    """Positive is the other view of the anchor frame; the two other frames are the only negatives."""
    negatives = torch.stack([p2, p3], dim=-2)
    return info_nce(q1a, p1p, negatives, temperature)


def inter_loss(q1a, p1p, p2, p3, queue, temperature=0.01):
    """Average of three InfoNCE terms, one per same-video positive, against the queue."""
    negs = queue.negatives() if isinstance(queue, NegativeQueue) else queue
    if negs.shape[0] == 0:
        raise ValueError("inter-frame loss needs a non-empty negative queue")
    return sum(info_nce(q1a, p, negs, temperature) for p in (p1p, p2, p3)) / 3


def consensus(features: torch.Tensor) -> torch.Tensor:
    """Average frames within each clip, then clips: ``(B, K, L, D) -> (B, D)``."""
    return features.mean(dim=2).mean(dim=1)


def segment_loss(anchor_features, positive_features, queue, *, project_query, project_key,
                 temperature=0.01):
    """Video-level InfoNCE between the consensus of the anchor and positive clip tuples."""
    negs = queue.negatives() if isinstance(queue, NegativeQueue) else queue
    if negs.shape[0] == 0:
        raise ValueError("segment loss needs a non-empty negative queue")
    q = project_query(consensus(anchor_features))
    with torch.no_grad():
        p = project_key(consensus(positive_features))
    return info_nce(q, p, negs, temperature)


def order_regularizer(anchor_features, positive_features, queue, permutation, *, project_query,
                      project_key, aggregate_query=None, aggregate_key=None, temperature=0.01):
    """Marginal InfoNCE penalty of adding the clip-shuffled anchor as an extra negative.

    The anchor, shuffled anchor and positive tuples are merged across clip
    slots with ``aggregate_*`` (``(B, K, D) -> (B, D)``; default averaging)
    before projection. A shuffled embedding equal to its anchor (up to
    floating-point rounding) carries no ordering signal and contributes zero.
    """
    K = anchor_features.shape[1]
    if K < 2:
        raise ValueError("order regularizer needs at least 2 clips")
    perm = list(permutation)
    if sorted(perm) != list(range(K)) or perm == list(range(K)):
        raise ValueError(f"{permutation} is not a non-identity permutation of range({K})")
    negs = queue.negatives() if isinstance(queue, NegativeQueue) else queue
    mean = lambda c: c.mean(dim=1)  # noqa: E731
    agg_q = aggregate_query or mean
    agg_k = aggregate_key or mean
    clips_a = anchor_features.mean(dim=2)
    q = project_query(agg_q(clips_a))
    q_shuf = project_query(agg_q(clips_a[:, perm]))
    with torch.no_grad():
        p = project_key(agg_k(positive_features.mean(dim=2)))
    B = q.shape[0]
    shared = negs.expand(B, *negs.shape) if negs.dim() == 2 else negs
    with_shuf = torch.cat([shared, q_shuf[:, None]], dim=1)
    base = info_nce(q, p, shared, temperature, reduction="none")
    extra = info_nce(q, p, with_shuf, temperature, reduction="none")
    # equal up to rounding (e.g. order-free averaging sums clips in another order)
    informative = ~torch.isclose(q_shuf, q, rtol=1e-5, atol=1e-7).all(dim=-1)
    return (torch.clamp(extra - base, min=0.0) * informative).mean()


# ---------------------------------------------------------------- queue

class NegativeQueue:
    """Fixed-capacity FIFO of unit-norm key embeddings."""

    def __init__(self, capacity: int, dim: int, name: str = "queue"):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self.name = name
        self.buffer = torch.zeros(capacity, dim)
        self.ptr = 0
        self.size = 0

    def push(self, keys: torch.Tensor, source: str | None = None) -> "NegativeQueue":
        if source is not None and source != self.name:
            raise ValueError(f"keys from {source!r} pushed into queue {self.name!r}")
        keys = keys.detach()
        n = keys.shape[0]
        if n > self.capacity:
            raise ValueError(f"cannot push {n} keys into a queue of capacity {self.capacity}")
        if keys.shape[1] != self.dim:
            raise ValueError(f"key dim {keys.shape[1]} != queue dim {self.dim}")
        norms = keys.norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-4):
            raise ValueError("queue keys must have unit norm")
        idx = (self.ptr + torch.arange(n)) % self.capacity
        self.buffer = self.buffer.to(keys.dtype)
        self.buffer[idx] = keys
        self.ptr = (self.ptr + n) % self.capacity
        self.size = min(self.capacity, self.size + n)
        return self

    def negatives(self) -> torch.Tensor:
        return self.contents()

    def contents(self) -> torch.Tensor:
        """Stored keys, oldest first."""
        if self.size < self.capacity:
            return self.buffer[:self.size]
        return torch.cat([self.buffer[self.ptr:], self.buffer[:self.ptr]])

    def fill_random(self, generator: torch.Generator) -> "NegativeQueue":
        keys = F.normalize(torch.randn(self.capacity, self.dim, generator=generator), dim=1)
        return self.push(keys, self.name)

    def state_dict(self) -> dict:
        return {"buffer": self.buffer.clone(), "ptr": self.ptr, "size": self.size, "name": self.name}

    def load_state_dict(self, state: dict):
        self.buffer = state["buffer"].clone()
        self.ptr, self.size, self.name = state["ptr"], state["size"], state["name"]


def queue_push(queue: NegativeQueue, keys: torch.Tensor) -> NegativeQueue:
    return queue.push(keys)


# ---------------------------------------------------------------- training step

@dataclass
class PretextLossBundle:
    intra: torch.Tensor
    inter: torch.Tensor
    segment: torch.Tensor
    order: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("intra", "inter", "segment", "order", "total")}


class NonFiniteLoss(RuntimeError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class PretrainState:
    model: ContrastiveModel
    optimizer: torch.optim.Optimizer
    inter_queue: NegativeQueue
    segment_queue: NegativeQueue
    key_momentum: float = 0.999
    temperature: float = 0.01
    weights: dict = field(default_factory=lambda: dict(intra=1.0, inter=1.0, segment=1.0, order=1.0))
    schedule: object = None
    step: int = 0


def compute_losses(model: ContrastiveModel, batch: PretextBatch, inter_queue, segment_queue,
                   temperature: float = 0.01, weights: dict | None = None):
    """All four pretext losses for one batch; also returns the keys to enqueue."""
    w = weights or dict(intra=1.0, inter=1.0, segment=1.0, order=1.0)
    qt, kt = model.query, model.key
    B = batch.v1_anchor.shape[0]
    # frame-level tasks: temporal modules off
    f_a = qt.encoder(batch.v1_anchor[:, None], temporal=False)[:, 0]
    with torch.no_grad():
        keys_in = torch.cat([batch.v1_positive, batch.v2, batch.v3])[:, None]
        f_k = kt.encoder(keys_in, temporal=False)[:, 0]
    q_r = qt.project(f_a, "intra")
    q_e = qt.project(f_a, "inter")
    with torch.no_grad():
        k_r = kt.project(f_k, "intra").split(B)
        k_e = kt.project(f_k, "inter").split(B)
    l_intra = intra_loss(q_r, *k_r, temperature=temperature)
    l_inter = inter_loss(q_e, *k_e, queue=inter_queue, temperature=temperature)

    # clip-level tasks: temporal shift and motion on
    _, K, L = batch.tuple_anchor.shape[:3]
    side = batch.tuple_anchor.shape[-1]
    c_a = qt.encoder(batch.tuple_anchor.reshape(B * K, L, 3, side, side), temporal=True).reshape(B, K, L, -1)
    with torch.no_grad():
        c_p = kt.encoder(batch.tuple_positive.reshape(B * K, L, 3, side, side), temporal=True).reshape(B, K, L, -1)
    project_q = lambda e: qt.project(e, "segment")  # noqa: E731
    project_k = lambda e: kt.project(e, "segment")  # noqa: E731
    l_segment = segment_loss(c_a, c_p, segment_queue, project_query=project_q, project_key=project_k,
                             temperature=temperature)
    l_order = order_regularizer(c_a, c_p, segment_queue, batch.permutation, project_query=project_q,
                                project_key=project_k, aggregate_query=qt.slots, aggregate_key=kt.slots,
                                temperature=temperature)
    total = (w["intra"] * l_intra + w["inter"] * l_inter + w["segment"] * l_segment
             + w["order"] * l_order)
    with torch.no_grad():
        seg_keys = project_k(consensus(c_p))
    bundle = PretextLossBundle(l_intra, l_inter, l_segment, l_order, total)
    return bundle, {"inter": k_e[0], "segment": seg_keys}


def pretrain_step(batch: PretextBatch, state: PretrainState) -> PretextLossBundle:
    """One optimisation step; mutates ``state`` (parameters, key tower, queues, step)."""
    model = state.model
    bundle, keys = compute_losses(model, batch, state.inter_queue, state.segment_queue,
                                  state.temperature, state.weights)
    if not torch.isfinite(bundle.total):
        diag = {"step": state.step, "losses": {k: float(v) for k, v in bundle.as_floats().items()},
                "videos": batch.video_ids}
        raise NonFiniteLoss(f"non-finite pre-training loss at step {state.step}", diag)
    state.optimizer.zero_grad(set_to_none=True)
    bundle.total.backward()
    state.optimizer.step()
    if state.schedule is not None:
        state.schedule.step()
    momentum_update(model.query, model.key, state.key_momentum)
    state.inter_queue.push(keys["inter"], "inter")
    state.segment_queue.push(keys["segment"], "segment")
    state.step += 1
    return bundle


def warmup_cosine(optimizer, warmup_steps: int, total_steps: int):
    def factor(step):
        if step < warmup_steps:
            return (step + 1) / warmup_steps
        progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
        return 0.5 * (1 + math.cos(math.pi * min(1.0, progress)))
    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


def build_state(cfg: dict, encoder_config: EncoderConfig, total_steps: int, steps_per_epoch: int,
                seed: int) -> PretrainState:
    torch.manual_seed(seed)
    model = ContrastiveModel(encoder_config)
    params = [p for p in model.query.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=cfg["pretrain.lr"], momentum=cfg["pretrain.momentum"],
                          weight_decay=cfg["pretrain.weight_decay"])
    warm = min(total_steps, cfg["pretrain.warmup_epochs"] * steps_per_epoch)
    gen = torch.Generator().manual_seed(seed + 1)
    dim = encoder_config.projection_dim
    state = PretrainState(
        model=model, optimizer=opt,
        inter_queue=NegativeQueue(cfg["pretrain.queue_size"], dim, "inter").fill_random(gen),
        segment_queue=NegativeQueue(cfg["pretrain.queue_size"], dim, "segment").fill_random(gen),
        key_momentum=cfg["pretrain.key_momentum"], temperature=cfg["pretrain.temperature"],
        weights={k: cfg[f"pretrain.weight.{k}"] for k in ("intra", "inter", "segment", "order")},
        schedule=warmup_cosine(opt, warm, total_steps))
    return state


def pretrain(videos: list, cfg: dict, out_dir, log_every: int = 10) -> Path:
    """Run Stage-1 training on ``videos``; writes per-epoch checkpoints and ``losses.csv``.

    Returns the path of the final checkpoint.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = stage_seed(cfg["seed"], "pretrain")
    enc_cfg = EncoderConfig.from_run_config(cfg)
    B = cfg["pretrain.batch_size"]
    if not videos:
        raise ValueError("pre-training corpus is empty")
    steps_per_epoch = max(1, math.ceil(len(videos) / B))
    total = cfg["pretrain.steps"] or cfg["pretrain.epochs"] * steps_per_epoch
    state = build_state(cfg, enc_cfg, total, steps_per_epoch, seed)
    aug = AugmentConfig.from_run_config(cfg)
    order_rng = np.random.default_rng([seed, 5])
    csv_path = out / "losses.csv"
    final = out / "pretrain_final.pt"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "L_intra", "L_inter", "L_segment", "L_order", "L_total"])
        epoch = 0
        order = order_rng.permutation(len(videos))
        while state.step < total:
            pos = (state.step % steps_per_epoch) * B
            if pos == 0 and state.step > 0:
                order = order_rng.permutation(len(videos))
            chosen = [videos[i] for i in order[pos:pos + B]]
            if len(chosen) < B:
                chosen += [videos[i] for i in order[:B - len(chosen)]]
            batch = make_batch(chosen, seed=int(stage_seed(seed, f"batch{state.step}")),
                               K=cfg["pretrain.K"], clip_len=cfg["pretrain.clip_len"],
                               side=enc_cfg.input_side, aug=aug)
            try:
                bundle = pretrain_step(batch, state)
            except NonFiniteLoss as exc:
                (out / "diagnostics.json").write_text(json.dumps(exc.diagnostics, indent=1))
                raise
            vals = bundle.as_floats()
            writer.writerow([state.step] + [f"{vals[k]:.6f}" for k in ("intra", "inter", "segment", "order", "total")])
            if state.step % log_every == 0:
                log.info("step %d/%d total %.4f", state.step, total, vals["total"])
            if state.step % steps_per_epoch == 0 or state.step == total:
                epoch += 1
                _save(out / "pretrain_last.pt", state, cfg, enc_cfg, epoch)
    _save(final, state, cfg, enc_cfg, epoch)
    return final


def _save(path, state: PretrainState, cfg, enc_cfg, epoch):
    save_checkpoint(path, stage="pretrain", run_config=cfg, encoder_config=enc_cfg,
                    query=state.model.query.state_dict(), key=state.model.key.state_dict(),
                    optimizer=state.optimizer.state_dict(),
                    meta={"step": state.step, "epoch": epoch,
                          "inter_queue": state.inter_queue.state_dict(),
                          "segment_queue": state.segment_queue.state_dict()})
