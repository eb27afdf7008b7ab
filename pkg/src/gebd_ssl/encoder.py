"""Frame/clip encoder: ResNet-style 2D CNN with temporal shift in every residual
block and a MotionSqueeze module after ``conv3_x``, plus projection heads and
the momentum-updated key tower used for contrastive pre-training.

Stages are numbered as in ResNet: ``conv2_x`` is stage 2, ..., ``conv5_x`` is
stage 5. GroupNorm is used throughout so every sample is encoded
independently of the rest of its batch.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .motion import MotionSqueeze

CHECKPOINT_MAGIC = "GEBD-SSL-CKPT-v1"
HEADS = ("intra", "inter", "segment")
PIXEL_MEAN = 0.45
PIXEL_STD = 0.25


@dataclass
class EncoderConfig:
    variant: str = "tiny"
    input_side: int = 32
    stem_channels: int = 16
    stem_kernel: int = 3
    channels_per_stage: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: tuple[int, ...] = (1, 1, 1, 1)
    block: str = "basic"
    ms_insertion_stage: int = 3
    tsm_shift_fraction: float = 0.125
    tsm_enabled: bool = True
    motion_enabled: bool = True
    temporal_modules_enabled_default: bool = True
    motion_radius: int = 3
    motion_temperature: float = 0.01
    motion_sigma: float = 5.0
    projection_dim: int = 32
    num_segments: int = 3

    def __post_init__(self):
        self.channels_per_stage = tuple(self.channels_per_stage)
        self.blocks_per_stage = tuple(self.blocks_per_stage)
        if len(self.channels_per_stage) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("encoder needs exactly 4 residual stages")
        if not 0 < self.tsm_shift_fraction < 0.5:
            raise ValueError("tsm_shift_fraction must lie in (0, 0.5)")
        if self.ms_insertion_stage not in (2, 3, 4, 5):
            raise ValueError("ms_insertion_stage must name a residual stage 2..5")
        for c in (self.stem_channels,) + self.channels_per_stage + self._block_inputs():
            shifted = 2 * self.tsm_shift_fraction * c
            if abs(shifted - round(shifted)) > 1e-9:
                raise ValueError(f"2 * tsm_shift_fraction * {c} is not an integer")

    def _block_inputs(self) -> tuple[int, ...]:
        if self.block == "bottleneck":
            return tuple(c // 4 for c in self.channels_per_stage)
        return ()

    @property
    def embedding_dim(self) -> int:
        return self.channels_per_stage[-1]

    def stage_channels(self, stage: int) -> int:
        return self.channels_per_stage[stage - 2]

    @classmethod
    def full(cls, **kw) -> "EncoderConfig":
        base = dict(variant="full", input_side=224, stem_channels=64, stem_kernel=7,
                    channels_per_stage=(256, 512, 1024, 2048), blocks_per_stage=(3, 4, 6, 3),
                    block="bottleneck", motion_radius=7, projection_dim=128)
        base.update(kw)
        return cls(**base)

    @classmethod
    def tiny(cls, **kw) -> "EncoderConfig":
        return cls(**kw)

    @classmethod
    def from_run_config(cls, cfg: dict) -> "EncoderConfig":
        make = cls.full if cfg["encoder.variant"] == "full" else cls.tiny
        return make(tsm_shift_fraction=cfg["encoder.tsm_shift_fraction"],
                    tsm_enabled=cfg["encoder.tsm_enabled"],
                    motion_enabled=cfg["encoder.motion_enabled"],
                    motion_radius=cfg["motion.radius"],
                    motion_temperature=cfg["motion.softmax_temperature"],
                    motion_sigma=cfg["motion.kernel_sigma"],
                    num_segments=cfg["pretrain.K"])


def temporal_shift(x: torch.Tensor, shift_fraction: float) -> torch.Tensor:
    """Shift channel groups along time for a ``(T, C, H, W)`` or ``(B, T, C, H, W)`` sequence.

    The first ``floor(f*C)`` channels at time t take their value from t-1 and
    the next ``floor(f*C)`` from t+1; vacated slots are zero.
    """
    single = x.dim() == 4
    if single:
        x = x[None]
    if x.dim() != 5:
        raise ValueError(f"expected (T, C, H, W) or (B, T, C, H, W), got {tuple(x.shape)}")
    fold = int(math.floor(shift_fraction * x.shape[2] + 1e-9))
    out = torch.zeros_like(x)
    out[:, 1:, :fold] = x[:, :-1, :fold]
    out[:, :-1, fold:2 * fold] = x[:, 1:, fold:2 * fold]
    out[:, :, 2 * fold:] = x[:, :, 2 * fold:]
    return out[0] if single else out


def _norm(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(32, max(1, c // 4)), c)


class _Block(nn.Module):
    def __init__(self, cin, cout, stride, shift_fraction):
        super().__init__()
        self.shift_fraction = shift_fraction
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout))

    def forward(self, x, time: int | None):
        # x: (N, C, H, W) with N = batch * time when time is given
        branch = x
        if time is not None:
            N, C, H, W = x.shape
            branch = temporal_shift(x.reshape(N // time, time, C, H, W), self.shift_fraction).reshape(N, C, H, W)
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(self.residual(branch) + identity)


class BasicBlock(_Block):
    def __init__(self, cin, cout, stride, shift_fraction):
        super().__init__(cin, cout, stride, shift_fraction)
        self.residual = nn.Sequential(
            nn.Conv2d(cin, cout, 3, stride, 1, bias=False), _norm(cout), nn.ReLU(),
            nn.Conv2d(cout, cout, 3, 1, 1, bias=False), _norm(cout))


class Bottleneck(_Block):
    def __init__(self, cin, cout, stride, shift_fraction):
        super().__init__(cin, cout, stride, shift_fraction)
        mid = cout // 4
        self.residual = nn.Sequential(
            nn.Conv2d(cin, mid, 1, bias=False), _norm(mid), nn.ReLU(),
            nn.Conv2d(mid, mid, 3, stride, 1, bias=False), _norm(mid), nn.ReLU(),
            nn.Conv2d(mid, cout, 1, bias=False), _norm(cout))


class VideoEncoder(nn.Module):
    """Encodes ``(B, T, 3, S, S)`` frames in [0, 1] to per-frame embeddings ``(B, T, D)``."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c = config
        self.stem = nn.Sequential(
            nn.Conv2d(3, c.stem_channels, c.stem_kernel, 2, c.stem_kernel // 2, bias=False),
            _norm(c.stem_channels), nn.ReLU(), nn.MaxPool2d(3, 2, 1))
        block_cls = Bottleneck if c.block == "bottleneck" else BasicBlock
        stages = []
        cin = c.stem_channels
        for idx, (cout, n) in enumerate(zip(c.channels_per_stage, c.blocks_per_stage)):
            stride = 1 if idx == 0 else 2
            blocks = []
            for b in range(n):
                blocks.append(block_cls(cin, cout, stride if b == 0 else 1, c.tsm_shift_fraction))
                cin = cout
            stages.append(nn.ModuleList(blocks))
        self.stages = nn.ModuleList(stages)
        self.motion = None
        if c.motion_enabled:
            self.motion = MotionSqueeze(c.stage_channels(c.ms_insertion_stage), c.motion_radius,
                                        c.motion_temperature, c.motion_sigma)

    def forward(self, frames: torch.Tensor, temporal: bool | None = None,
                return_stage: int | None = None):
        """Return per-frame embeddings, plus the requested stage's output maps
        (taken before any motion fusion) as ``(B, T, C, H, W)``.

        With ``temporal=False`` frames never interact: each is encoded as a
        clip of length one, skipping temporal shift and motion fusion.
        """
        c = self.config
        if frames.dim() != 5 or frames.shape[2] != 3 or frames.shape[-1] != c.input_side \
                or frames.shape[-2] != c.input_side:
            raise ValueError(f"expected frames (B, T, 3, {c.input_side}, {c.input_side}), "
                             f"got {tuple(frames.shape)}")
        temporal = c.temporal_modules_enabled_default if temporal is None else temporal
        B, T = frames.shape[:2]
        if temporal and T < 2:
            raise ValueError("temporal modules need at least 2 frames per clip")
        x = (frames.reshape(B * T, *frames.shape[2:]) - PIXEL_MEAN) / PIXEL_STD
        x = self.stem(x)
        shift_time = T if (temporal and c.tsm_enabled) else None
        stage_out = None
        for idx, blocks in enumerate(self.stages):
            stage = idx + 2
            for block in blocks:
                x = block(x, shift_time)
            if stage == return_stage:
                stage_out = x.reshape(B, T, *x.shape[1:])
            if stage == c.ms_insertion_stage and temporal and self.motion is not None:
                x = self.motion(x.reshape(B, T, *x.shape[1:])).reshape(B * T, *x.shape[1:])
        emb = x.mean(dim=(2, 3)).reshape(B, T, -1)
        if return_stage is not None:
            return emb, stage_out
        return emb


def encode(encoder: VideoEncoder, frames: torch.Tensor, temporal_modules_enabled: bool = True,
           return_stage3: bool = False):
    return encoder(frames, temporal=temporal_modules_enabled,
                   return_stage=encoder.config.ms_insertion_stage if return_stage3 else None)


def projection_head(dim_in: int, dim_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim_in, dim_in), nn.ReLU(), nn.Linear(dim_in, dim_out))


class SlotAggregator(nn.Module):
    """Order-sensitive merge of K clip embeddings (concatenation then linear map).

    Initialised near plain averaging so early training behaves like the
    order-free consensus.
    """

    def __init__(self, dim: int, slots: int):
        super().__init__()
        self.slots = slots
        self.linear = nn.Linear(slots * dim, dim, bias=False)
        with torch.no_grad():
            eye = torch.eye(dim).repeat(1, slots) / slots
            self.linear.weight.mul_(0.1).add_(eye)

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        # clips: (B, K, D)
        return self.linear(clips.reshape(clips.shape[0], -1))


class Tower(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        d = config.embedding_dim
        self.encoder = VideoEncoder(config)
        self.heads = nn.ModuleDict({h: projection_head(d, config.projection_dim) for h in HEADS})
        self.slots = SlotAggregator(d, config.num_segments)

    def project(self, embedding: torch.Tensor, head: str) -> torch.Tensor:
        if head not in self.heads:
            raise KeyError(f"unknown projection head {head!r}; expected one of {HEADS}")
        if bool((embedding.norm(dim=-1) == 0).any()):
            raise ValueError("cannot project a zero embedding: its direction is undefined")
        out = self.heads[head](embedding)
        if bool((out.norm(dim=-1) == 0).any()):
            raise ValueError("projection produced a zero vector; normalisation undefined")
        return F.normalize(out, dim=-1)


class ContrastiveModel(nn.Module):
    """Query tower trained by gradient descent and its momentum-updated key copy."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.query = Tower(config)
        self.key = copy.deepcopy(self.query)
        for p in self.key.parameters():
            p.requires_grad_(False)

    def project(self, embedding: torch.Tensor, head: str, tower: str = "query") -> torch.Tensor:
        if tower not in ("query", "key"):
            raise KeyError(f"unknown tower {tower!r}")
        return getattr(self, tower).project(embedding, head)


@torch.no_grad()
def momentum_update(query: nn.Module, key: nn.Module, m: float) -> nn.Module:
    """``key <- m * key + (1 - m) * query`` for every parameter, in place."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    q_params = dict(query.named_parameters())
    k_params = dict(key.named_parameters())
    if q_params.keys() != k_params.keys():
        raise ValueError("query and key towers have different parameter structure")
    for name, pk in k_params.items():
        pq = q_params[name]
        if pq.shape != pk.shape:
            raise ValueError(f"parameter {name}: shape {tuple(pq.shape)} vs {tuple(pk.shape)}")
        pk.mul_(m).add_(pq.detach(), alpha=1.0 - m)
    return key


def save_checkpoint(path, *, stage: str, run_config: dict, encoder_config: EncoderConfig,
                    query=None, key=None, classifier=None, optimizer=None, meta=None):
    """Write a checkpoint map; key names are listed in the README."""
    torch.save({
        "magic": CHECKPOINT_MAGIC,
        "stage": stage,
        "run_config": dict(run_config),
        "encoder_config": asdict(encoder_config),
        "query": query,
        "key": key,
        "classifier": classifier,
        "optimizer": optimizer,
        "meta": meta or {},
    }, path)


def load_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    ckpt["encoder_config"] = EncoderConfig(**ckpt["encoder_config"])
    return ckpt
