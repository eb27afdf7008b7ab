"""MotionSqueeze: correlation between adjacent feature maps, displacement and
confidence estimation, and their transformation into residual motion features.

Internally everything is channel-first: a correlation volume is stored as
``(N, P*P, H, W)`` with displacement index ``i*P + j`` meaning
``(dy, dx) = (i - l, j - l)``. The public helpers :func:`correlation_volume`,
:func:`kernel_soft_argmax` and :func:`confidence_map` use the position-major
layout ``(..., H, W, P, P)`` instead. Displacements are returned as
``(dx, dy)`` in feature-grid units.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


def _check_pair(ft, ft1, radius):
    if ft.shape != ft1.shape:
        raise ValueError(f"feature maps differ in shape: {tuple(ft.shape)} vs {tuple(ft1.shape)}")
    if ft.dim() != 4:
        raise ValueError(f"expected (N, C, H, W) feature maps, got {tuple(ft.shape)}")
    if radius < 1:
        raise ValueError(f"displacement radius must be >= 1, got {radius}")


DENSE_MAX_POSITIONS = 1024


def correlation(ft: torch.Tensor, ft1: torch.Tensor, radius: int) -> torch.Tensor:
    """Channel-mean dot products ``(N, P*P, H, W)``; out-of-bounds targets score 0.

    Small maps go through one all-pairs batched matmul and a gather; larger
    ones loop over the P*P shifts to bound memory.
    """
    _check_pair(ft, ft1, radius)
    H, W = ft.shape[-2:]
    if H * W <= DENSE_MAX_POSITIONS:
        return _correlation_dense(ft, ft1, radius)
    return _correlation_shifted(ft, ft1, radius)


def _correlation_shifted(ft, ft1, radius):
    H, W = ft.shape[-2:]
    P = 2 * radius + 1
    padded = F.pad(ft1, (radius, radius, radius, radius))
    scores = [
        (ft * padded[:, :, i:i + H, j:j + W]).mean(dim=1)
        for i in range(P) for j in range(P)
    ]
    return torch.stack(scores, dim=1)


def _neighbour_index(H, W, radius, device):
    P = 2 * radius + 1
    ys, xs = torch.meshgrid(torch.arange(H, device=device), torch.arange(W, device=device), indexing="ij")
    off = torch.arange(-radius, radius + 1, device=device)
    ty = ys.reshape(-1, 1, 1) + off.reshape(1, P, 1)
    tx = xs.reshape(-1, 1, 1) + off.reshape(1, 1, P)
    valid = ((ty >= 0) & (ty < H) & (tx >= 0) & (tx < W)).reshape(H * W, P * P)
    index = (ty.clamp(0, H - 1) * W + tx.clamp(0, W - 1)).reshape(H * W, P * P)
    return index, valid


def _correlation_dense(ft, ft1, radius):
    N, C, H, W = ft.shape
    P = 2 * radius + 1
    allpairs = torch.bmm(ft.reshape(N, C, H * W).transpose(1, 2), ft1.reshape(N, C, H * W)) / C
    index, valid = _neighbour_index(H, W, radius, ft.device)
    picked = torch.gather(allpairs, 2, index.expand(N, -1, -1)) * valid.to(ft.dtype)
    return picked.transpose(1, 2).reshape(N, P * P, H, W)


def _offsets(radius: int, device=None, dtype=None) -> torch.Tensor:
    """(P*P, 2) table of (dx, dy) per flat displacement index."""
    r = torch.arange(-radius, radius + 1, device=device, dtype=dtype)
    dy, dx = torch.meshgrid(r, r, indexing="ij")
    return torch.stack([dx.reshape(-1), dy.reshape(-1)], dim=1)


def soft_argmax(volume: torch.Tensor, radius: int, temperature: float, sigma: float) -> torch.Tensor:
    """Kernel soft-argmax over a ``(N, P*P, H, W)`` volume, returning ``(N, 2, H, W)``.

    The softmax logits are the scores modulated by a Gaussian centred on the
    hard argmax (first maximum in row-major order), which stays a constant
    for differentiation.
    """
    if temperature <= 0 or sigma <= 0:
        raise ValueError("temperature and sigma must be positive")
    P = 2 * radius + 1
    if volume.shape[1] != P * P:
        raise ValueError(f"volume has {volume.shape[1]} displacements, expected {P * P}")
    offsets = _offsets(radius, volume.device, volume.dtype)  # (P², 2)
    with torch.no_grad():
        best = volume.argmax(dim=1)  # (N, H, W)
        centre = offsets[best]  # (N, H, W, 2)
        d2 = ((offsets[:, None, None, None, :] - centre[None]) ** 2).sum(-1)  # (P², N, H, W)
        kernel = torch.exp(-d2 / (2 * sigma ** 2)).permute(1, 0, 2, 3)
    weights = torch.softmax(kernel * volume / temperature, dim=1)
    return torch.einsum("nkhw,kc->nchw", weights, offsets)


def confidence(volume: torch.Tensor) -> torch.Tensor:
    return volume.max(dim=1, keepdim=True).values


def _to_position_major(vol: torch.Tensor, radius: int) -> torch.Tensor:
    P = 2 * radius + 1
    N, _, H, W = vol.shape
    return vol.reshape(N, P, P, H, W).permute(0, 3, 4, 1, 2)


def _from_position_major(volume: torch.Tensor):
    *lead, H, W, P, P2 = volume.shape
    if P != P2 or P % 2 == 0:
        raise ValueError(f"displacement axes must be square and odd, got {(P, P2)}")
    flat = volume.reshape(-1, H, W, P * P).permute(0, 3, 1, 2)
    return flat, lead, (P - 1) // 2


def correlation_volume(ft: torch.Tensor, ft1: torch.Tensor, radius: int) -> torch.Tensor:
    """Correlation of ``ft`` against ``ft1`` as ``(..., H, W, P, P)``.

    Accepts ``(C, H, W)`` or ``(N, C, H, W)`` inputs;
    ``out[..., y, x, i, j] = mean_c ft[c, y, x] * ft1[c, y + i - l, x + j - l]``.
    """
    single = ft.dim() == 3
    if single:
        ft, ft1 = ft[None], ft1[None]
    vol = _to_position_major(correlation(ft, ft1, radius), radius)
    return vol[0] if single else vol


def kernel_soft_argmax(volume: torch.Tensor, temperature: float = 0.01, sigma: float = 5.0) -> torch.Tensor:
    flat, lead, radius = _from_position_major(volume)
    disp = soft_argmax(flat, radius, temperature, sigma).permute(0, 2, 3, 1)
    return disp.reshape(*lead, *disp.shape[1:])


def confidence_map(volume: torch.Tensor) -> torch.Tensor:
    flat, lead, _ = _from_position_major(volume)
    conf = confidence(flat).permute(0, 2, 3, 1)
    return conf.reshape(*lead, *conf.shape[1:])


class SeparableConv(nn.Module):
    """Depthwise 3x3 then pointwise 1x1, each followed by GroupNorm and ReLU."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.depthwise = nn.Conv2d(cin, cin, 3, padding=1, groups=cin, bias=False)
        self.norm1 = nn.GroupNorm(1, cin)
        self.pointwise = nn.Conv2d(cin, cout, 1, bias=False)
        self.norm2 = nn.GroupNorm(1, cout)

    def forward(self, x):
        x = F.relu(self.norm1(self.depthwise(x)))
        return F.relu(self.norm2(self.pointwise(x)))


class MotionTransform(nn.Sequential):
    """Maps a (dx, dy, confidence) tensor to ``channels`` motion features."""

    def __init__(self, channels: int):
        if channels % 4:
            raise ValueError(f"motion channels must be divisible by 4, got {channels}")
        q = channels // 4
        super().__init__(
            SeparableConv(3, q),
            SeparableConv(q, q),
            SeparableConv(q, 2 * q),
            SeparableConv(2 * q, channels),
        )
        self.channels = channels


def transform_motion(transform: MotionTransform, displacement_plus_confidence: torch.Tensor) -> torch.Tensor:
    """Apply ``transform`` to an ``(H, W, 3)`` or ``(N, H, W, 3)`` tensor, returning ``(..., H, W, C)``."""
    x = displacement_plus_confidence
    single = x.dim() == 3
    if single:
        x = x[None]
    if x.shape[-1] != 3:
        raise ValueError(f"expected 3 trailing channels (dx, dy, confidence), got {x.shape[-1]}")
    out = transform(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
    return out[0] if single else out


class MotionSqueeze(nn.Module):
    """Fuses motion features into a clip of feature maps: ``F' = F + M``.

    Motion for step ``t`` is estimated from frames ``t`` and ``t + 1``; the
    last frame reuses the motion of the previous pair.
    """

    def __init__(self, channels: int, radius: int = 7, temperature: float = 0.01, sigma: float = 5.0):
        super().__init__()
        self.radius = radius
        self.temperature = temperature
        self.sigma = sigma
        self.transform = MotionTransform(channels)

    def displacement_tensor(self, clip: torch.Tensor) -> torch.Tensor:
        """(B, T-1, 3, H, W) displacement and confidence between adjacent frames."""
        B, T, C, H, W = clip.shape
        if T < 2:
            raise ValueError(f"motion needs at least 2 frames, got {T}")
        ft = clip[:, :-1].reshape(-1, C, H, W)
        ft1 = clip[:, 1:].reshape(-1, C, H, W)
        vol = correlation(ft, ft1, self.radius)
        disp = soft_argmax(vol, self.radius, self.temperature, self.sigma)
        d = torch.cat([disp, confidence(vol)], dim=1)
        return d.reshape(B, T - 1, 3, H, W)

    def motion_features(self, clip: torch.Tensor) -> torch.Tensor:
        B, T, C, H, W = clip.shape
        d = self.displacement_tensor(clip)
        m = self.transform(d.reshape(-1, 3, H, W)).reshape(B, T - 1, C, H, W)
        return torch.cat([m, m[:, -1:]], dim=1)

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        single = clip.dim() == 4
        if single:
            clip = clip[None]
        out = clip + self.motion_features(clip)
        return out[0] if single else out


def motion_squeeze(module: MotionSqueeze, clip_features: torch.Tensor) -> torch.Tensor:
    return module(clip_features)
