"""Conditional pixel-space denoiser with object cross-attention and a mask head.

The U-Net sees ``[x_t, position_mask, background]`` (7 channels), folded into
2x2 patches so the convolutions run at half resolution.  Object tokens come
from a small convolutional encoder followed by a per-token MLP adaptor and
enter every resolution level through single-head cross-attention with no
positional encoding over tokens.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import GROUPS, StageCheckpoint, group_of
from .masks import BBox

SCALES = (1.0, 0.75, 0.5, 0.25)
GATE_INIT = 2.0  # initial gate logit, sigmoid(2) ~ 0.88


@dataclass(frozen=True)
class ModelConfig:
    canvas: int = 64
    patch: int = 2
    channels: tuple[int, ...] = (32, 64, 96)
    time_dim: int = 64
    attn_dim: int = 32
    groups: int = 8
    encoder_input: int = 32
    encoder_channels: tuple[int, int, int, int] = (16, 32, 64, 64)
    token_dim: int = 128
    combine: str = "average"  # how multiscale tokens are merged: average | concatenate
    bg_gate: bool = True  # gated background-copy eps term in the eps head
    film: bool = True  # timestep embedding as GroupNorm scale and shift

    @property
    def tokens(self) -> int:
        return (self.encoder_input // 8) ** 2

    def to_json(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["encoder_channels"] = tuple(d["encoder_channels"])
        return cls(**d)


MICRO_CONFIG = ModelConfig(canvas=8, patch=2, channels=(4, 8), time_dim=8, attn_dim=4, groups=2,
                           encoder_input=16, encoder_channels=(4, 4, 8, 8), token_dim=8)


# ---------------------------------------------------------------- schedule


def linear_betas(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> np.ndarray:
    return np.linspace(beta_start, beta_end, T, dtype=np.float64)


class NoiseSchedule:
    def __init__(self, betas: np.ndarray):
        self.betas = np.asarray(betas, dtype=np.float64)
        self.T = len(self.betas)
        self.alpha_bar = np.cumprod(1.0 - self.betas)

    def q_sample(self, x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
        ab = torch.as_tensor(self.alpha_bar, dtype=x0.dtype)[t].view(-1, 1, 1, 1)
        return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


# ---------------------------------------------------------------- layers


def _gn(c: int, groups: int) -> nn.GroupNorm:
    g = math.gcd(c, groups)
    return nn.GroupNorm(g, c)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int, groups: int, film: bool = False):
        super().__init__()
        self.film = film
        self.norm1 = _gn(cin, groups)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, 2 * cout if film else cout)
        self.norm2 = _gn(cout, groups)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        e = self.temb(temb)[:, :, None, None]
        if self.film:
            scale, shift = e.chunk(2, dim=1)
            h = self.norm2(h) * (1 + scale) + shift
        else:
            h = self.norm2(h + e)
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    def __init__(self, channels: int, token_dim: int, attn_dim: int, groups: int):
        super().__init__()
        self.norm = _gn(channels, groups)
        self.q = nn.Conv2d(channels, attn_dim, 1, bias=False)
        self.k = nn.Linear(token_dim, attn_dim, bias=False)
        self.v = nn.Linear(token_dim, attn_dim, bias=False)
        self.out = nn.Conv2d(attn_dim, channels, 1)
        self.scale = attn_dim ** -0.5

    def forward(self, x, tokens):
        b, _, h, w = x.shape
        q = self.q(self.norm(x)).flatten(2).transpose(1, 2)  # (B, HW, A)
        k = self.k(tokens)  # (B, K, A)
        v = self.v(tokens)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        o = (attn @ v).transpose(1, 2).reshape(b, -1, h, w)
        return x + self.out(o)


class Level(nn.Module):
    def __init__(self, cin, cout, cfg: ModelConfig):
        super().__init__()
        self.res = ResBlock(cin, cout, cfg.time_dim, cfg.groups, cfg.film)
        self.attn = CrossAttention(cout, cfg.token_dim, cfg.attn_dim, cfg.groups)

    def forward(self, x, temb, tokens):
        return self.attn(self.res(x, temb), tokens)


class UNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        p2 = cfg.patch ** 2
        ch = cfg.channels
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(),
                                      nn.Linear(cfg.time_dim, cfg.time_dim))
        self.conv_in = nn.Conv2d(7 * p2, ch[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        for i, c in enumerate(ch):
            self.down.append(Level(ch[0] if i == 0 else c, c, cfg))
            if i + 1 < len(ch):
                self.downsample.append(nn.Conv2d(c, ch[i + 1], 3, stride=2, padding=1))
        self.mid = Level(ch[-1], ch[-1], cfg)
        self.upsample = nn.ModuleList()
        self.up = nn.ModuleList()
        for i in reversed(range(len(ch) - 1)):
            self.upsample.append(nn.Conv2d(ch[i + 1], ch[i], 3, padding=1))
            self.up.append(Level(2 * ch[i], ch[i], cfg))
        self.norm_out = _gn(ch[0], cfg.groups)
        self.eps_out = nn.Conv2d(ch[0], 3 * p2, 3, padding=1)
        if cfg.bg_gate:
            # per-pixel gate (pixel-shuffled like eps) on the background-copy eps; starts mostly open
            self.eps_gate = nn.Conv2d(ch[0], p2, 1)
            nn.init.zeros_(self.eps_gate.weight)
            nn.init.constant_(self.eps_gate.bias, GATE_INIT)
        self.time_dim = cfg.time_dim

    def features(self, x, t, tokens):
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(x.dtype))
        h = self.conv_in(x)
        skips = []
        for i, level in enumerate(self.down):
            h = level(h, temb, tokens)
            if i < len(self.downsample):
                skips.append(h)
                h = self.downsample[i](h)
        h = self.mid(h, temb, tokens)
        for up, level in zip(self.upsample, self.up):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = level(torch.cat([h, skips.pop()], 1), temb, tokens)
        return F.silu(self.norm_out(h))


class ObjectEncoder(nn.Module):
    """Four conv blocks (strides 2, 2, 2, 1) mapping RGBA to a grid of tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = (4,) + tuple(cfg.encoder_channels)
        strides = (2, 2, 2, 1)
        self.blocks = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=strides[i], padding=1) for i in range(4)
        )

    def forward(self, x):
        h = x
        for i, conv in enumerate(self.blocks):
            h = conv(h)
            if i < 3:
                h = F.silu(h)
        return h.flatten(2).transpose(1, 2)  # (B, K, C)


class ContentAdaptor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.encoder_channels[-1]
        self.fc1 = nn.Linear(c, cfg.token_dim)
        self.fc2 = nn.Linear(cfg.token_dim, cfg.token_dim)

    def forward(self, x):
        return self.fc2(F.silu(self.fc1(x)))


class DenoiserOutput(NamedTuple):
    eps_hat: torch.Tensor  # (B, 3, H, W)
    mask_logits: torch.Tensor  # (B, 1, H, W)


class CompositorNet(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.unet = UNet(cfg)
        self.encoder = ObjectEncoder(cfg)
        self.adaptor = ContentAdaptor(cfg)
        self.mask_head = nn.Conv2d(cfg.channels[0], cfg.patch ** 2, 1)
        nn.init.zeros_(self.mask_head.weight)
        nn.init.zeros_(self.mask_head.bias)
        self.betas = linear_betas()
        self.stage_tag = "init"

    @property
    def T(self) -> int:
        return len(self.betas)

    def group_parameters(self, group: str) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if group_of(n) == group]

    # -- checkpoint conversion
    @classmethod
    def from_checkpoint(cls, ckpt: StageCheckpoint, dtype=torch.float32) -> "CompositorNet":
        net = cls(ModelConfig.from_json(ckpt.model_config)).to(dtype)
        state = {k: torch.from_numpy(np.array(v)).to(dtype) for k, v in ckpt.parameters.items()}
        net.load_state_dict(state, strict=True)
        net.stage_tag = ckpt.stage_tag
        net.betas = ckpt.betas.copy()
        return net

    def to_checkpoint(self, stage_tag: str, betas: np.ndarray | None = None,
                      trainable: Sequence[str] = ()) -> StageCheckpoint:
        betas = self.betas if betas is None else betas
        params = {k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()}
        flags = {g: g in trainable for g in GROUPS}
        return StageCheckpoint(params, stage_tag, betas, flags, self.cfg.to_json())


def init_checkpoint(cfg: ModelConfig = ModelConfig(), seed: int = 0, betas: np.ndarray | None = None,
                    dtype=torch.float32) -> StageCheckpoint:
    torch.manual_seed(seed)
    net = CompositorNet(cfg).to(dtype)
    return net.to_checkpoint("init", linear_betas() if betas is None else betas)


def as_net(model) -> CompositorNet:
    if isinstance(model, CompositorNet):
        return model
    if isinstance(model, StageCheckpoint):
        return CompositorNet.from_checkpoint(model)
    raise TypeError(f"expected CompositorNet or StageCheckpoint, got {type(model).__name__}")


# ---------------------------------------------------------------- object encoding


def sprite_tensor(sprite, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 4) or (B, H, W, 4) array in [0, 1] -> (B, 4, H, W) in [-1, 1]."""
    x = torch.as_tensor(np.asarray(sprite), dtype=dtype)
    if x.ndim == 3:
        x = x[None]
    return x.permute(0, 3, 1, 2) * 2 - 1


def rescale_sprite(x: torch.Tensor, scale: float, size: int) -> torch.Tensor:
    """Bicubic downsample by ``scale`` then resample to ``size`` x ``size``."""
    if scale not in SCALES:
        raise ValueError(f"invalid scale {scale}; expected one of {SCALES}")
    h, w = x.shape[-2:]
    if scale != 1.0:
        x = F.interpolate(x, size=(max(1, round(h * scale)), max(1, round(w * scale))),
                          mode="bicubic", align_corners=False, antialias=True)
    if x.shape[-2:] != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bicubic", align_corners=False,
                          antialias=x.shape[-1] > size)
    return x


def encode_object(sprite, model, scale: float = 1.0) -> torch.Tensor:
    """Tokens ``(B, K, D)`` for a sprite at one scale (encoder then adaptor)."""
    net = as_net(model)
    dtype = next(net.parameters()).dtype
    x = sprite if isinstance(sprite, torch.Tensor) else sprite_tensor(sprite, dtype)
    x = rescale_sprite(x, scale, net.cfg.encoder_input)
    return net.adaptor(net.encoder(x))


def encoder_features(sprite, model) -> torch.Tensor:
    """Raw encoder tokens at scale 1, without the adaptor."""
    net = as_net(model)
    dtype = next(net.parameters()).dtype
    x = sprite if isinstance(sprite, torch.Tensor) else sprite_tensor(sprite, dtype)
    return net.encoder(rescale_sprite(x, 1.0, net.cfg.encoder_input))


@dataclass
class MultiscaleEmbedding:
    tokens: torch.Tensor  # (B, K', D)
    scales_used: list[float] = field(default_factory=list)
    mode: str = "average"


def combine_scales(per_scale: Sequence[torch.Tensor], mode: str) -> torch.Tensor:
    if mode == "average":
        total = per_scale[0]
        for tok in per_scale[1:]:
            total = total + tok
        return total / len(per_scale)
    if mode == "concatenate":
        return torch.cat(list(per_scale), dim=1)
    raise ValueError(f"unknown combination mode {mode!r}")


def multiscale_embedding(sprite, model, mode: str = "average", scale: float = 1.0) -> MultiscaleEmbedding:
    """Embed at every scale and average (or concatenate); ``mode="single"`` uses ``scale`` only."""
    if mode == "single":
        return MultiscaleEmbedding(encode_object(sprite, model, scale), [scale], "single")
    if mode not in ("average", "concatenate"):
        raise ValueError(f"unknown embedding mode {mode!r}")
    per = [encode_object(sprite, model, s) for s in SCALES]
    return MultiscaleEmbedding(combine_scales(per, mode), list(SCALES), mode)


def uses_multiscale(stage_tag: str) -> bool:
    return stage_tag in ("S5", "S6")


def object_conditioning(model, sprite, multiscale: bool) -> torch.Tensor:
    """Tokens used by the denoiser: scale-1 tokens, or all scales merged per ``cfg.combine``."""
    net = as_net(model)
    if not multiscale:
        return encode_object(sprite, net, 1.0)
    return combine_scales([encode_object(sprite, net, s) for s in SCALES], net.cfg.combine)


# ---------------------------------------------------------------- position mask


def make_position_mask(bbox, canvas: tuple[int, int] = (64, 64)) -> np.ndarray:
    """All -1 without a bbox; otherwise 1 inside the half-open box and 0 outside.

    ``canvas`` is ``(height, width)``.
    """
    h, w = canvas
    if bbox is None:
        return np.full((h, w), -1.0, dtype=np.float32)
    box = BBox.coerce(bbox)
    if not box.inside(w, h):
        raise ValueError(f"bbox {box.as_tuple()} outside canvas {canvas}")
    return box.to_mask(h, w).astype(np.float32)


def is_position_mask(m: np.ndarray) -> bool:
    m = np.asarray(m)
    if np.all(m == -1):
        return True
    return bool(np.all((m == 0) | (m == 1)) and np.any(m == 1))


# ---------------------------------------------------------------- denoiser


def denoise(model, x_t: torch.Tensor, t, pmask: torch.Tensor, background: torch.Tensor,
            cond) -> DenoiserOutput:
    """One U-Net evaluation on batched tensors.

    ``x_t``/``background``: (B, 3, H, W); ``pmask``: (B, 1, H, W);
    ``cond``: MultiscaleEmbedding or (B, K, D) tokens; ``t``: int or (B,).
    """
    net = as_net(model)
    tokens = cond.tokens if isinstance(cond, MultiscaleEmbedding) else cond
    b = x_t.shape[0]
    if x_t.shape[1] != 3 or background.shape != x_t.shape or pmask.shape != (b, 1) + tuple(x_t.shape[2:]):
        raise ValueError(f"shape mismatch: x_t {tuple(x_t.shape)}, pmask {tuple(pmask.shape)}, "
                         f"background {tuple(background.shape)}")
    p = net.cfg.patch
    if x_t.shape[-1] % p or x_t.shape[-2] % p:
        raise ValueError(f"spatial size {tuple(x_t.shape[-2:])} not divisible by patch {p}")
    t = torch.as_tensor(t, dtype=torch.long)
    if t.ndim == 0:
        t = t.expand(b)
    T = net.T
    if bool((t < 0).any()) or bool((t >= T).any()):
        raise ValueError(f"timestep out of range [0, {T})")
    x = F.pixel_unshuffle(torch.cat([x_t, pmask, background], 1), p)
    feats = net.unet.features(x, t, tokens)
    eps = F.pixel_shuffle(net.unet.eps_out(feats), p)
    if net.cfg.bg_gate:
        # where the gate is open the target is the eps that maps x_t back onto the background
        ab = torch.as_tensor(NoiseSchedule(net.betas).alpha_bar, dtype=x_t.dtype)[t].view(-1, 1, 1, 1)
        gate = torch.sigmoid(F.pixel_shuffle(net.unet.eps_gate(feats), p))
        eps = eps + gate * (x_t - ab.sqrt() * background) / (1 - ab).sqrt()
    logits = F.pixel_shuffle(net.mask_head(feats), p)
    return DenoiserOutput(eps, logits)
