"""Encoder, latent-modulated denoising UNet, and checkpoint IO.

The encoder maps a clean image to a semantic latent z.  The denoiser is a
UNet over the noised image x_t, conditioned on the timestep through
sinusoidal embeddings added per block, and on z through modulated group
normalization in the bottleneck and decoder blocks:

    out = normalize(h) * (1 + scale(z)) + bias(z)

with channelwise scale/bias projected linearly from z.  The scale
projection starts at zero so every modulated block begins as an identity
modulation, and the output convolution starts at zero so the first
prediction of an untrained model is exactly zero.  The denoiser predicts
the clean image directly rather than the noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .control import AttributeRegressor, ShiftEstimator

__all__ = [
    "ModelConfig",
    "sinusoidal_time_embedding",
    "LatentModulatedGroupNorm",
    "ImageEncoder",
    "Denoiser",
    "ProgressionModel",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters for all four networks."""

    image_height: int = 64
    image_width: int = 64
    latent_dim: int = 64
    shift_dim: int = 8
    enc_channels: tuple[int, ...] = (32, 64, 96, 128)
    unet_channels: tuple[int, ...] = (32, 64, 96)
    groups: int = 8
    time_dim: int = 64
    regressor_channels: tuple[int, ...] = (16, 32, 64)

    def __post_init__(self) -> None:
        if not 0 < self.shift_dim < self.latent_dim:
            raise ValueError(
                f"need 0 < shift_dim < latent_dim, got "
                f"{self.shift_dim} vs {self.latent_dim}"
            )
        if self.time_dim % 2 != 0:
            raise ValueError("time_dim must be even")
        for name, chans in (
            ("enc_channels", self.enc_channels),
            ("unet_channels", self.unet_channels),
            ("regressor_channels", self.regressor_channels),
        ):
            if len(chans) < 2:
                raise ValueError(f"{name} needs at least two levels")
            if any(c % self.groups for c in chans):
                raise ValueError(f"{name} must all be divisible by groups={self.groups}")
        for size, levels in (
            (self.image_height, len(self.enc_channels)),
            (self.image_width, len(self.enc_channels)),
            (self.image_height, len(self.unet_channels)),
            (self.image_width, len(self.unet_channels)),
        ):
            if size % (1 << (levels - 1)):
                raise ValueError(
                    f"image size {size} not divisible by 2^{levels - 1} "
                    "(network downsampling depth)"
                )

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in data:
                continue
            value = data[f.name]
            kwargs[f.name] = tuple(value) if isinstance(value, list) else value
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        return cls(**kwargs)


def sinusoidal_time_embedding(
    t: torch.Tensor, dim: int, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Standard sin/cos positional features of integer timesteps, (B, dim)."""
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    device = t.device
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=dtype, device=device) / (half - 1)
    )
    args = t.to(dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class LatentModulatedGroupNorm(nn.Module):
    """Group normalization whose affine terms are predicted from a latent.

    With the projection at its zero initialization the module reduces to
    plain (affine-free) group normalization.
    """

    def __init__(self, channels: int, latent_dim: int, groups: int, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.groups = groups
        self.eps = eps
        self.proj = nn.Linear(latent_dim, 2 * channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, h: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        if z.shape[0] != h.shape[0]:
            raise ValueError(
                f"latent batch {z.shape[0]} does not match feature batch {h.shape[0]}"
            )
        normed = F.group_norm(h, self.groups, eps=self.eps)
        scale, bias = self.proj(z).chunk(2, dim=1)
        return normed * (1.0 + scale[:, :, None, None]) + bias[:, :, None, None]


class ResBlock(nn.Module):
    """3x3 residual block with optional timestep and latent conditioning."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        groups: int,
        time_dim: int | None = None,
        latent_dim: int | None = None,
    ):
        super().__init__()
        self.modulated = latent_dim is not None
        if self.modulated:
            self.norm1 = LatentModulatedGroupNorm(c_in, latent_dim, groups)
            self.norm2 = LatentModulatedGroupNorm(c_out, latent_dim, groups)
        else:
            self.norm1 = nn.GroupNorm(groups, c_in)
            self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out) if time_dim is not None else None
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(
        self,
        x: torch.Tensor,
        t_emb: torch.Tensor | None = None,
        z: torch.Tensor | None = None,
    ) -> torch.Tensor:
        h = self.norm1(x, z) if self.modulated else self.norm1(x)
        h = self.conv1(F.silu(h))
        if self.time_proj is not None:
            if t_emb is None:
                raise ValueError("block expects a timestep embedding")
            h = h + self.time_proj(F.silu(t_emb))[:, :, None, None]
        h = self.norm2(h, z) if self.modulated else self.norm2(h)
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class ImageEncoder(nn.Module):
    """Clean image -> semantic latent z of dimension latent_dim."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        chans = config.enc_channels
        self.stem = nn.Conv2d(1, chans[0], 3, padding=1)
        blocks = []
        downs = []
        prev = chans[0]
        for i, c in enumerate(chans):
            blocks.append(ResBlock(prev, c, config.groups))
            downs.append(
                nn.Conv2d(c, c, 3, stride=2, padding=1) if i < len(chans) - 1 else nn.Identity()
            )
            prev = c
        self.blocks = nn.ModuleList(blocks)
        self.downs = nn.ModuleList(downs)
        self.out_norm = nn.GroupNorm(config.groups, chans[-1])
        self.head = nn.Linear(chans[-1], config.latent_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.stem(x)
        for block, down in zip(self.blocks, self.downs):
            h = down(block(h))
        h = F.silu(self.out_norm(h))
        h = h.mean(dim=(2, 3))
        return self.head(h)


class Denoiser(nn.Module):
    """UNet predicting the clean image from (x_t, t, z).

    Timestep conditioning reaches every block; latent modulation is applied
    only in the bottleneck and decoder blocks, keeping the contracting path
    a purely image-driven feature extractor.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        chans = config.unet_channels
        d = config.latent_dim
        t_dim = config.time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(t_dim, t_dim * 2), nn.SiLU(), nn.Linear(t_dim * 2, t_dim)
        )
        self.stem = nn.Conv2d(1, chans[0], 3, padding=1)
        self.down_blocks = nn.ModuleList(
            [
                ResBlock(chans[max(i - 1, 0)], c, config.groups, time_dim=t_dim)
                for i, c in enumerate(chans)
            ]
        )
        self.downs = nn.ModuleList(
            [
                nn.Conv2d(c, c, 3, stride=2, padding=1)
                if i < len(chans) - 1
                else nn.Identity()
                for i, c in enumerate(chans)
            ]
        )
        self.mid1 = ResBlock(chans[-1], chans[-1], config.groups, time_dim=t_dim, latent_dim=d)
        self.mid2 = ResBlock(chans[-1], chans[-1], config.groups, time_dim=t_dim, latent_dim=d)
        ups = []
        up_blocks = []
        for i in reversed(range(len(chans) - 1)):
            ups.append(nn.Conv2d(chans[i + 1], chans[i], 3, padding=1))
            up_blocks.append(
                ResBlock(2 * chans[i], chans[i], config.groups, time_dim=t_dim, latent_dim=d)
            )
        self.ups = nn.ModuleList(ups)
        self.up_blocks = nn.ModuleList(up_blocks)
        self.out_norm = nn.GroupNorm(config.groups, chans[0])
        self.out_conv = nn.Conv2d(chans[0], 1, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(
        self, x_t: torch.Tensor, t: int | torch.Tensor, z: torch.Tensor
    ) -> torch.Tensor:
        if x_t.ndim != 4 or x_t.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) input, got {tuple(x_t.shape)}")
        if isinstance(t, (int, np.integer)):
            t = torch.full((x_t.shape[0],), int(t), dtype=torch.long, device=x_t.device)
        if t.shape[0] != x_t.shape[0]:
            raise ValueError("per-sample timesteps must match the batch size")
        t_emb = self.time_mlp(
            sinusoidal_time_embedding(t, self.config.time_dim, dtype=x_t.dtype)
        )
        h = self.stem(x_t)
        skips = []
        for block, down in zip(self.down_blocks, self.downs):
            h = block(h, t_emb)
            skips.append(h)
            h = down(h)
        h = self.mid1(h, t_emb, z)
        h = self.mid2(h, t_emb, z)
        for up, block, skip in zip(self.ups, self.up_blocks, reversed(skips[:-1])):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = up(h)
            h = block(torch.cat([h, skip], dim=1), t_emb, z)
        return self.out_conv(F.silu(self.out_norm(h)))


class ProgressionModel(nn.Module):
    """Bundle of the four trainable networks.

    encoder E (image -> z), denoiser D (x_t, t, z -> clean prediction),
    shifter A (attributes -> progression-subspace shift), and regressor R
    (image triple -> attribute logits).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = ImageEncoder(config)
        self.denoiser = Denoiser(config)
        self.shifter = ShiftEstimator(config.shift_dim)
        self.regressor = AttributeRegressor(config.regressor_channels, config.groups)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def denoise(self, x_t: torch.Tensor, t, z: torch.Tensor) -> torch.Tensor:
        return self.denoiser(x_t, t, z)


def save_checkpoint(path: str, model: ProgressionModel, extra: dict | None = None) -> None:
    """Persist config and weights; float32 arrays survive bit-exactly."""
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "extra": extra or {},
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)}
    for name, tensor in model.state_dict().items():
        arrays[f"param/{name}"] = tensor.detach().cpu().numpy()
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str) -> tuple[ProgressionModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, extra metadata)."""
    with np.load(path) as data:
        if "meta" not in data:
            raise ValueError(f"{path}: not a model checkpoint (missing meta entry)")
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        version = meta.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint format version {version!r}, "
                f"expected {CHECKPOINT_FORMAT_VERSION}"
            )
        config = ModelConfig.from_dict(meta["config"])
        state = {
            name[len("param/"):]: torch.from_numpy(np.array(data[name]))
            for name in data.files
            if name.startswith("param/")
        }
    model = ProgressionModel(config)
    model.load_state_dict(state, strict=True)
    return model, meta.get("extra", {})
