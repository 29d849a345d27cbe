"""Image <-> latent codecs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import Latent


class CodecError(ValueError):
    pass


@runtime_checkable
class Codec(Protocol):
    downsample_factor: int
    reconstruction_tolerance: float

    def encode(self, x: torch.Tensor) -> Latent: ...

    def decode(self, z: Latent) -> torch.Tensor: ...


def check_image(x: torch.Tensor, factor: int) -> None:
    if x.ndim not in (3, 4) or x.shape[-3] != 3:
        raise CodecError(f"expected image (3, H, W) or (B, 3, H, W), got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise CodecError(f"image size {h}x{w} not divisible by downsample factor {factor}")


class IdentityCodec:
    """Latent space == pixel space. Exact in both directions for in-range images."""

    downsample_factor = 1
    latent_channels = 3
    reconstruction_tolerance = 0.0

    def encode(self, x: torch.Tensor) -> Latent:
        check_image(x, 1)
        return Latent(x.clone(), 0)

    def decode(self, z: Latent) -> torch.Tensor:
        if z.data.ndim not in (3, 4) or z.data.shape[-3] != 3:
            raise CodecError(f"latent shape {tuple(z.data.shape)} does not match identity codec")
        return z.data.clamp(0.0, 1.0)

    def state_dict(self) -> dict:
        return {}


class ConvAutoencoder(nn.Module):
    """Small convolutional autoencoder with a 4x spatial downsampling factor."""

    downsample_factor = 4

    def __init__(self, latent_channels: int = 4, hidden: int = 32):
        super().__init__()
        self.latent_channels = latent_channels
        self.hidden = hidden
        self.encoder = nn.Sequential(
            nn.Conv2d(3, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, 2 * hidden, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * hidden, latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, 2 * hidden, 3, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(2 * hidden, hidden, 4, stride=2, padding=1), nn.SiLU(),
            nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, 3, 3, padding=1),
        )
        self.register_buffer("_tolerance", torch.tensor(math.inf, dtype=torch.float64))

    @property
    def reconstruction_tolerance(self) -> float:
        return float(self._tolerance)

    @reconstruction_tolerance.setter
    def reconstruction_tolerance(self, value: float) -> None:
        self._tolerance.fill_(value)

    @torch.no_grad()
    def encode(self, x: torch.Tensor) -> Latent:
        check_image(x, self.downsample_factor)
        single = x.ndim == 3
        z = self.encoder(x[None] if single else x)
        return Latent(z[0] if single else z, 0)

    @torch.no_grad()
    def decode(self, z: Latent) -> torch.Tensor:
        d = z.data
        if d.ndim not in (3, 4) or d.shape[-3] != self.latent_channels:
            raise CodecError(f"latent shape {tuple(d.shape)} does not match codec ({self.latent_channels} channels)")
        single = d.ndim == 3
        x = self.decoder(d[None] if single else d)
        x = x.clamp(0.0, 1.0)
        return x[0] if single else x

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


@dataclass
class CodecTrainReport:
    loss_curve: list[tuple[int, float]]
    initial_val_error: float
    val_error: float
    tolerance: float


def reconstruction_error(codec, images: torch.Tensor) -> float:
    """Mean per-pixel absolute error of decode(encode(x))."""
    return float((codec.decode(codec.encode(images)) - images).abs().mean())


def train_codec(codec: ConvAutoencoder, train: torch.Tensor, val: torch.Tensor, steps: int = 500,
                lr: float = 2e-3, batch_size: int = 32, seed: int = 0) -> CodecTrainReport:
    """Plain L2 reconstruction training; declares the tolerance from the validation error."""
    gen = torch.Generator().manual_seed(seed)
    initial = reconstruction_error(codec, val)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    curve = []
    codec.train()
    for step in range(steps):
        idx = torch.randint(0, train.shape[0], (min(batch_size, train.shape[0]),), generator=gen)
        x = train[idx]
        loss = F.mse_loss(codec.reconstruct(x), x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append((step, loss.item()))
    codec.eval()
    err = reconstruction_error(codec, val)
    per_image = (codec.decode(codec.encode(val)) - val).abs().flatten(1).mean(1)
    # declared bound: worst validation image, with a little headroom
    codec.reconstruction_tolerance = float(per_image.max()) * 1.1 + 1e-6
    return CodecTrainReport(curve, initial, err, codec.reconstruction_tolerance)
