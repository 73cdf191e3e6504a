"""Image-side networks: an encoder projecting a source image into the
generator's latent space, the tri-plane generator (which also exposes its
pre-projection intermediate feature map), a compensation network predicting
an additive detail volume from the source image via BN-free modulation
blocks, and a frozen random-feature identity embedder.

The embedder stands in for a pretrained face-recognition model: it is
seed-fixed, never trained, and defines a differentiable cosine objective.
Scores from it measure embedding similarity, not human-face identity.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .triplane import PLANE_CHANNELS, PLANE_RES

IMAGE_SIZE = 64
LATENT_DIM = 64
INTERMEDIATE_CHANNELS = 32
INTERMEDIATE_RES = 16
EMBED_DIM = 32


def _check_image(img: torch.Tensor, size: int = IMAGE_SIZE) -> torch.Tensor:
    if img.ndim == 3:
        img = img.unsqueeze(0)
    if img.ndim != 4 or img.shape[1] != 3 or img.shape[2] != size or img.shape[3] != size:
        raise ValueError(f"expected RGB image(s) of size {size}x{size}, got {tuple(img.shape)}")
    return img


class Encoder(nn.Module):
    """Strided conv stack mapping a 64x64 RGB image to a latent offset.

    The code fed to the generator is always encode(I) + w_bar; the offset
    itself is what the latent regularizer penalizes.
    """

    def __init__(self, latent_dim: int = LATENT_DIM):
        super().__init__()
        self.latent_dim = latent_dim
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.GELU(),   # 32
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.GELU(),  # 16
            nn.Conv2d(32, 48, 3, stride=2, padding=1), nn.GELU(),  # 8
            nn.Conv2d(48, 64, 3, stride=2, padding=1), nn.GELU(),  # 4
        )
        self.head = nn.Linear(64, latent_dim)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        x = _check_image(image)
        h = self.features(x).mean(dim=(2, 3))
        return self.head(h)


class Generator(nn.Module):
    """Latent -> (canonical tri-plane, intermediate feature map).

    The intermediate (C_g, 16, 16) map is tapped before the upsampling trunk
    and feeds the compensation network.
    """

    def __init__(self, latent_dim: int = LATENT_DIM,
                 plane_channels: int = PLANE_CHANNELS, plane_res: int = PLANE_RES,
                 inter_channels: int = INTERMEDIATE_CHANNELS):
        super().__init__()
        if plane_res != 4 * INTERMEDIATE_RES:
            raise ValueError("generator upsampling stack assumes plane_res = 64")
        self.plane_channels = plane_channels
        self.plane_res = plane_res
        self.stem = nn.Linear(latent_dim, inter_channels * INTERMEDIATE_RES ** 2)
        self.trunk = nn.Sequential(
            nn.Conv2d(inter_channels, 48, 3, padding=1), nn.GELU(),
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),  # 32
            nn.Conv2d(48, 32, 3, padding=1), nn.GELU(),
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),  # 64
            nn.Conv2d(32, 32, 3, padding=1), nn.GELU(),
            nn.Conv2d(32, 3 * plane_channels, 3, padding=1),
        )

    def forward(self, latent: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """latent (B, L) -> planes (B, 3, C, R, R), intermediate (B, C_g, 16, 16)."""
        if latent.ndim == 1:
            latent = latent.unsqueeze(0)
        b = latent.shape[0]
        inter = F.gelu(self.stem(latent)).reshape(b, INTERMEDIATE_CHANNELS,
                                                  INTERMEDIATE_RES, INTERMEDIATE_RES)
        planes = self.trunk(inter).reshape(b, 3, self.plane_channels,
                                           self.plane_res, self.plane_res)
        return planes, inter


class ModulationBlock(nn.Module):
    """Conv block whose activations are scaled/shifted per channel by
    parameters predicted from the (resized) source image. No batch
    statistics anywhere, so single images behave identically to batches.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.predictor = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.GELU(),
            nn.Conv2d(16, 2 * out_channels, 3, padding=1),
        )

    def forward(self, x: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
        gamma, shift = self.predictor(source).chunk(2, dim=1)
        return F.gelu((1.0 + gamma) * self.conv(x) + shift)


class CompensationNet(nn.Module):
    """Predicts the additive compensation volume from the source image and
    the generator's intermediate features.

    Three modulation blocks interleaved with 2x upsampling carry 16 -> 64;
    the final projection is zero-initialized, so a fresh network outputs
    exactly the zero tri-plane.
    """

    def __init__(self, plane_channels: int = PLANE_CHANNELS, plane_res: int = PLANE_RES,
                 inter_channels: int = INTERMEDIATE_CHANNELS):
        super().__init__()
        self.plane_channels = plane_channels
        self.plane_res = plane_res
        self.block16 = ModulationBlock(inter_channels, 32)
        self.block32 = ModulationBlock(32, 32)
        self.block64 = ModulationBlock(32, 24)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.project = nn.Conv2d(24, 3 * plane_channels, 1)
        nn.init.zeros_(self.project.weight)
        nn.init.zeros_(self.project.bias)

    def forward(self, source: torch.Tensor, intermediate: torch.Tensor) -> torch.Tensor:
        """source (B, 3, 64, 64), intermediate (B, C_g, 16, 16) -> (B, 3, C, R, R)."""
        src = _check_image(source)
        if intermediate.ndim == 3:
            intermediate = intermediate.unsqueeze(0)
        if intermediate.shape[0] != src.shape[0]:
            raise ValueError("source/intermediate batch mismatch")
        src16 = F.avg_pool2d(src, 4)
        src32 = F.avg_pool2d(src, 2)
        x = self.block16(intermediate, src16)
        x = self.block32(self.up(x), src32)
        x = self.block64(self.up(x), src)
        planes = self.project(x)
        return planes.reshape(src.shape[0], 3, self.plane_channels,
                              self.plane_res, self.plane_res)


class IdentityEmbedder(nn.Module):
    """Frozen seed-fixed conv net producing unit-norm embeddings.

    The embedding of a mid-gray reference image is subtracted before
    normalization: raw pooled random features share a large common component
    (their expectation over pixels), which would push all cosines toward 1
    and make the similarity useless.
    """

    def __init__(self, embed_dim: int = EMBED_DIM, seed: int = 710):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.GELU(),   # 32
                nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.GELU(),  # 16
                nn.Conv2d(32, 32, 3, stride=2, padding=1), nn.GELU(),  # 8
            )
            self.pool = nn.AdaptiveAvgPool2d(2)
            self.proj = nn.Linear(32 * 4, embed_dim, bias=False)
        for p in self.parameters():
            p.requires_grad_(False)
        with torch.no_grad():
            gray = torch.full((1, 3, IMAGE_SIZE, IMAGE_SIZE), 0.5)
            self.register_buffer("reference", self._features(gray).squeeze(0))
            anchor = torch.zeros(embed_dim)
            anchor[0] = 1e-4    # keeps the norm nonzero even at the reference
            self.register_buffer("anchor", anchor)

    def _features(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.pool(self.net(x)).flatten(1))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        x = _check_image(image)
        h = self._features(x) - self.reference + self.anchor
        return h / h.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def embed(embedder: IdentityEmbedder, image: torch.Tensor) -> torch.Tensor:
    out = embedder(image)
    return out.squeeze(0) if image.ndim == 3 else out
