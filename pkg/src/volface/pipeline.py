"""Full avatar model: encoder -> canonical tri-plane (+ compensation volume)
-> blendshape-conditioned backward deformation -> volume rendering -> 2x
upsampling to the output RGB image.

Parameter groups are the unit of freezing, checkpointing and optimization;
the identity embedder is a group that is never trainable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from . import appearance, renderer, triplane
from .deformation import DeformationField
from .diffcore import ParameterGroup
from .geometry import CameraIntrinsics, CameraPose, scale_intrinsics
from .renderer import RenderOutput, SamplingConfig

GROUP_NAMES = ("encoder", "w_bar", "generator", "compensation",
               "decoder", "deformation", "sr", "embedder")


@dataclass
class ModelConfig:
    latent_dim: int = appearance.LATENT_DIM
    plane_channels: int = triplane.PLANE_CHANNELS
    plane_res: int = triplane.PLANE_RES
    feature_channels: int = triplane.FEATURE_CHANNELS
    decoder_hidden: int = 64
    offset_hidden: int = 64
    offset_depth: int = 3
    weight_hidden: int = 32
    weight_depth: int = 2
    pe_bands: int = 4
    d_id: int = 4
    d_exp: int = 4
    embed_seed: int = 710
    use_identity: bool = True
    use_weight_net: bool = True
    init_seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ReenactResult:
    rgb: torch.Tensor            # (3, 2H, 2W) final output image
    render: RenderOutput         # low-resolution feature render
    latent_offset: torch.Tensor  # encoder output e
    v_canonical: torch.Tensor    # (3, C, R, R)
    v_compensation: torch.Tensor | None = None
    aux: dict = field(default_factory=dict)


class AvatarModel(nn.Module):
    """All trainable sub-networks plus the frozen embedder, built
    deterministically from `config.init_seed`.
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        with torch.random.fork_rng():
            torch.manual_seed(cfg.init_seed)
            self.encoder = appearance.Encoder(cfg.latent_dim)
            self.w_bar = nn.Parameter(torch.zeros(cfg.latent_dim))
            self.generator = appearance.Generator(cfg.latent_dim, cfg.plane_channels,
                                                  cfg.plane_res)
            self.compensation = appearance.CompensationNet(cfg.plane_channels, cfg.plane_res)
            self.decoder = triplane.VolumeDecoder(cfg.plane_channels, cfg.feature_channels,
                                                  cfg.decoder_hidden)
            self.deformation = DeformationField(
                signal_dim=cfg.d_id + cfg.d_exp, id_dim=cfg.d_id, pe_bands=cfg.pe_bands,
                offset_hidden=cfg.offset_hidden, offset_depth=cfg.offset_depth,
                weight_hidden=cfg.weight_hidden, weight_depth=cfg.weight_depth,
                use_identity=cfg.use_identity, use_weight_net=cfg.use_weight_net)
            self.sr = renderer.SuperResolver(cfg.feature_channels)
        self.embedder = appearance.IdentityEmbedder(seed=cfg.embed_seed)

    # -- parameter-group plumbing -------------------------------------------

    def parameter_groups(self) -> dict[str, ParameterGroup]:
        groups = {}
        for name in GROUP_NAMES:
            if name == "w_bar":
                tensors = {"w_bar": self.w_bar}
            else:
                module = getattr(self, name)
                tensors = dict(module.named_parameters())
            groups[name] = ParameterGroup(name, tensors, trainable=(name != "embedder"))
        return groups

    def group_param_count(self, name: str) -> int:
        return self.parameter_groups()[name].num_params()

    def model_dtype(self) -> torch.dtype:
        return self.w_bar.dtype

    # -- forward passes ------------------------------------------------------

    def latent(self, image: torch.Tensor) -> torch.Tensor:
        """Latent offset e; the generator consumes e + w_bar."""
        return self.encoder(image)

    def volumes(self, source: torch.Tensor, use_compensation: bool = True
                ) -> tuple[torch.Tensor, torch.Tensor | None, torch.Tensor, torch.Tensor]:
        """Single source image (3, 64, 64) -> (V_c, V_m or None, e, intermediate)."""
        e = self.encoder(source.unsqueeze(0)).squeeze(0)
        planes, inter = self.generator((e + self.w_bar).unsqueeze(0))
        v_c = planes[0]
        v_m = None
        if use_compensation:
            v_m = self.compensation(source.unsqueeze(0), inter)[0]
        return v_c, v_m, e, inter[0]

    def reenact(self, source: torch.Tensor, signal: torch.Tensor,
                intr: CameraIntrinsics, pose: CameraPose, cfg: SamplingConfig,
                use_compensation: bool = True, use_deformation: bool = True
                ) -> ReenactResult:
        """Reconstruct the source into the canonical volume and render it under
        the control signal and camera. `use_deformation=False` renders the
        canonical volume directly.
        """
        v_c, v_m, e, _ = self.volumes(source, use_compensation=use_compensation)
        planes = triplane.combine(v_c, v_m) if v_m is not None else v_c
        dtype = self.model_dtype()
        field = self.deformation if use_deformation else None
        sig = signal.to(dtype) if use_deformation else None
        render_intr = scale_intrinsics(intr, 2)   # features render at half size, SR doubles
        out = renderer.render_volume(planes, self.decoder, render_intr, pose, cfg,
                                     deformation=field, signal=sig)
        rgb = self.sr(out.features)
        return ReenactResult(rgb, out, e, v_c, v_m)

    def render_canonical(self, source: torch.Tensor, intr: CameraIntrinsics,
                         pose: CameraPose, cfg: SamplingConfig,
                         use_compensation: bool = True) -> ReenactResult:
        dummy = torch.zeros(self.config.d_id + self.config.d_exp)
        return self.reenact(source, dummy, intr, pose, cfg,
                            use_compensation=use_compensation, use_deformation=False)


def build_model(config: ModelConfig | None = None,
                dtype: torch.dtype = torch.float32) -> AvatarModel:
    model = AvatarModel(config)
    if dtype != torch.float32:
        model.to(dtype)
    return model


def load_model(path, dtype: torch.dtype = torch.float32):
    """Rebuild a model from a checkpoint file; returns (model, meta)."""
    from .checkpointio import read_checkpoint, restore
    meta, tensors = read_checkpoint(path)
    model = AvatarModel(ModelConfig.from_dict(meta.model_config))
    restore(model.parameter_groups(), None, meta, tensors)
    if dtype != torch.float32:
        model.to(dtype)
    return model, meta
