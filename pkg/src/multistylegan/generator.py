"""Two-domain sequence generator: mapping network plus stacked DSC stages."""

from dataclasses import asdict, dataclass
from typing import List, NamedTuple, Optional, Union

import torch
from torch import nn

from .dsc import DSCBlock, NoiseSpec
from .layers import EqualLinear, upsample2x


class ImageSequencePair(NamedTuple):
    """Brightfield and fluorescence sequences, each ``[batch, timesteps, H, W]``."""

    bf: torch.Tensor
    gfp: torch.Tensor


@dataclass
class GeneratorConfig:
    stages: int = 7
    features: Union[int, List[int]] = 512
    latent_dim: int = 512
    mapping_layers: int = 8
    base_resolution: int = 4
    timesteps: int = 3

    def __post_init__(self):
        if self.stages < 1 or self.timesteps < 1 or self.mapping_layers < 1:
            raise ValueError("stages, timesteps and mapping_layers must be >= 1")
        if isinstance(self.features, (list, tuple)):
            if len(self.features) != self.stages:
                raise ValueError(f"features list has {len(self.features)} entries for {self.stages} stages")
            self.features = [int(f) for f in self.features]

    @property
    def resolution(self) -> int:
        return self.base_resolution * 2 ** (self.stages - 1)

    def stage_features(self) -> List[int]:
        if isinstance(self.features, list):
            return list(self.features)
        return [int(self.features)] * self.stages

    def to_dict(self):
        return asdict(self)


def rms_normalize(z: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return z * torch.rsqrt(z.square().mean(dim=-1, keepdim=True) + eps)


class MappingNetwork(nn.Module):
    def __init__(self, latent_dim=512, num_layers=8):
        super().__init__()
        self.latent_dim = latent_dim
        self.layers = nn.Sequential(*[EqualLinear(latent_dim, latent_dim, activate=True) for _ in range(num_layers)])

    def forward(self, z):
        if z.shape[-1] != self.latent_dim:
            raise ValueError(f"z has {z.shape[-1]} dims, expected {self.latent_dim}")
        return self.layers(rms_normalize(z))


class SynthesisStage(nn.Module):
    def __init__(self, in_ch, out_ch, latent_dim, timesteps, upsample):
        super().__init__()
        self.conv0 = DSCBlock(in_ch, out_ch, latent_dim, 3, upsample=upsample)
        self.conv1 = DSCBlock(out_ch, out_ch, latent_dim, 3)
        self.to_img = DSCBlock(out_ch, timesteps, latent_dim, 1, demodulate=False, activate=False, use_noise=False)

    def forward(self, fb, fg, w, noise, generator):
        fb, fg = self.conv0(fb, fg, w, noise, generator)
        fb, fg = self.conv1(fb, fg, w, noise, generator)
        ib, ig = self.to_img(fb, fg, w)
        return fb, fg, ib, ig


class Generator(nn.Module):
    """Maps ``z`` to a matching pair of brightfield / fluorescence sequences.

    The learned constant input is shared by both domain paths; the domains only
    diverge through the per-path kernels of the DSC blocks. Time is carried in
    the channel dimension, so the output-mapping blocks emit ``timesteps``
    channels per domain.
    """

    def __init__(self, config: Optional[GeneratorConfig] = None):
        super().__init__()
        self.config = config = config or GeneratorConfig()
        feats = config.stage_features()
        self.mapping = MappingNetwork(config.latent_dim, config.mapping_layers)
        self.const = nn.Parameter(torch.randn(1, feats[0], config.base_resolution, config.base_resolution))
        stages = []
        prev = feats[0]
        for i, f in enumerate(feats):
            stages.append(SynthesisStage(prev, f, config.latent_dim, config.timesteps, upsample=i > 0))
            prev = f
        self.stages = nn.ModuleList(stages)
        self.register_buffer("w_avg", torch.zeros(config.latent_dim))

    @property
    def num_stages(self):
        return len(self.stages)

    def mapping_parameters(self):
        return self.mapping.parameters()

    def synthesis_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("mapping.")]

    def map_latent(self, z: torch.Tensor, psi: float = 1.0) -> torch.Tensor:
        """``z -> w``; ``psi < 1`` pulls ``w`` toward the tracked average (truncation)."""
        if not 0 < psi <= 1:
            raise ValueError("truncation psi must lie in (0, 1]")
        w = self.mapping(z)
        if psi != 1.0:
            w = self.w_avg + psi * (w - self.w_avg)
        return w

    @torch.no_grad()
    def update_w_avg(self, w: torch.Tensor, beta: float = 0.995):
        self.w_avg.copy_(torch.lerp(w.detach().mean(0), self.w_avg, beta))

    def _per_stage(self, w) -> torch.Tensor:
        if isinstance(w, (list, tuple)):
            if len(w) != self.num_stages:
                raise ValueError(f"per-stage latent list has {len(w)} entries, generator has {self.num_stages} stages")
            w = torch.stack([x if x.dim() == 2 else x.unsqueeze(0) for x in w], dim=1)
        if w.dim() == 1:
            w = w.unsqueeze(0)
        if w.dim() == 2:
            w = w.unsqueeze(1).expand(-1, self.num_stages, -1)
        if w.dim() != 3 or w.shape[1] != self.num_stages or w.shape[2] != self.config.latent_dim:
            raise ValueError(f"latent of shape {tuple(w.shape)} is not [batch, {self.num_stages}, {self.config.latent_dim}]")
        return w

    def synthesize(self, w, noise: NoiseSpec = "fresh", generator: Optional[torch.Generator] = None) -> ImageSequencePair:
        """Render from ``w``: ``[B, latent]``, ``[B, stages, latent]`` or a list of per-stage latents."""
        ws = self._per_stage(w)
        b = ws.shape[0]
        fb = fg = self.const.expand(b, -1, -1, -1)
        img_b = img_g = None
        for i, stage in enumerate(self.stages):
            fb, fg, ib, ig = stage(fb, fg, ws[:, i], noise, generator)
            if img_b is None:
                img_b, img_g = ib, ig
            else:
                img_b, img_g = upsample2x(img_b) + ib, upsample2x(img_g) + ig
        return ImageSequencePair(img_b, img_g)

    def forward(self, z, psi=1.0, noise: NoiseSpec = "fresh", generator=None) -> ImageSequencePair:
        return self.synthesize(self.map_latent(z, psi), noise=noise, generator=generator)

    def style_mix(self, w1, w2, crossover: int, noise: NoiseSpec = "zero", generator=None) -> ImageSequencePair:
        """Stages ``[0, crossover)`` get ``w1``, stages ``[crossover, stages)`` get ``w2``."""
        if not 0 <= crossover <= self.num_stages:
            raise ValueError(f"crossover must be in 0..{self.num_stages}, got {crossover}")
        w1, w2 = self._per_stage(w1), self._per_stage(w2)
        mixed = torch.cat([w1[:, :crossover], w2[:, crossover:]], dim=1)
        return self.synthesize(mixed, noise=noise, generator=generator)

    def interpolate_latents(self, z1, z2, steps: int, psi: float = 1.0) -> List[ImageSequencePair]:
        """Linear walk in W between ``map_latent(z1)`` and ``map_latent(z2)``, zero noise."""
        if steps < 2:
            raise ValueError("interpolation needs at least 2 steps")
        w1, w2 = self.map_latent(z1, psi), self.map_latent(z2, psi)
        out = []
        for i in range(steps):
            t = i / (steps - 1)
            # Endpoints are taken verbatim so t in {0, 1} reproduces the plain samples bit-exactly.
            w = w1 if i == 0 else w2 if i == steps - 1 else torch.lerp(w1, w2, t)
            out.append(self.synthesize(w, noise="zero"))
        return out

