"""Adaptive discriminator augmentation, limited to pixel blitting and geometric warps.

Every transform is applied to the stacked ``[B, C, H, W]`` discriminator input,
where the channels are all timesteps of both domains, so a sample's frames
always share one set of transform parameters.
"""

import math
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class AdaState:
    p: float = 0.0
    r_t: float = 0.0
    target: float = 0.6
    # Change of p per 1000 real images shown; 0.002 crosses [0, 1] in 500k images.
    adjustment_speed: float = 0.002
    ema_decay: float = 0.99
    interval: int = 4

    def to_dict(self):
        return asdict(self)


def overfitting_heuristic(real_scalar_logits: torch.Tensor) -> float:
    """``E[sign(D(real))]`` over one batch."""
    if real_scalar_logits.numel() == 0:
        raise ValueError("empty batch")
    return float(torch.sign(real_scalar_logits.detach()).mean())


def observe(state: AdaState, real_scalar_logits: torch.Tensor) -> AdaState:
    sample = overfitting_heuristic(real_scalar_logits)
    r_t = state.ema_decay * state.r_t + (1 - state.ema_decay) * sample
    return replace(state, r_t=r_t)


def update_p(state: AdaState, images_seen: int) -> AdaState:
    diff = state.r_t - state.target
    sign = (diff > 0) - (diff < 0)
    p = state.p + sign * state.adjustment_speed * images_seen / 1000.0
    return replace(state, p=min(max(p, 0.0), 1.0))


class AugmentParams(NamedTuple):
    """Per-sample transform parameters. Disabled transforms hold their identity value."""

    blit: torch.Tensor  # bool [B]
    flip: torch.Tensor  # bool [B]
    rot90: torch.Tensor  # int [B], quarter turns counter-clockwise
    shift: torch.Tensor  # int [B, 2], (dy, dx) in pixels
    geom: torch.Tensor  # bool [B]
    scale: torch.Tensor  # float [B]
    angle: torch.Tensor  # float [B], radians
    translate: torch.Tensor  # float [B, 2], (ty, tx) as a fraction of the image size

    @classmethod
    def identity(cls, batch: int) -> "AugmentParams":
        f = torch.zeros(batch, dtype=torch.bool)
        return cls(f, f.clone(), torch.zeros(batch, dtype=torch.long), torch.zeros(batch, 2, dtype=torch.long),
                   f.clone(), torch.ones(batch, dtype=torch.float64), torch.zeros(batch, dtype=torch.float64),
                   torch.zeros(batch, 2, dtype=torch.float64))


def sample_params(batch: int, size, p: float, generator=None,
                  max_shift: float = 0.125, scale_std: float = 0.2, translate_std: float = 0.125) -> AugmentParams:
    if not 0 <= p <= 1:
        raise ValueError("p must be in [0, 1]")
    h, w = size
    g = generator

    def u(*shape):
        return torch.rand(shape, generator=g, dtype=torch.float64)

    blit = u(batch) < p
    geom = u(batch) < p
    flip = (u(batch) < 0.5) & blit
    rot = torch.randint(0, 4, (batch,), generator=g) * blit
    lim = torch.tensor([h, w], dtype=torch.float64) * max_shift
    shift = torch.round((u(batch, 2) * 2 - 1) * lim).long() * blit[:, None]
    scale = torch.where(geom, torch.exp2(torch.randn(batch, generator=g, dtype=torch.float64) * scale_std), torch.ones(batch, dtype=torch.float64))
    angle = torch.where(geom, (u(batch) * 2 - 1) * math.pi, torch.zeros(batch, dtype=torch.float64))
    trans = torch.randn(batch, 2, generator=g, dtype=torch.float64) * translate_std * geom[:, None]
    return AugmentParams(blit, flip, rot, shift, geom, scale, angle, trans)


def _reflect_index(idx: torch.Tensor, n: int) -> torch.Tensor:
    # Mirror without repeating the edge pixel (same convention as grid_sample reflection
    # at integer offsets and as F.pad(mode="reflect")).
    period = 2 * (n - 1) if n > 1 else 1
    idx = torch.remainder(idx, period)
    return torch.where(idx >= n, period - idx, idx)


def integer_translate(x: torch.Tensor, dy: int, dx: int) -> torch.Tensor:
    """Shift content by whole pixels with reflected borders: ``out[i, j] = x[i - dy, j - dx]``."""
    h, w = x.shape[-2:]
    rows = _reflect_index(torch.arange(h) - dy, h)
    cols = _reflect_index(torch.arange(w) - dx, w)
    return x[..., rows, :][..., :, cols]


def blit(x: torch.Tensor, flip: bool, rot90: int, dy: int, dx: int) -> torch.Tensor:
    """Exact (interpolation-free) transforms on one sample ``[C, H, W]``."""
    if flip:
        x = torch.flip(x, dims=(-1,))
    if rot90 % 4:
        x = torch.rot90(x, rot90 % 4, dims=(-2, -1))
    if dy or dx:
        x = integer_translate(x, dy, dx)
    return x


def affine_warp(x: torch.Tensor, scale: torch.Tensor, angle: torch.Tensor, translate: torch.Tensor) -> torch.Tensor:
    """Isotropic scale, rotation and fractional translation as one bilinear warp.

    ``x`` is ``[B, C, H, W]``; the map sends output normalized coordinates to
    input coordinates via the inverse transform, with reflection padding.
    """
    b = x.shape[0]
    cos, sin = torch.cos(angle), torch.sin(angle)
    inv = 1.0 / scale
    theta = torch.zeros(b, 2, 3, dtype=torch.float64)
    theta[:, 0, 0] = cos * inv
    theta[:, 0, 1] = sin * inv
    theta[:, 1, 0] = -sin * inv
    theta[:, 1, 1] = cos * inv
    # translate is (ty, tx) as an image fraction; normalized coordinates span 2 units.
    t = -2.0 * translate.flip(-1)
    theta[:, :, 2] = torch.einsum("bij,bj->bi", theta[:, :, :2], t)
    grid = F.affine_grid(theta.to(x.dtype), list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)


def apply_params(x: torch.Tensor, params: AugmentParams) -> torch.Tensor:
    out = []
    for i in range(x.shape[0]):
        xi = x[i]
        if params.blit[i]:
            xi = blit(xi, bool(params.flip[i]), int(params.rot90[i]), int(params.shift[i, 0]), int(params.shift[i, 1]))
        out.append(xi)
    y = torch.stack(out) if out else x
    if params.geom.any():
        idx = params.geom.nonzero().squeeze(1)
        warped = affine_warp(y[idx], params.scale[idx], params.angle[idx], params.translate[idx])
        y = y.index_copy(0, idx, warped)
    return y


def apply_augmentation(x: torch.Tensor, p: float, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Augment a ``[B, C, H, W]`` batch; ``p == 0`` returns the input untouched."""
    if p == 0:
        return x
    params = sample_params(x.shape[0], x.shape[-2:], p, generator)
    if not (params.blit.any() or params.geom.any()):
        return x
    return apply_params(x, params)
