"""Adversarial objectives, regularizers, CutMix and disordered-sequence negatives."""

import math
from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple, Optional, Tuple, Union

import torch
import torch.nn.functional as F

from .discriminator import DiscriminatorOutput
from .generator import ImageSequencePair


@dataclass
class LossConfig:
    topk_start: float = 1.0
    topk_end: float = 0.5
    # None -> half of the total number of training steps.
    topk_decay_steps: Optional[int] = None
    r1_gamma: float = 10.0
    r1_interval: int = 16
    pl_weight: float = 2.0
    pl_interval: int = 8
    pl_ema_decay: float = 0.99
    pl_batch_shrink: int = 2
    cutmix_prob: float = 0.5
    consistency_weight: float = 1.0
    pixel_loss_weight: float = 1.0
    disorder_prob: float = 0.25
    style_mixing_prob: float = 0.0

    def __post_init__(self):
        for name in ("r1_gamma", "pl_weight", "consistency_weight", "pixel_loss_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("r1_interval", "pl_interval", "pl_batch_shrink"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("cutmix_prob", "disorder_prob", "style_mixing_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")
        if not 0 < self.topk_end <= self.topk_start <= 1:
            raise ValueError("need 0 < topk_end <= topk_start <= 1")
        if not 0 < self.pl_ema_decay < 1:
            raise ValueError("pl_ema_decay must be in (0, 1)")

    def topk_fraction(self, step: int, total_steps: int) -> float:
        """Linear anneal from ``topk_start`` to ``topk_end``, then constant."""
        decay = self.topk_decay_steps if self.topk_decay_steps is not None else total_steps // 2
        if decay <= 0:
            return self.topk_end
        t = min(max(step / decay, 0.0), 1.0)
        return self.topk_start + (self.topk_end - self.topk_start) * t

    def to_dict(self):
        return asdict(self)


def topk_count(fraction: float, batch: int) -> int:
    return max(1, min(batch, math.ceil(fraction * batch - 1e-9)))


def topk_filter(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the ``k`` largest scores; ties go to the lower index."""
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside 1..{n}")
    order = torch.sort(scores.detach(), descending=True, stable=True).indices
    return order[:k]


def _per_sample_pixel(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(1).mean(dim=1)


def g_loss(fake_out: DiscriminatorOutput, k: Optional[int] = None, pixel_weight: float = 1.0) -> torch.Tensor:
    """Non-saturating generator loss over the ``k`` fakes scored most realistic.

    Realism is judged by both heads together: a sample's score is minus its own
    loss ``softplus(-scalar) + pixel_weight * mean softplus(-pixel_map)``. With
    ``pixel_weight == 0`` this ranks by the scalar logit alone.
    """
    n = fake_out.scalar.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    per_sample = F.softplus(-fake_out.scalar) + pixel_weight * _per_sample_pixel(F.softplus(-fake_out.pixel_map))
    idx = topk_filter(-per_sample, n if k is None else k)
    return per_sample[idx].mean()


def d_loss(real_out: DiscriminatorOutput, fake_out: DiscriminatorOutput, pixel_weight: float = 1.0) -> torch.Tensor:
    scalar = F.softplus(-real_out.scalar).mean() + F.softplus(fake_out.scalar).mean()
    pixel = F.softplus(-real_out.pixel_map).mean() + F.softplus(fake_out.pixel_map).mean()
    return scalar + pixel_weight * pixel


def _as_tensor_input(x):
    return torch.cat(list(x), dim=1) if isinstance(x, tuple) else x


def r1_penalty(disc: Callable[[torch.Tensor], Union[DiscriminatorOutput, torch.Tensor]], real: torch.Tensor, gamma: float) -> torch.Tensor:
    """``gamma / 2 * E ||d scalar / d x||^2`` on real inputs.

    ``disc`` maps an input tensor to a ``DiscriminatorOutput`` or directly to per-sample
    scalars. ``real`` must be a leaf with ``requires_grad`` (it is enabled here if not).
    """
    if not real.requires_grad:
        real = real.detach().requires_grad_(True)
    out = disc(real)
    scores = out.scalar if isinstance(out, DiscriminatorOutput) else out
    if not scores.requires_grad:
        # Output does not depend on the input at all: gradient is identically zero.
        return real.new_zeros(())
    (grad,) = torch.autograd.grad(scores.sum(), real, create_graph=True, allow_unused=True)
    if grad is None:
        return real.new_zeros(())
    return 0.5 * gamma * grad.square().flatten(1).sum(1).mean()


class PathLengthResult(NamedTuple):
    penalty: torch.Tensor
    pl_mean: torch.Tensor
    lengths: torch.Tensor


def path_length_penalty(
    synthesize: Callable[[torch.Tensor], Union[ImageSequencePair, torch.Tensor]],
    w: torch.Tensor,
    pl_mean: torch.Tensor,
    decay: float = 0.99,
    perturbation: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> PathLengthResult:
    """Penalize deviation of ``||J^T y||`` from its running mean.

    ``y`` is unit Gaussian over the image (both domains stacked), divided by
    ``sqrt(H * W)``. The running mean is updated first, as a lerp toward the
    batch mean of the lengths, and the penalty is measured against the update.
    """
    if not w.requires_grad:
        w = w.detach().requires_grad_(True)
    img = _as_tensor_input(synthesize(w))
    h, wd = img.shape[-2], img.shape[-1]
    if perturbation is None:
        perturbation = torch.randn(img.shape, generator=generator, dtype=img.dtype, device=img.device)
    y = perturbation / math.sqrt(h * wd)
    (grad,) = torch.autograd.grad((img * y).sum(), w, create_graph=True)
    lengths = grad.square().flatten(1).sum(1).sqrt()
    new_mean = pl_mean.detach() + (1 - decay) * (lengths.detach().mean() - pl_mean.detach())
    penalty = (lengths - new_mean).square().mean()
    return PathLengthResult(penalty, new_mean, lengths.detach())


class CutMixMask(NamedTuple):
    mask: torch.Tensor  # [H, W], 1 where the first input is kept
    lam: float


def rect_mask(height: int, width: int, top: int, left: int, rect_h: int, rect_w: int) -> CutMixMask:
    if not (0 <= top and 0 <= left and top + rect_h <= height and left + rect_w <= width and rect_h >= 0 and rect_w >= 0):
        raise ValueError("rectangle does not fit inside the mask")
    mask = torch.zeros(height, width)
    mask[top : top + rect_h, left : left + rect_w] = 1.0
    return CutMixMask(mask, float(mask.mean()))


def sample_cutmix_mask(height: int, width: int, generator=None, lam: Optional[float] = None) -> CutMixMask:
    """Axis-aligned rectangle whose area fraction is approximately ``lam ~ U(0, 1)``.

    Side lengths are ``round(side * sqrt(lam))`` and the rectangle never leaves
    the frame; the recorded ``lam`` is the exact area fraction after rounding.
    """
    if lam is None:
        lam = float(torch.rand((), generator=generator))
    if not 0 <= lam <= 1:
        raise ValueError("lam must be in [0, 1]")
    r = math.sqrt(lam)
    rh, rw = int(round(height * r)), int(round(width * r))
    top = int(torch.randint(0, height - rh + 1, (), generator=generator))
    left = int(torch.randint(0, width - rw + 1, (), generator=generator))
    return rect_mask(height, width, top, left, rh, rw)


def mix(x1: torch.Tensor, x2: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask.to(dtype=x1.dtype, device=x1.device)
    return m * x1 + (1 - m) * x2


def cutmix_pair(x1: ImageSequencePair, x2: ImageSequencePair, generator=None, lam: Optional[float] = None) -> Tuple[ImageSequencePair, CutMixMask]:
    """Paste a rectangle of ``x1`` onto ``x2``; same mask for every timestep and domain."""
    if x1.bf.shape != x2.bf.shape or x1.gfp.shape != x2.gfp.shape:
        raise ValueError("cutmix inputs differ in shape")
    h, w = x1.bf.shape[-2:]
    cm = sample_cutmix_mask(h, w, generator, lam)
    return ImageSequencePair(mix(x1.bf, x2.bf, cm.mask), mix(x1.gfp, x2.gfp, cm.mask)), cm


def consistency_loss(pixel_mixed: torch.Tensor, pixel_1: torch.Tensor, pixel_2: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Squared error between the logit map of a mixed input and the mix of the logit maps."""
    return (pixel_mixed - mix(pixel_1, pixel_2, mask)).square().mean()


def cutmix_consistency(disc: Callable[[torch.Tensor], DiscriminatorOutput], x1: torch.Tensor, x2: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Convenience form running ``disc`` on ``x1``, ``x2`` and their mix."""
    return consistency_loss(disc(mix(x1, x2, mask)).pixel_map, disc(x1).pixel_map, disc(x2).pixel_map, mask)


def cutmix_adversarial(mixed_out: DiscriminatorOutput, mask: torch.Tensor, pixel_weight: float = 1.0) -> torch.Tensor:
    """Discriminator loss on a real-into-fake mix: fake globally, per-pixel target from the mask."""
    m = mask.to(mixed_out.pixel_map.dtype)
    pix = mixed_out.pixel_map
    pixel = (m * F.softplus(-pix) + (1 - m) * F.softplus(pix)).mean()
    return F.softplus(mixed_out.scalar).mean() + pixel_weight * pixel


def random_derangement_order(timesteps: int, generator=None) -> torch.Tensor:
    """Uniform over the ``T! - 1`` non-identity orderings of ``range(T)``."""
    if timesteps < 2:
        raise ValueError("need at least 2 timesteps to disorder a sequence")
    identity = torch.arange(timesteps)
    while True:
        perm = torch.randperm(timesteps, generator=generator)
        if not torch.equal(perm, identity):
            return perm


def make_disordered(real: ImageSequencePair, generator=None) -> Tuple[ImageSequencePair, torch.Tensor]:
    """Shuffle the time axis of a real batch (one shared ordering for both domains)."""
    perm = random_derangement_order(real.bf.shape[1], generator)
    return ImageSequencePair(real.bf[:, perm], real.gfp[:, perm]), perm
