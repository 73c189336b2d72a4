"""Alternating D/G optimization with lazy regularization, ADA control and a weight EMA."""

import copy
import json
import logging
import time
from pathlib import Path
from typing import Dict, Mapping, Optional, Union

import torch
from torch import nn

from . import ada as ada_ops
from .ada import AdaState
from .config import RunConfig, dump_config
from .data import DatasetIndex, batches_per_epoch, count_windows, epoch_batches, load_batch
from .discriminator import UNetDiscriminator, sequences_to_channels
from .export import batch_image, save_png
from .generator import Generator, ImageSequencePair
from .losses import (
    consistency_loss,
    cutmix_adversarial,
    d_loss,
    g_loss,
    make_disordered,
    mix,
    path_length_penalty,
    r1_penalty,
    sample_cutmix_mask,
    topk_count,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "multistylegan-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, components: Dict[str, float]):
        self.step = step
        self.components = components
        super().__init__(f"non-finite loss at step {step}: {json.dumps(components)}")


@torch.no_grad()
def ema_update(ema: Union[nn.Module, Mapping[str, torch.Tensor]], online: Union[nn.Module, Mapping[str, torch.Tensor]], decay: float):
    """In place ``ema <- decay * ema + (1 - decay) * online`` over matching parameter trees.

    For modules, buffers are copied from ``online`` verbatim.
    """
    if isinstance(ema, nn.Module):
        e_params, o_params = dict(ema.named_parameters()), dict(online.named_parameters())
    else:
        e_params, o_params = dict(ema), dict(online)
    if e_params.keys() != o_params.keys():
        diff = sorted(set(e_params) ^ set(o_params))
        raise ValueError(f"parameter trees differ: {diff[:5]}")
    for name, p in o_params.items():
        e = e_params[name]
        if e.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(e.shape)} vs {tuple(p.shape)}")
        e.mul_(decay).add_(p, alpha=1.0 - decay)
    if isinstance(ema, nn.Module):
        for (name, b_e), (_, b_o) in zip(ema.named_buffers(), online.named_buffers()):
            b_e.copy_(b_o)
    return ema


def _finite(x: torch.Tensor) -> bool:
    return bool(torch.isfinite(x).all())


class Trainer:
    """Owns every piece of mutable training state (single writer)."""

    def __init__(self, config: RunConfig, total_steps: int = 0):
        self.config = config
        tc = config.training
        torch.manual_seed(tc.seed)
        self.G = Generator(config.generator)
        self.D = UNetDiscriminator(config.discriminator)
        self.G_ema = copy.deepcopy(self.G).eval().requires_grad_(False)
        betas = (tc.adam_beta1, tc.adam_beta2)
        self.opt_g = torch.optim.Adam(
            [
                {"params": self.G.synthesis_parameters(), "lr": tc.lr_generator},
                {"params": list(self.G.mapping_parameters()), "lr": tc.lr_mapping},
            ],
            betas=betas,
        )
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=tc.lr_discriminator, betas=betas)
        a = config.ada
        self.ada = AdaState(p=a.initial_p, target=a.target, adjustment_speed=a.adjustment_speed, ema_decay=a.ema_decay, interval=a.interval)
        self.pl_mean = torch.zeros(())
        self.rng = torch.Generator().manual_seed(tc.seed + 1)
        self.step = 0
        self.total_steps = total_steps

    # -- one optimization step -------------------------------------------------

    def _z(self, n):
        return torch.randn(n, self.config.generator.latent_dim, generator=self.rng)

    def _latents(self, n):
        w = self.G.map_latent(self._z(n))
        if self.config.loss.style_mixing_prob > 0 and float(torch.rand((), generator=self.rng)) < self.config.loss.style_mixing_prob:
            w2 = self.G.map_latent(self._z(n))
            cut = int(torch.randint(1, self.G.num_stages, (), generator=self.rng)) if self.G.num_stages > 1 else 1
            ws = w.unsqueeze(1).repeat(1, self.G.num_stages, 1)
            ws[:, cut:] = w2.unsqueeze(1)
            return w, ws
        return w, w

    def _augment(self, x):
        if not self.config.ada.enabled:
            return x
        return ada_ops.apply_augmentation(x, self.ada.p, self.rng)

    def discriminator_step(self, real: ImageSequencePair) -> Dict[str, float]:
        lc = self.config.loss
        rec = {}
        b = real.bf.shape[0]
        self.G.requires_grad_(False)
        self.D.requires_grad_(True)
        with torch.no_grad():
            _, ws = self._latents(b)
            fake = self.G.synthesize(ws, noise="fresh", generator=self.rng)
        x_real = sequences_to_channels(*real)
        x_fake = sequences_to_channels(*fake)
        disordered = float(torch.rand((), generator=self.rng)) < lc.disorder_prob
        if disordered:
            dis, _ = make_disordered(real, self.rng)
            x_fake = torch.cat([x_fake, sequences_to_channels(*dis)])
        aug_real, aug_fake = self._augment(x_real), self._augment(x_fake)
        out_r, out_f = self.D(aug_real), self.D(aug_fake)
        loss_adv = d_loss(out_r, out_f, lc.pixel_loss_weight)
        total = loss_adv
        rec["d_adv"] = loss_adv
        if float(torch.rand((), generator=self.rng)) < lc.cutmix_prob:
            cm = sample_cutmix_mask(*x_real.shape[-2:], generator=self.rng)
            out_m = self.D(mix(aug_real, aug_fake[:b], cm.mask))
            rec["d_cutmix"] = cutmix_adversarial(out_m, cm.mask, lc.pixel_loss_weight)
            rec["d_consistency"] = consistency_loss(out_m.pixel_map, out_r.pixel_map, out_f.pixel_map[:b], cm.mask)
            total = total + rec["d_cutmix"] + lc.consistency_weight * rec["d_consistency"]
        if self.step % lc.r1_interval == 0 and lc.r1_gamma > 0:
            rec["r1"] = r1_penalty(lambda x: self.D(self._augment(x)), x_real.detach(), lc.r1_gamma)
            total = total + rec["r1"] * lc.r1_interval
        rec["d_loss"] = total
        out = {k: float(v.detach()) for k, v in rec.items()}
        if not _finite(total):
            raise TrainingDiverged(self.step, out)
        self.opt_d.zero_grad(set_to_none=True)
        total.backward()
        self.opt_d.step()

        if self.config.ada.enabled:
            self.ada = ada_ops.observe(self.ada, out_r.scalar)
            if (self.step + 1) % self.ada.interval == 0:
                self.ada = ada_ops.update_p(self.ada, b * self.ada.interval)
        out["disordered"] = disordered
        out["real_score"] = float(out_r.scalar.detach().mean())
        out["fake_score"] = float(out_f.scalar.detach()[:b].mean())
        return out

    def generator_step(self, batch_size: int) -> Dict[str, float]:
        lc = self.config.loss
        rec = {}
        self.G.requires_grad_(True)
        self.D.requires_grad_(False)
        w, ws = self._latents(batch_size)
        fake = self.G.synthesize(ws, noise="fresh", generator=self.rng)
        out = self.D(self._augment(sequences_to_channels(*fake)))
        k = topk_count(lc.topk_fraction(self.step, self.total_steps), batch_size)
        rec["g_adv"] = g_loss(out, k, lc.pixel_loss_weight)
        total = rec["g_adv"]
        if self.step % lc.pl_interval == 0 and lc.pl_weight > 0:
            n = max(1, batch_size // lc.pl_batch_shrink)
            w_pl = self.G.map_latent(self._z(n))
            res = path_length_penalty(
                lambda x: sequences_to_channels(*self.G.synthesize(x, noise="fresh", generator=self.rng)),
                w_pl, self.pl_mean, lc.pl_ema_decay, generator=self.rng,
            )
            self.pl_mean = res.pl_mean
            rec["pl"] = res.penalty
            total = total + res.penalty * lc.pl_weight * lc.pl_interval
        rec["g_loss"] = total
        logged = {k_: float(v.detach()) for k_, v in rec.items()}
        if not _finite(total):
            raise TrainingDiverged(self.step, logged)
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()
        self.G.update_w_avg(w)
        logged["topk"] = k
        return logged

    def train_step(self, real: ImageSequencePair) -> Dict[str, float]:
        """One D update, one G update, EMA and ADA bookkeeping; returns the log record."""
        self.D.train()
        self.G.train()
        record = {"step": self.step}
        record.update(self.discriminator_step(real))
        record.update(self.generator_step(real.bf.shape[0]))
        ema_update(self.G_ema, self.G, self.config.training.ema_decay)
        record.update(ada_p=self.ada.p, ada_rt=self.ada.r_t, pl_mean=float(self.pl_mean))
        self.step += 1
        return record

    # -- persistence -----------------------------------------------------------

    def state_dict(self) -> dict:
        params = {}
        for prefix, module in (("generator", self.G), ("generator_ema", self.G_ema), ("discriminator", self.D)):
            for name, t in module.state_dict().items():
                params[f"{prefix}.{name}"] = list(t.shape)
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "step": self.step,
            "total_steps": self.total_steps,
            "generator": self.G.state_dict(),
            "generator_ema": self.G_ema.state_dict(),
            "discriminator": self.D.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "pl_mean": self.pl_mean.clone(),
            "ada": self.ada.to_dict(),
            "rng": self.rng.get_state(),
            "shapes": params,
        }

    def load_state_dict(self, state: dict):
        check_checkpoint(state)
        self.G.load_state_dict(state["generator"])
        self.G_ema.load_state_dict(state["generator_ema"])
        self.D.load_state_dict(state["discriminator"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.pl_mean = state["pl_mean"].clone()
        self.ada = AdaState(**state["ada"])
        self.rng.set_state(state["rng"])
        self.step = int(state["step"])
        self.total_steps = int(state["total_steps"])

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)
        return path

    @classmethod
    def from_checkpoint(cls, path) -> "Trainer":
        state = read_checkpoint(path)
        trainer = cls(RunConfig.from_dict(state["config"]), state["total_steps"])
        trainer.load_state_dict(state)
        return trainer


def check_checkpoint(state: dict):
    if state.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a multistylegan checkpoint")
    if state.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {state.get('version')} unsupported")


def read_checkpoint(path) -> dict:
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ValueError(f"{path}: cannot read checkpoint ({exc})") from exc
    check_checkpoint(state)
    return state


def load_generator(path, ema: bool = True) -> Generator:
    """Inference-only generator from a checkpoint (EMA weights by default)."""
    state = read_checkpoint(path)
    cfg = RunConfig.from_dict(state["config"])
    g = Generator(cfg.generator)
    g.load_state_dict(state["generator_ema" if ema else "generator"])
    return g.eval().requires_grad_(False)


def fixed_latents(seed: int, count: int, dim: int) -> torch.Tensor:
    """``count`` latents drawn one by one, so latent i does not depend on ``count``."""
    g = torch.Generator().manual_seed(seed)
    return torch.cat([torch.randn(1, dim, generator=g) for _ in range(count)])


def run_training(config: RunConfig, index: DatasetIndex, out_dir, resume: Optional[str] = None,
                 trainer: Optional[Trainer] = None) -> Trainer:
    """Train over ``index``, writing logs, sample grids and checkpoints into ``out_dir``.

    Layout: ``config.yaml``, ``log.jsonl`` (one JSON record per logged step),
    ``samples/step_XXXXXXX.png`` and ``checkpoints/{step_XXXXXXX,latest}.pt``.
    """
    tc = config.training
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_windows = count_windows(index)
    if tc.epochs > 0 and n_windows == 0:
        raise ValueError("dataset has no windows")
    batch = min(tc.batch_size, n_windows) if n_windows else tc.batch_size
    bpe = batches_per_epoch(n_windows, batch) if n_windows else 0
    total = tc.epochs * bpe
    if tc.max_steps is not None:
        total = min(total, tc.max_steps)
    if trainer is None:
        trainer = Trainer.from_checkpoint(resume) if resume else Trainer(config, total)
    trainer.total_steps = total
    dump_config(config, out_dir / "config.yaml")
    ckpt_dir = out_dir / "checkpoints"
    sample_z = fixed_latents(tc.seed, tc.sample_count, config.generator.latent_dim)

    def write_samples():
        with torch.no_grad():
            img = trainer.G_ema.synthesize(trainer.G_ema.map_latent(sample_z), noise="zero")
        save_png(batch_image(img.bf, img.gfp), out_dir / "samples" / f"step_{trainer.step:07d}.png")

    def checkpoint():
        p = trainer.save_checkpoint(ckpt_dir / f"step_{trainer.step:07d}.pt")
        trainer.save_checkpoint(ckpt_dir / "latest.pt")
        return p

    t0 = time.time()
    with open(out_dir / "log.jsonl", "a") as log_fh:
        while trainer.step < total:
            epoch, offset = divmod(trainer.step, bpe)
            for i, ids in enumerate(epoch_batches(n_windows, batch, tc.seed, epoch)):
                if i < offset:
                    continue
                if trainer.step >= total:
                    break
                data_rng = torch.Generator().manual_seed(tc.seed * 7919 + trainer.step)
                real = load_batch(index, ids, data_rng, config.data.augment_flip)
                try:
                    record = trainer.train_step(real)
                except TrainingDiverged as exc:
                    log_fh.write(json.dumps({"step": exc.step, "error": "non-finite loss", **exc.components}) + "\n")
                    raise
                record["epoch"] = epoch
                if record["step"] % tc.log_interval == 0:
                    log_fh.write(json.dumps(record) + "\n")
                    log_fh.flush()
                s = trainer.step
                if tc.sample_interval and s % tc.sample_interval == 0:
                    write_samples()
                if tc.checkpoint_interval and s % tc.checkpoint_interval == 0:
                    checkpoint()
                if s % 50 == 0:
                    log.info("step %d/%d d=%.4f g=%.4f p=%.3f (%.1fs)", s, total, record["d_loss"], record["g_loss"], trainer.ada.p, time.time() - t0)
    write_samples()
    checkpoint()
    return trainer
