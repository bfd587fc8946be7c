"""Epsilon-prediction training with prompt dropout for classifier-free guidance."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from ..denoiser import Denoiser
from ..numerics import mse_loss
from ..scheduler import NoiseSchedule, add_noise_batch
from .world import NULL_ID, PromptTokens, Sample

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


LOSS_WEIGHTINGS = ("uniform", "p2", "velocity")
VELOCITY_CLIP = 20.0


@dataclass
class TrainConfig:
    epochs: int = 30
    batch: int = 64
    lr: float = 1e-3
    null_prob: float = 0.1
    seed: int = 0
    grad_clip: float = 1.0
    # Cosine decay of the learning rate to zero over all steps.
    cosine: bool = True
    # "uniform" weighs every time step equally; "p2" multiplies the per-sample
    # loss by 1/(1 + SNR(t)), normalized to mean one over t, shifting effort
    # from low-noise steps to the steps where layout is decided. "velocity"
    # uses min(1/alpha_bar(t), VELOCITY_CLIP), which is the velocity-space MSE
    # with its high-noise end capped.
    loss_weighting: str = "velocity"

    def __post_init__(self) -> None:
        if self.loss_weighting not in LOSS_WEIGHTINGS:
            raise ValueError(f"unknown loss weighting {self.loss_weighting!r}")


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)

    def summary(self) -> dict:
        n = max(1, len(self.losses) // 10)
        return {
            "steps": len(self.losses),
            "first_10pct_mean": float(np.mean(self.losses[:n])) if self.losses else None,
            "last_10pct_mean": float(np.mean(self.losses[-n:])) if self.losses else None,
        }


def embed_prompt(model: Denoiser, tokens: PromptTokens | Sequence[int] | torch.Tensor) -> torch.Tensor:
    """Look up prompt rows ``[null, color, texture, shape, pose]`` in the model's table."""
    ids = tokens.ids() if isinstance(tokens, PromptTokens) else tokens
    ids = torch.as_tensor(ids, dtype=torch.long)
    if bool(((ids < 0) | (ids >= model.cfg.vocab)).any()):
        raise IndexError(f"token id outside vocabulary of {model.cfg.vocab}: {ids.tolist()}")
    return model.token_table[ids]


def null_embedding(model: Denoiser) -> torch.Tensor:
    return embed_prompt(model, [NULL_ID] * 5)


def init_model(seed: int, sched: NoiseSchedule) -> Denoiser:
    """Fresh weights drawn from torch's global generator seeded with ``seed``."""
    torch.manual_seed(seed)
    return Denoiser(alpha_bar=sched.alpha_bar)


def time_weights(sched: NoiseSchedule, kind: str) -> torch.Tensor:
    """Per-step loss weights indexed by t (entry 0 unused), mean one over 1..T."""
    ab = torch.as_tensor(np.asarray(sched.alpha_bar, dtype=np.float64))
    if kind == "uniform":
        w = torch.ones_like(ab)
    elif kind == "p2":
        w = 1.0 / (1.0 + ab / (1.0 - ab).clamp_min(1e-12))
    else:
        w = (1.0 / ab).clamp_max(VELOCITY_CLIP)
    w[0] = 0.0
    return (w / w[1:].mean()).to(torch.get_default_dtype())


def train_denoiser(
    data: Sequence[Sample],
    model: Denoiser,
    sched: NoiseSchedule,
    cfg: TrainConfig = TrainConfig(),
) -> TrainResult:
    """Train ``model`` in place. Randomness comes from one ``torch.Generator`` seeded by ``cfg.seed``."""
    if not data:
        raise TrainingError("empty dataset")
    gen = torch.Generator().manual_seed(cfg.seed)
    images = torch.from_numpy(np.stack([s.image for s in data]))
    ids = torch.tensor([s.tokens.ids() for s in data], dtype=torch.long)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999))
    result = TrainResult()
    n = len(data)
    steps_per_epoch = math.ceil(n / cfg.batch)
    decay = (
        torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs * steps_per_epoch) if cfg.cosine else None
    )
    weights = time_weights(sched, cfg.loss_weighting)
    model.train()
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch : (b + 1) * cfg.batch]
            z0 = images[idx]
            tok = ids[idx].clone()
            drop = torch.rand(len(idx), generator=gen) < cfg.null_prob
            tok[drop] = NULL_ID
            t = torch.randint(1, sched.T_train + 1, (len(idx),), generator=gen)
            noise = torch.randn(z0.shape, generator=gen)
            zt = add_noise_batch(z0, t, noise, sched)
            eps, _ = model(zt, t, model.token_table[tok])
            if cfg.loss_weighting == "uniform":
                loss = mse_loss(eps, noise)
            else:
                loss = (weights[t] * ((eps - noise) ** 2).mean(dim=(1, 2, 3))).mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch} batch {b}")
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            if decay is not None:
                decay.step()
            result.losses.append(loss.item())
        log.info("epoch %d loss %.4f", epoch, np.mean(result.losses[-steps_per_epoch:]))
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return result
