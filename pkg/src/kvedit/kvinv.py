"""KV inversion: trace capture, per-step K/V embedding tuning, and editing.

The three stages share one convention for classifier-free guidance: every
network call is a batch of two, row 0 conditioned on the prompt and row 1 on
the null prompt. Cached K/V tensors keep that leading axis of two.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import torch

from .denoiser import KV, BlockPlace, Denoiser, SiteId, attention_sites
from .numerics import DimensionError, mse_loss
from .scheduler import NoiseSchedule, ddim_invert_step, ddim_step

log = logging.getLogger(__name__)

PAPER_GUIDANCE = 7.5


class DivergenceError(ArithmeticError):
    pass


class KVConfigError(ValueError):
    pass


SCALARS = ("lambda_k", "lambda_v", "gamma_k", "gamma_v")


@dataclass
class KVEntry:
    """Learnable blend for one (site, step)."""

    K_hat: torch.Tensor
    V_hat: torch.Tensor
    lambda_k: torch.Tensor
    lambda_v: torch.Tensor
    gamma_k: torch.Tensor
    gamma_v: torch.Tensor

    @classmethod
    def fresh(cls, tokens: int, width: int) -> "KVEntry":
        one, zero = torch.tensor(1.0), torch.tensor(0.0)
        return cls(
            torch.zeros(tokens, width),
            torch.zeros(tokens, width),
            one.clone(),
            one.clone(),
            zero.clone(),
            zero.clone(),
        )

    def tensors(self) -> list[torch.Tensor]:
        return [self.K_hat, self.V_hat, self.lambda_k, self.lambda_v, self.gamma_k, self.gamma_v]

    def named(self) -> dict[str, torch.Tensor]:
        return dict(zip(("K_hat", "V_hat", *SCALARS), self.tensors()))

    def numel(self) -> int:
        return sum(t.numel() for t in self.tensors())

    def is_fresh(self) -> bool:
        return (
            not bool(self.K_hat.any())
            and not bool(self.V_hat.any())
            and float(self.gamma_k) == 0.0
            and float(self.gamma_v) == 0.0
        )


@dataclass
class KVParams:
    """psi: one ``KVEntry`` per (site, step) plus the cached native K/V of the tuned pass."""

    sites: tuple[SiteId, ...]
    steps: tuple[int, ...]
    entries: dict[tuple[SiteId, int], KVEntry]
    cache: dict[tuple[SiteId, int], tuple[torch.Tensor, torch.Tensor]] = field(default_factory=dict)

    def entry(self, site: SiteId, step: int) -> KVEntry:
        try:
            return self.entries[(site, step)]
        except KeyError:
            raise KVConfigError(f"no psi entry for site {site} step {step}") from None

    def numel(self) -> int:
        return sum(e.numel() for e in self.entries.values())


def init_kv_params(sites: Sequence[SiteId], steps: Sequence[int], tokens: int = 64, width: int = 64) -> KVParams:
    """Identity blend everywhere: lambda=1, gamma=0, K_hat=V_hat=0."""
    if not sites or not steps:
        raise KVConfigError("need at least one site and one step")
    entries = {(s, t): KVEntry.fresh(tokens, width) for s in sites for t in steps}
    return KVParams(tuple(sites), tuple(steps), entries)


def blend_kv(K: torch.Tensor, V: torch.Tensor, p: KVEntry) -> tuple[torch.Tensor, torch.Tensor]:
    if p.K_hat.shape != K.shape[-2:] or p.V_hat.shape != V.shape[-2:]:
        raise DimensionError(
            f"K_hat{tuple(p.K_hat.shape)}/V_hat{tuple(p.V_hat.shape)} vs K{tuple(K.shape)}/V{tuple(V.shape)}"
        )
    return p.lambda_k * K + p.gamma_k * p.K_hat, p.lambda_v * V + p.gamma_v * p.V_hat


def cfg_combine(eps_u: torch.Tensor, eps_c: torch.Tensor, w: float) -> torch.Tensor:
    if eps_u.shape != eps_c.shape:
        raise DimensionError(f"eps shapes differ: {tuple(eps_u.shape)} vs {tuple(eps_c.shape)}")
    return eps_u + w * (eps_c - eps_u)


def guided_eps(model: Denoiser, z: torch.Tensor, t: int, c: torch.Tensor, c_u: torch.Tensor, w: float, override=None):
    """One batched cond/uncond call; returns the guided noise and the native K/V record."""
    eps, record = model(torch.stack([z, z]), t, torch.stack([c, c_u]), override)
    return cfg_combine(eps[1], eps[0], w), record


def _check_finite(z: torch.Tensor, what: str, step: int) -> None:
    if not bool(torch.isfinite(z).all()):
        raise DivergenceError(f"non-finite {what} at step {step}")


@dataclass
class DiffTrace:
    """Latents at every DDIM boundary: ``latents[k]`` lives at step ``bounds[k]``."""

    latents: torch.Tensor
    bounds: tuple[int, ...]
    c_s: torch.Tensor
    c_u: torch.Tensor
    guidance: float
    eps: list[torch.Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.bounds)

    def at(self, step: int) -> torch.Tensor:
        return self.latents[self.bounds.index(step)]


@torch.no_grad()
def invert_trace(
    z0: torch.Tensor,
    c_s: torch.Tensor,
    c_u: torch.Tensor,
    model: Denoiser,
    sched: NoiseSchedule,
    w: float = PAPER_GUIDANCE,
) -> DiffTrace:
    """DDIM inversion with guided noise evaluated at ``(z_{t_prev}, max(t_prev, 1))``."""
    bounds = (0,) + sched.ddim_steps
    latents = [z0]
    eps_used = []
    z = z0
    for k in range(1, len(bounds)):
        t_prev, t = bounds[k - 1], bounds[k]
        eps, _ = guided_eps(model, z, max(t_prev, 1), c_s, c_u, w)
        z = ddim_invert_step(z, eps, t_prev, t, sched)
        _check_finite(z, "inverted latent", t)
        latents.append(z)
        eps_used.append(eps)
    return DiffTrace(torch.stack(latents), bounds, c_s, c_u, w, eps_used)


WARM_STARTS = ("off", "native", "carry")


@dataclass
class TuneConfig:
    eta: float = 1e-2
    max_iters: int = 20
    tol: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    guidance: float = PAPER_GUIDANCE
    # Guidance of the DDIM inversion that produces the trace.
    inversion_guidance: float = 1.0
    # K_hat/V_hat start at zero with gamma=0, a saddle where neither receives
    # gradient. "native" seeds them with the native K/V, which keeps the blend
    # exact; "carry" then also moves over the blend tuned one step earlier
    # (its lambdas, gammas and K_hat - K offsets) before the first update.
    warm_start: str = "native"

    def __post_init__(self) -> None:
        if not self.eta > 0:
            raise KVConfigError("eta must be positive")
        if self.max_iters < 0:
            raise KVConfigError("max_iters must be non-negative")
        if self.guidance < 1 or self.inversion_guidance < 1:
            raise KVConfigError("guidance scales must be >= 1")
        if self.warm_start not in WARM_STARTS:
            raise KVConfigError(f"warm_start must be one of {WARM_STARTS}")

    def to_json(self) -> dict:
        return {
            "eta": self.eta,
            "max_iters": self.max_iters,
            "tol": self.tol,
            "betas": list(self.betas),
            "guidance": self.guidance,
            "inversion_guidance": self.inversion_guidance,
            "warm_start": self.warm_start,
        }


def _blend_hook(psi: KVParams, step: int, sites: Iterable[SiteId]):
    active = {s: psi.entry(s, step) for s in sites}

    def hook(site, k, v):
        e = active.get(site)
        return None if e is None else blend_kv(k, v, e)

    return hook


@dataclass
class StepReport:
    step: int
    initial_loss: float
    final_loss: float
    losses: list[float]

    def to_json(self) -> dict:
        return {"step": self.step, "initial_loss": self.initial_loss, "final_loss": self.final_loss,
                "iters": len(self.losses) - 1}


def tune_timestep(
    t: int,
    t_prev: int,
    z_t: torch.Tensor,
    trace: DiffTrace,
    psi: KVParams,
    cfg: TuneConfig,
    model: Denoiser,
    sched: NoiseSchedule,
) -> tuple[torch.Tensor, list[float]]:
    """Fit psi at step ``t`` so one guided DDIM step from ``z_t`` lands on the trace.

    Returns the next latent under the best-loss parameters and the loss per
    evaluation. The first evaluation always uses the blend as given (the plain
    DDIM gap for a fresh entry); a carried warm start is applied after it. The
    native K/V of the best pass are cached on ``psi`` for the editing stage.
    """
    target = trace.at(t_prev)
    entries = [psi.entry(s, t) for s in psi.sites]
    params = [p for e in entries for p in e.tensors()]
    hook = _blend_hook(psi, t, psi.sites)
    z_t = z_t.detach()
    warm = cfg.max_iters > 0 and cfg.warm_start != "off" and all(e.is_fresh() for e in entries)

    def evaluate():
        eps, rec = guided_eps(model, z_t, t, trace.c_s, trace.c_u, cfg.guidance, hook)
        z_prev = ddim_step(z_t, eps, t, t_prev, sched)
        return mse_loss(target, z_prev), z_prev, rec

    losses: list[float] = []
    best = None

    def keep(loss, z_prev, rec) -> bool:
        nonlocal best
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite tuning loss at step {t}; try a smaller eta")
        losses.append(value)
        if best is None or value < best[0]:
            best = (
                value,
                [p.detach().clone() for p in params],
                z_prev.detach(),
                {s: (k.detach(), v.detach()) for s, (k, v) in rec.items()},
            )
        return value <= cfg.tol

    done = False
    if warm:
        with torch.no_grad():
            loss, z_prev, rec = evaluate()
            for s, e in zip(psi.sites, entries):
                e.K_hat.copy_(rec[s][0][0])
                e.V_hat.copy_(rec[s][1][0])
            done = keep(loss, z_prev, rec)
            if not done and cfg.warm_start == "carry":
                _carry_blend(psi, t, rec)

    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=cfg.eta, betas=cfg.betas)
    try:
        for it in range(cfg.max_iters + 1):
            if done:
                break
            last = it == cfg.max_iters
            with torch.set_grad_enabled(not last):
                loss, z_prev, rec = evaluate()
            if keep(loss, z_prev, rec) or last:
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
    finally:
        for p in params:
            p.requires_grad_(False)
            p.grad = None

    _, snapshot, z_prev, rec = best
    with torch.no_grad():
        for p, saved in zip(params, snapshot):
            p.copy_(saved)
    for s in psi.sites:
        psi.cache[(s, t)] = rec[s]
    return z_prev, losses


def _carry_blend(psi: KVParams, t: int, rec: Mapping[SiteId, KV]) -> None:
    """Start step ``t`` from the blend tuned at the step just above it.

    The scalars are copied; K_hat/V_hat keep the previous offset from the
    native K/V, re-anchored on this step's native K/V in ``rec``.
    """
    later = [u for u in psi.steps if u > t]
    if not later:
        return
    above = min(later)
    for s in psi.sites:
        if (s, above) not in psi.cache:
            continue
        prev, cur = psi.entry(s, above), psi.entry(s, t)
        pk, pv = psi.cache[(s, above)]
        cur.K_hat.copy_(rec[s][0][0] + prev.K_hat - pk[0])
        cur.V_hat.copy_(rec[s][1][0] + prev.V_hat - pv[0])
        for name in SCALARS:
            getattr(cur, name).copy_(getattr(prev, name))


@dataclass
class TuneReport:
    steps: list[StepReport]
    recon_mse: float
    reconstruction: torch.Tensor

    def to_json(self) -> dict:
        return {"steps": [s.to_json() for s in self.steps], "recon_mse": self.recon_mse}


def tune_all(
    trace: DiffTrace,
    cfg: TuneConfig,
    model: Denoiser,
    sched: NoiseSchedule,
    psi: KVParams | None = None,
) -> tuple[KVParams, TuneReport]:
    """Descend from the end of the trace, tuning psi one step at a time."""
    if psi is None:
        sites = [s for s, _ in attention_sites(model.cfg)]
        psi = init_kv_params(sites, sched.ddim_steps, model.cfg.n_tokens, model.cfg.d_model)
    z = trace.latents[-1]
    reports = []
    for t, t_prev in sched.step_pairs():
        try:
            z, losses = tune_timestep(t, t_prev, z, trace, psi, cfg, model, sched)
        except DivergenceError as exc:
            raise DivergenceError(f"tuning failed at step {t}: {exc}") from exc
        _check_finite(z, "tuned latent", t_prev)
        reports.append(StepReport(t, losses[0], min(losses), losses))
    recon = float(mse_loss(z, trace.latents[0]))
    return psi, TuneReport(reports, recon, z)


@dataclass(frozen=True)
class CPAttnConfig:
    places: frozenset[BlockPlace] = frozenset({BlockPlace.DECODER})
    start_fraction: float = 0.4

    def __post_init__(self) -> None:
        if not 0.0 <= self.start_fraction <= 1.0:
            raise KVConfigError(f"start_fraction {self.start_fraction} outside [0, 1]")
        if not self.places:
            raise KVConfigError("CP-attn needs at least one place")

    def first_active(self, n_steps: int) -> int:
        """Index (0 = noisiest step) of the first denoising step that uses CP-attn."""
        return math.ceil(round(self.start_fraction * n_steps, 9))

    def to_json(self) -> dict:
        return {"places": sorted(p.value for p in self.places), "start_fraction": self.start_fraction}


@dataclass
class EditConfig:
    c_t: torch.Tensor
    c_u: torch.Tensor
    guidance: float = PAPER_GUIDANCE
    cpattn: CPAttnConfig = field(default_factory=CPAttnConfig)

    def __post_init__(self) -> None:
        if self.guidance < 1:
            raise KVConfigError("guidance scale must be >= 1")


@torch.no_grad()
def edit(
    trace: DiffTrace,
    psi: KVParams | None,
    cfg: EditConfig,
    model: Denoiser,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Guided sampling from the inverted noise with the target prompt.

    At active (place, step) cells the self-attention K/V are replaced by the
    tuned blend of the source pass; queries come from the edit trajectory.
    ``psi=None`` gives plain guided sampling.
    """
    pairs = sched.step_pairs()
    active_sites = [s for s, p in attention_sites(model.cfg) if p in cfg.cpattn.places]
    first = cfg.cpattn.first_active(len(pairs))
    z = trace.latents[-1]
    for i, (t, t_prev) in enumerate(pairs):
        override = None
        if psi is not None and i >= first:
            override = {}
            for s in active_sites:
                if (s, t) not in psi.cache:
                    raise KVConfigError(f"no tuned K/V cached for site {s} step {t}")
                K, V = psi.cache[(s, t)]
                override[s] = blend_kv(K, V, psi.entry(s, t))
        eps, _ = guided_eps(model, z, t, cfg.c_t, cfg.c_u, cfg.guidance, override)
        z = ddim_step(z, eps, t, t_prev, sched)
        _check_finite(z, "edited latent", t_prev)
    return z


@torch.no_grad()
def sample(
    z_T: torch.Tensor,
    c: torch.Tensor,
    c_u: torch.Tensor,
    model: Denoiser,
    sched: NoiseSchedule,
    w: float = PAPER_GUIDANCE,
) -> torch.Tensor:
    """Plain guided DDIM sampling."""
    z = z_T
    for t, t_prev in sched.step_pairs():
        eps, _ = guided_eps(model, z, t, c, c_u, w)
        z = ddim_step(z, eps, t, t_prev, sched)
        _check_finite(z, "sampled latent", t_prev)
    return z
