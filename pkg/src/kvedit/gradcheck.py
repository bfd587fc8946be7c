"""Finite-difference audit of every gradient path the pipeline relies on.

Runs in float64. Denoiser weights are checked through ``mse(eps, target)``;
psi parameters through the real tuning loss (guided DDIM step vs. trace).
"""
from __future__ import annotations

import copy
from dataclasses import replace

import torch
from torch.func import functional_call

from .denoiser import Denoiser
from .kvinv import KVEntry, blend_kv, guided_eps, init_kv_params
from .numerics import CHECK_DTYPE, finite_diff_check, mse_loss, precision
from .scheduler import NoiseSchedule, ddim_step


def _probe(n: int, count: int, gen: torch.Generator) -> list[int]:
    if n <= count:
        return list(range(n))
    return torch.randperm(n, generator=gen)[:count].tolist()


def run_suite(
    model: Denoiser,
    sched: NoiseSchedule,
    samples_per_tensor: int = 6,
    eps: float = 1e-5,
    floor: float = 1e-6,
    seed: int = 0,
) -> dict[str, float]:
    """Max relative error per checked tensor, keyed ``weights/<name>`` or ``psi/<name>``."""
    with precision(CHECK_DTYPE):
        m = copy.deepcopy(model).to(CHECK_DTYPE)
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)
        gen = torch.Generator().manual_seed(seed)
        z = torch.randn(16, 16, 3, generator=gen, dtype=CHECK_DTYPE)
        target = torch.randn(16, 16, 3, generator=gen, dtype=CHECK_DTYPE)
        ids = torch.tensor([0, 1, 7, 9, 10])
        c = m.token_table[ids]
        c_u = m.token_table[torch.zeros(5, dtype=torch.long)]
        t, t_prev = sched.step_pairs()[len(sched.ddim_steps) // 2]
        results: dict[str, float] = {}

        params = dict(m.named_parameters())
        for name, p in params.items():

            def f(x, name=name):
                eps_hat, _ = functional_call(m, {name: x}, (z, t, c))
                return mse_loss(eps_hat, target)

            idx = _probe(p.numel(), samples_per_tensor, gen)
            results[f"weights/{name}"] = finite_diff_check(f, p, eps, indices=idx, floor=floor)

        sites = [s for s, _ in m.sites()]
        psi = init_kv_params(sites, [t])
        _, rec = guided_eps(m, z, t, c, c_u, 7.5)
        for s in sites:
            e = psi.entry(s, t)
            # Move off the identity point so every factor of the blend is exercised.
            e.K_hat.copy_(rec[s][0][0] + 0.1 * torch.randn(64, 64, generator=gen, dtype=CHECK_DTYPE))
            e.V_hat.copy_(rec[s][1][0] + 0.1 * torch.randn(64, 64, generator=gen, dtype=CHECK_DTYPE))
            for scalar, val in zip((e.lambda_k, e.lambda_v, e.gamma_k, e.gamma_v), (0.8, 0.7, 0.3, 0.4)):
                scalar.fill_(val)
        psi.entries = {k: KVEntry(*(x.to(CHECK_DTYPE) for x in v.tensors())) for k, v in psi.entries.items()}
        z_target = target * 0.1 + z

        def tuning_loss(entries: dict[str, KVEntry]):
            def hook(site, k, v):
                return blend_kv(k, v, entries[site])

            eps_hat, _ = guided_eps(m, z, t, c, c_u, 7.5, hook)
            return mse_loss(z_target, ddim_step(z, eps_hat, t, t_prev, sched))

        for s in sites:
            base = psi.entry(s, t)
            for field_name, value in base.named().items():

                def f(x, s=s, field_name=field_name):
                    entries = {k: psi.entry(k, t) for k in sites}
                    entries[s] = replace(entries[s], **{field_name: x})
                    return tuning_loss(entries)

                idx = _probe(value.numel(), samples_per_tensor, gen)
                results[f"psi/{s}/{field_name}"] = finite_diff_check(f, value, eps, indices=idx, floor=floor)
    return results
