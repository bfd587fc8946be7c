import torch

from kvedit.denoiser import Denoiser


def wake(model: Denoiser, seed: int = 0, scale: float = 0.05) -> Denoiser:
    """Give the zero-initialized modulation and output layers small random weights.

    A fresh denoiser is the pure skip map; tests that probe the network need
    every pathway live.
    """
    g = torch.Generator().manual_seed(seed)
    layers = [b.modulation for b in model.blocks.values()] + [model.out_modulation, model.patch_out]
    with torch.no_grad():
        for layer in layers:
            for p in (layer.weight, layer.bias):
                p.copy_(scale * torch.randn(p.shape, generator=g))
    return model
