"""Image-quality reporting for robustified inputs."""
from __future__ import annotations

import math

import torch


def psnr(x: torch.Tensor, x_rob: torch.Tensor) -> float:
    """``10 log10(1 / MSE)`` in dB for [0, 1] images; ``math.inf`` when they are identical."""
    if x.shape != x_rob.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_rob.shape)}")
    mse = float(((x - x_rob) ** 2).mean())
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def mean_psnr(xs: torch.Tensor, xs_rob: torch.Tensor) -> float:
    """Average of per-sample PSNR over a batch (infinite if any sample is unchanged)."""
    return sum(psnr(a, b) for a, b in zip(xs, xs_rob)) / len(xs)


def worst_case_psnr(eps_d: float) -> float:
    """PSNR when every pixel moves by exactly ``eps_d``."""
    return -20.0 * math.log10(eps_d)
