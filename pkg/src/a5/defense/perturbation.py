"""Sigmoid-bounded defensive perturbations and their application to inputs."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from a5.nn import Network


@dataclass(frozen=True)
class DefenseSpec:
    eps_d: float
    clamp_output: bool = True

    def __post_init__(self):
        if self.eps_d < 0:
            raise ValueError(f"eps_d must be >= 0, got {self.eps_d}")


def defensive_perturbation(z: torch.Tensor, eps_d: float) -> torch.Tensor:
    """``2 * eps_d * (sigmoid(z) - 0.5)``, kept strictly inside (-eps_d, eps_d).

    Computed as ``eps_d * tanh(z / 2)`` (the same map, without cancellation near 0).
    In float64 tanh saturates to exactly 1 for |z| > ~38, so the result is clipped
    to the largest float below ``eps_d``.
    """
    if eps_d < 0:
        raise ValueError(f"eps_d must be >= 0, got {eps_d}")
    if eps_d == 0:
        return torch.zeros_like(z)
    limit = math.nextafter(eps_d, 0.0)
    return (eps_d * torch.tanh(z / 2)).clamp(-limit, limit)


def apply_defense(x: torch.Tensor, delta: torch.Tensor, spec: DefenseSpec) -> torch.Tensor:
    """Robustified input ``clamp(x + delta, 0, 1)`` (unclamped if ``spec.clamp_output`` is off)."""
    if x.shape != delta.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(delta.shape)}")
    out = x + delta
    return out.clamp(0.0, 1.0) if spec.clamp_output else out


class Robustifier:
    """On-the-fly defense: ``x -> apply_defense(x, defensive_perturbation(R(x)))``."""

    def __init__(self, net: Network, spec: DefenseSpec):
        if net.output_shape != net.input_shape:
            raise ValueError(f"robustifier output {net.output_shape} must match its input {net.input_shape}")
        self.net = net
        self.spec = spec

    def perturbation(self, x: torch.Tensor) -> torch.Tensor:
        return defensive_perturbation(self.net(x), self.spec.eps_d)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return apply_defense(x, self.perturbation(x), self.spec)
