"""Random input augmentation (crop, shift, rotation, flip)."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from a5.imaging import rotate, shift_image
from a5.rng import Rng


@dataclass(frozen=True)
class AugmentPolicy:
    max_shift_px: int = 0
    max_rotation_deg: float = 0.0
    horizontal_flip: bool = False
    max_crop_px: int = 0

    def __post_init__(self):
        if min(self.max_shift_px, self.max_rotation_deg, self.max_crop_px) < 0:
            raise ValueError("augmentation magnitudes must be >= 0")

    @property
    def is_identity(self) -> bool:
        return not (self.max_shift_px or self.max_rotation_deg or self.horizontal_flip or self.max_crop_px)


def augment_batch(x: torch.Tensor, policy: AugmentPolicy, rng: Rng) -> torch.Tensor:
    """Augment every sample of ``x`` (B, C, H, W) independently.

    Random crops are zero-padded crops, i.e. integer translations by up to
    ``max_crop_px``; they compose with the ``max_shift_px`` shift.
    """
    if policy.is_identity:
        return x
    gen = rng.generator("augment")
    b = x.shape[0]
    reach = policy.max_shift_px + policy.max_crop_px
    shifts = gen.integers(-reach, reach + 1, size=(b, 2)) if reach else [[0, 0]] * b
    angles = gen.uniform(-policy.max_rotation_deg, policy.max_rotation_deg, size=b) \
        if policy.max_rotation_deg else [0.0] * b
    flips = gen.uniform(size=b) < 0.5 if policy.horizontal_flip else [False] * b
    out = torch.stack([shift_image(x[i], int(shifts[i][0]), int(shifts[i][1])) for i in range(b)])
    out = rotate(out, torch.as_tensor(angles, dtype=x.dtype))
    flips = torch.as_tensor(flips, dtype=torch.bool)
    if bool(flips.any()):
        out = torch.where(flips[:, None, None, None], out.flip(-1), out)
    return out.clamp(0.0, 1.0)


def augment_sample(x: torch.Tensor, policy: AugmentPolicy, rng: Rng) -> torch.Tensor:
    """Augment a single ``(C, H, W)`` image."""
    return augment_batch(x.unsqueeze(0), policy, rng)[0]
