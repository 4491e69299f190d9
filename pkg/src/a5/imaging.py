"""Differentiable image resampling on ``(B, C, H, W)`` float64 batches.

All geometric transforms use inverse mapping: each output pixel (x, y) (column,
row, origin at the top-left pixel center) reads the input at a source location
through bilinear interpolation, with zeros outside the image.  Outputs are
linear in the input image, so gradients w.r.t. the image are exact.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from a5.nn import DTYPE


def pixel_grid(h: int, w: int) -> tuple[torch.Tensor, torch.Tensor]:
    ys, xs = torch.meshgrid(torch.arange(h, dtype=DTYPE), torch.arange(w, dtype=DTYPE), indexing="ij")
    return xs, ys


def bilinear_sample(img: torch.Tensor, src_x: torch.Tensor, src_y: torch.Tensor) -> torch.Tensor:
    """Sample ``img`` (B, C, H, W) at per-sample source coordinates (B, H', W')."""
    b, c, h, w = img.shape
    x0, y0 = torch.floor(src_x), torch.floor(src_y)
    wx, wy = src_x - x0, src_y - y0
    x0, y0 = x0.long(), y0.long()
    flat = img.reshape(b, c, h * w)
    out = torch.zeros(b, c, *src_x.shape[1:], dtype=img.dtype)
    for dy, dx, weight in ((0, 0, (1 - wx) * (1 - wy)), (0, 1, wx * (1 - wy)),
                           (1, 0, (1 - wx) * wy), (1, 1, wx * wy)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).reshape(b, 1, -1).expand(b, c, -1)
        vals = flat.gather(2, idx).reshape(out.shape)
        out = out + vals * (weight * valid).unsqueeze(1)
    return out


def shift_image(img: torch.Tensor, dx: int, dy: int) -> torch.Tensor:
    """Integer translation with zero fill; positive ``dx`` moves content right, ``dy`` down."""
    out = torch.zeros_like(img)
    h, w = img.shape[-2:]
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src = img[..., max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
    out[..., max(0, dy):max(0, dy) + src.shape[-2], max(0, dx):max(0, dx) + src.shape[-1]] = src
    return out


def affine_source(h: int, w: int, matrices: torch.Tensor, offsets: torch.Tensor):
    """Source coordinates ``A (p - c) + c + t`` for per-sample 2x2 ``A`` and offsets ``t``."""
    xs, ys = pixel_grid(h, w)
    cx, cy = (w - 1) / 2, (h - 1) / 2
    px, py = xs - cx, ys - cy
    a = matrices[:, None, None]
    sx = a[..., 0, 0] * px + a[..., 0, 1] * py + cx + offsets[:, 0, None, None]
    sy = a[..., 1, 0] * px + a[..., 1, 1] * py + cy + offsets[:, 1, None, None]
    return sx, sy


def rotation_matrices(angles_deg) -> torch.Tensor:
    """Inverse-mapping matrices for rotations by ``angles_deg`` (counter-clockwise on screen)."""
    theta = torch.as_tensor(angles_deg, dtype=DTYPE).reshape(-1) * (math.pi / 180.0)
    c, s = torch.cos(theta), torch.sin(theta)
    return torch.stack([torch.stack([c, -s], -1), torch.stack([s, c], -1)], -2)


def rotate(img: torch.Tensor, angles_deg) -> torch.Tensor:
    angles = torch.as_tensor(angles_deg, dtype=DTYPE).reshape(-1).expand(img.shape[0])
    if bool((angles == 0).all()):
        return img
    sx, sy = affine_source(*img.shape[-2:], rotation_matrices(angles), torch.zeros(img.shape[0], 2, dtype=DTYPE))
    return bilinear_sample(img, sx, sy)


def homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 projective map sending the four ``src`` points onto ``dst`` (both (4, 2))."""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs += [u, v]
    sol = np.linalg.solve(np.asarray(rows, dtype=np.float64), np.asarray(rhs, dtype=np.float64))
    return np.append(sol, 1.0).reshape(3, 3)


def image_corners(h: int, w: int) -> np.ndarray:
    return np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)


def warp_source(h: int, w: int, hmats: torch.Tensor):
    """Source coordinates under per-sample homographies mapping output -> input pixels."""
    xs, ys = pixel_grid(h, w)
    hm = hmats[:, None, None]
    den = hm[..., 2, 0] * xs + hm[..., 2, 1] * ys + hm[..., 2, 2]
    sx = (hm[..., 0, 0] * xs + hm[..., 0, 1] * ys + hm[..., 0, 2]) / den
    sy = (hm[..., 1, 0] * xs + hm[..., 1, 1] * ys + hm[..., 1, 2]) / den
    return sx, sy


def gaussian_kernel(sigma: float) -> torch.Tensor:
    """Normalized 1-D Gaussian truncated at 3 sigma (at least radius 1)."""
    radius = max(1, int(math.ceil(3 * sigma)))
    t = torch.arange(-radius, radius + 1, dtype=DTYPE)
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: torch.Tensor, sigmas) -> torch.Tensor:
    """Separable Gaussian blur with a per-sample sigma and zero padding."""
    b, c, h, w = img.shape
    kernels = [gaussian_kernel(float(s)) for s in sigmas]
    radius = max(len(k) // 2 for k in kernels)
    bank = torch.zeros(b, 2 * radius + 1, dtype=DTYPE)
    for i, k in enumerate(kernels):
        r = len(k) // 2
        bank[i, radius - r:radius + r + 1] = k
    bank = bank.repeat_interleave(c, dim=0)
    x = img.reshape(1, b * c, h, w)
    x = F.conv2d(x, bank[:, None, None, :], padding=(0, radius), groups=b * c)
    x = F.conv2d(x, bank[:, None, :, None], padding=(radius, 0), groups=b * c)
    return x.reshape(b, c, h, w)
