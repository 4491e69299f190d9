"""Robust physical prototypes: a stochastic differentiable acquisition model and the
A5/P (prototypes only) and A5/PC (prototypes plus classifier) recipes."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from a5.attacks import AttackConfig
from a5.certify import BoundMethod
from a5.data import Dataset, Prototype, write_pgm
from a5.defense.perturbation import DefenseSpec, apply_defense, defensive_perturbation
from a5.defense.recipes import TrainingDiverged, evaluate, wc_loss
from a5.imaging import (gaussian_blur, homography, image_corners, rotate, shift_image,
                        warp_source, bilinear_sample)
from a5.nn import DTYPE, Network, RmsPropState, StepDecay, rmsprop_step
from a5.rng import Rng

log = logging.getLogger(__name__)

__all__ = [
    "AcquisitionPolicy", "AcquisitionParams", "Prototype", "PhysicalConfig", "PhysicalResult",
    "sample_acquisition", "apply_acquisition", "acquire", "acquisition_dataset",
    "a5p_robustify", "a5pc_cotrain", "robustify_prototypes", "physical_evaluate",
    "synth_glyphs", "write_glyph_set",
]


@dataclass(frozen=True)
class AcquisitionPolicy:
    """Ranges of the random capture transforms; all zero is the identity."""

    max_crop_px: int = 0
    max_rotation_deg: float = 0.0
    perspective_scale: float = 0.0
    noise_sigma: tuple = (0.0, 0.0)
    blur_sigma: tuple = (0.0, 0.0)
    brightness: float = 0.0
    contrast: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "noise_sigma", tuple(float(v) for v in self.noise_sigma))
        object.__setattr__(self, "blur_sigma", tuple(float(v) for v in self.blur_sigma))
        scalars = (self.max_crop_px, self.max_rotation_deg, self.perspective_scale, self.brightness, self.contrast)
        if min(scalars) < 0 or min(self.noise_sigma + self.blur_sigma) < 0:
            raise ValueError("acquisition ranges must be non-negative")
        for name, (lo, hi) in (("noise_sigma", self.noise_sigma), ("blur_sigma", self.blur_sigma)):
            if lo > hi:
                raise ValueError(f"{name} range is not ordered: {lo} > {hi}")
        if self.blur_sigma[1] > 0 and self.blur_sigma[0] <= 0:
            raise ValueError("blur_sigma lower end must be > 0 (log-uniform sampling)")
        if self.brightness >= 1 or self.contrast >= 1:
            raise ValueError("brightness and contrast jitter must be < 1")

    @classmethod
    def scanner(cls, max_crop_px: int = 5, perspective_scale: float = 0.25) -> "AcquisitionPolicy":
        """Document-scanning ranges: crop, 5 degree rotation, perspective, noise, blur, 0.1 jitter."""
        return cls(max_crop_px, 5.0, perspective_scale, (0.2 / 255, 25 / 255), (0.01, 1.0), 0.1, 0.1)

    @property
    def is_identity(self) -> bool:
        return not (self.max_crop_px or self.max_rotation_deg or self.perspective_scale or self.noise_sigma[1]
                    or self.blur_sigma[1] or self.brightness or self.contrast)


@dataclass
class AcquisitionParams:
    """Frozen per-sample transform parameters (None marks a skipped stage)."""

    shifts: np.ndarray
    angles: torch.Tensor | None
    homographies: torch.Tensor | None
    brightness: torch.Tensor | None
    contrast: torch.Tensor | None
    blur: np.ndarray | None
    noise: torch.Tensor | None

    def __len__(self):
        return len(self.shifts)


def sample_acquisition(policy: AcquisitionPolicy, n: int, shape, rng: Rng) -> AcquisitionParams:
    c, h, w = shape
    gen = rng.generator("acquire")
    shifts = gen.integers(-policy.max_crop_px, policy.max_crop_px + 1, size=(n, 2)) \
        if policy.max_crop_px else np.zeros((n, 2), dtype=np.int64)
    angles = None
    if policy.max_rotation_deg:
        angles = torch.from_numpy(gen.uniform(-policy.max_rotation_deg, policy.max_rotation_deg, size=n))
    hmats = None
    if policy.perspective_scale:
        corners = image_corners(h, w)
        side = np.array([w - 1, h - 1], dtype=np.float64)
        disp = gen.uniform(-1, 1, size=(n, 4, 2)) * policy.perspective_scale * side
        # the map sends output pixels to source pixels: distorted corners -> original corners
        hmats = torch.from_numpy(np.stack([homography(corners + d, corners) for d in disp]))
    bright = torch.from_numpy(gen.uniform(1 - policy.brightness, 1 + policy.brightness, size=n)) \
        if policy.brightness else None
    contrast = torch.from_numpy(gen.uniform(1 - policy.contrast, 1 + policy.contrast, size=n)) \
        if policy.contrast else None
    blur = None
    if policy.blur_sigma[1] > 0:
        lo, hi = np.log(policy.blur_sigma[0]), np.log(policy.blur_sigma[1])
        blur = np.exp(gen.uniform(lo, hi, size=n))
    noise = None
    if policy.noise_sigma[1] > 0:
        sig = gen.uniform(*policy.noise_sigma, size=n)
        noise = torch.from_numpy(gen.standard_normal((n, c, h, w)) * sig[:, None, None, None])
    return AcquisitionParams(shifts, angles, hmats, bright, contrast, blur, noise)


def apply_acquisition(w: torch.Tensor, params: AcquisitionParams) -> torch.Tensor:
    """Deterministic capture of a ``(B, C, H, W)`` batch; differentiable in ``w``.

    Order: crop/shift, rotation, perspective warp, brightness/contrast, blur, noise, clamp.
    """
    b, _, h, wd = w.shape
    if len(params) != b:
        raise ValueError(f"{len(params)} parameter sets for a batch of {b}")
    x = w
    if params.shifts.any():
        x = torch.stack([shift_image(x[i], int(params.shifts[i, 0]), int(params.shifts[i, 1])) for i in range(b)])
    if params.angles is not None:
        x = rotate(x, params.angles)
    if params.homographies is not None:
        x = bilinear_sample(x, *warp_source(h, wd, params.homographies))
    if params.brightness is not None:
        x = x * params.brightness[:, None, None, None]
    if params.contrast is not None:
        mean = x.mean(dim=(1, 2, 3), keepdim=True)
        x = mean + params.contrast[:, None, None, None] * (x - mean)
    if params.blur is not None:
        x = gaussian_blur(x, params.blur)
    if params.noise is not None:
        x = x + params.noise
    return x.clamp(0.0, 1.0)


def acquire(w, policy: AcquisitionPolicy, rng: Rng, n: int | None = None) -> torch.Tensor:
    """Simulated capture of a prototype (or a ``(C, H, W)`` image).

    Returns one ``(C, H, W)`` image, or ``n`` independent captures when ``n`` is given.
    """
    img = w.w if isinstance(w, Prototype) else w
    count = 1 if n is None else n
    params = sample_acquisition(policy, count, tuple(img.shape), rng)
    x = apply_acquisition(img.unsqueeze(0).expand(count, *img.shape), params)
    return x[0] if n is None else x


def acquisition_dataset(prototypes: list[Prototype], policy: AcquisitionPolicy, per_prototype: int,
                        rng: Rng, num_classes: int | None = None) -> Dataset:
    """``per_prototype`` captures of every prototype, each from its own stream."""
    xs, ys = [], []
    for k, proto in enumerate(prototypes):
        xs.append(acquire(proto, policy, rng.child("proto", k), per_prototype).detach())
        ys.append(torch.full((per_prototype,), proto.label, dtype=torch.long))
    m = num_classes if num_classes is not None else max(p.label for p in prototypes) + 1
    return Dataset(torch.cat(xs), torch.cat(ys), m, f"acquired:{len(prototypes)}x{per_prototype}")


# -- recipes ------------------------------------------------------------------------------

@dataclass
class PhysicalConfig:
    steps: int = 200
    lr: float = 0.05  # on the prototype latents
    lr_milestones: tuple = ()
    lr_factor: float = 0.1
    lr_classifier: float = 0.0  # A5/PC only
    samples_per_step: int = 8  # captures of every prototype per step
    eps_ar: float = 0.125
    eps_d: float = 1.0
    method: str = "crown-ibp"
    seed: int = 0
    rms_decay: float = 0.9

    def __post_init__(self):
        if self.steps < 0 or self.samples_per_step < 1:
            raise ValueError("steps must be >= 0 and samples_per_step >= 1")
        if min(self.eps_ar, self.eps_d, self.lr, self.lr_classifier) < 0:
            raise ValueError("eps values and learning rates must be >= 0")
        self.lr_milestones = tuple(self.lr_milestones)


@dataclass
class PhysicalResult:
    prototypes: list
    z: torch.Tensor
    classifier: Network
    loss_trace: list = field(default_factory=list)


def robustify_prototypes(prototypes: list[Prototype], z: torch.Tensor, eps_d: float) -> list[Prototype]:
    spec = DefenseSpec(eps_d)
    out = []
    for proto, zk in zip(prototypes, z):
        w = apply_defense(proto.w, defensive_perturbation(zk, eps_d), spec).detach()
        out.append(Prototype(w, proto.label, proto.name))
    return out


def _physical_fit(prototypes, classifier, policy, cfg: PhysicalConfig, train_classifier: bool) -> PhysicalResult:
    if not prototypes:
        raise ValueError("no prototypes")
    net = classifier.clone(requires_grad=train_classifier)
    w0 = torch.stack([p.w for p in prototypes])
    labels = torch.tensor([p.label for p in prototypes], dtype=torch.long)
    z = torch.zeros_like(w0)
    spec = DefenseSpec(cfg.eps_d)
    method = BoundMethod.parse(cfg.method)
    lr_z = StepDecay(cfg.lr, cfg.lr_milestones, cfg.lr_factor)
    state_z = RmsPropState.for_params([z], cfg.lr, cfg.rms_decay)
    state_c = RmsPropState.for_params(net.params, cfg.lr_classifier, cfg.rms_decay) if train_classifier else None
    rng = Rng(cfg.seed).child("physical")
    k, s = len(prototypes), cfg.samples_per_step
    y = labels.repeat_interleave(s)
    trace = []
    for step in range(cfg.steps):
        zz = z.detach().requires_grad_(True)
        params = sample_acquisition(policy, k * s, tuple(w0.shape[1:]), rng.child("step", step))
        with torch.enable_grad():
            w_rob = apply_defense(w0, defensive_perturbation(zz, cfg.eps_d), spec)
            x = apply_acquisition(w_rob.repeat_interleave(s, dim=0), params)
            loss = wc_loss(net, x, y, cfg.eps_ar, method).mean()
            if not bool(torch.isfinite(loss)):
                raise TrainingDiverged(f"non-finite loss at step {step}",
                                       {"z": z.clone(), "classifier": net.clone()}, trace)
            targets = [zz] + (net.params if train_classifier else [])
            grads = torch.autograd.grad(loss, targets, allow_unused=True) if loss.requires_grad \
                else [None] * len(targets)
        grads = [g if g is not None else torch.zeros_like(t) for g, t in zip(grads, targets)]
        state_z.lr = lr_z(step)
        rmsprop_step([z], grads[:1], state_z)
        if train_classifier:
            state_c.lr = cfg.lr_classifier * lr_z(step) / cfg.lr if cfg.lr else cfg.lr_classifier
            rmsprop_step(net.params, grads[1:], state_c)
        trace.append(float(loss.detach()))
        if step % 50 == 0:
            log.info("physical step %d: loss %.4f", step, trace[-1])
    return PhysicalResult(robustify_prototypes(prototypes, z, cfg.eps_d), z.detach(), net.clone(), trace)


def a5p_robustify(prototypes: list[Prototype], classifier: Network, policy: AcquisitionPolicy,
                  cfg: PhysicalConfig) -> PhysicalResult:
    """Optimize one shared defensive perturbation per prototype against a frozen classifier,
    averaging the worst-case entropy over fresh random captures at every step."""
    return _physical_fit(prototypes, classifier, policy, cfg, train_classifier=False)


def a5pc_cotrain(prototypes: list[Prototype], classifier: Network, policy: AcquisitionPolicy,
                 cfg: PhysicalConfig) -> PhysicalResult:
    """Like :func:`a5p_robustify`, but the classifier is trained jointly (rate ``cfg.lr_classifier``)."""
    return _physical_fit(prototypes, classifier, policy, cfg, train_classifier=True)


def physical_evaluate(prototypes: list[Prototype], classifier: Network, policy: AcquisitionPolicy, eps: float,
                      per_prototype: int, rng: Rng, attack: AttackConfig | None = None,
                      method: BoundMethod = BoundMethod.best(), num_classes: int | None = None,
                      originals: list[Prototype] | None = None) -> dict:
    """Errors on fresh captures of ``prototypes``; PSNR is measured between prototypes and ``originals``."""
    m = num_classes if num_classes is not None else classifier.output_shape[0]
    ds = acquisition_dataset(prototypes, policy, per_prototype, rng, m)
    metrics = evaluate(classifier, ds, eps, None, attack, method, rng=rng.child("attack"))
    if originals is not None:
        from a5.defense.quality import mean_psnr

        metrics["psnr_mean"] = mean_psnr(torch.stack([p.w for p in originals]),
                                         torch.stack([p.w for p in prototypes]))
    return metrics


# -- synthetic glyphs ------------------------------------------------------------------------

GLYPH_NAMES = ("ring", "vbar", "hbar", "plus", "cross", "square", "triangle", "disk", "ell", "bars")


def synth_glyphs(size: int = 28, stroke: float = 2.5) -> list[Prototype]:
    """Ten binary geometric glyphs (white on black) centered in a ``size`` square."""
    c = (size - 1) / 2
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u, v = (xx - c) / (size * 0.32), (yy - c) / (size * 0.32)  # glyph box is about [-1, 1]
    t = stroke / (size * 0.32) / 2  # half stroke in glyph units
    r = np.hypot(u, v)
    inside = (np.abs(u) <= 1) & (np.abs(v) <= 1)
    masks = {
        "ring": np.abs(r - 0.85) <= t,
        "vbar": (np.abs(u) <= t) & inside,
        "hbar": (np.abs(v) <= t) & inside,
        "plus": ((np.abs(u) <= t) | (np.abs(v) <= t)) & inside,
        "cross": ((np.abs(u - v) <= t * math.sqrt(2)) | (np.abs(u + v) <= t * math.sqrt(2))) & inside,
        "square": inside & ((np.abs(np.abs(u) - 0.85) <= t) | (np.abs(np.abs(v) - 0.85) <= t))
        & (np.abs(u) <= 0.85 + t) & (np.abs(v) <= 0.85 + t),
        "triangle": _triangle(u, v, t),
        "disk": r <= 0.6,
        "ell": inside & (((np.abs(u + 0.7) <= t) & (v <= 0.85)) | ((np.abs(v - 0.85) <= t) & (u >= -0.7 - t))),
        "bars": ((np.abs(u - 0.5) <= t) | (np.abs(u + 0.5) <= t)) & inside,
    }
    return [Prototype(torch.from_numpy(masks[name].astype(np.float64))[None].to(DTYPE), k, name)
            for k, name in enumerate(GLYPH_NAMES)]


def _triangle(u, v, t):
    # outline of the triangle with vertices (0, -0.9), (0.9, 0.8), (-0.9, 0.8)
    verts = np.array([[0.0, -0.9], [0.9, 0.8], [-0.9, 0.8]])
    dist = np.full(u.shape, np.inf)
    for a, b in zip(verts, np.roll(verts, -1, axis=0)):
        ab = b - a
        s = np.clip(((u - a[0]) * ab[0] + (v - a[1]) * ab[1]) / (ab @ ab), 0, 1)
        dist = np.minimum(dist, np.hypot(u - a[0] - s * ab[0], v - a[1] - s * ab[1]))
    return dist <= t


def write_glyph_set(directory, prototypes: list[Prototype], suffix: str = "") -> list[Path]:
    """Write ``<class>_<name><suffix>.pgm`` files (8-bit) and return their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for proto in prototypes:
        path = directory / f"{proto.label}_{proto.name}{suffix}.pgm"
        write_pgm(path, proto.w)
        paths.append(path)
    return paths
