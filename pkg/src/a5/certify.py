"""Certified bounds over l-inf balls and the worst-case margin losses built on them.

Bounds are computed with differentiable torch ops, so the worst-case cross
entropy can be minimized w.r.t. the ball center (defensive perturbations) or the
network parameters (certified training) with plain autograd.

Conventions
-----------
* Intermediate bounds always come from interval propagation (IBP).  The
  CROWN-IBP margin runs one backward linear relaxation from the margin
  specification down to the input, over those IBP pre-activation bounds.
* An unstable ReLU (l < 0 < u) is bounded above by the chord through
  (l, 0), (u, u) and below by ``alpha * h`` with ``alpha = 1`` iff ``u >= -l``.
* Branch decisions (stable/unstable, alpha, signs) are boolean masks and carry no
  gradient; slopes and intercepts stay differentiable functions of (l, u).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from a5.errors import ShapeError
from a5.nn import Conv2D, Dense, Flatten, Network, ReLU, apply_affine

# Lower bound on the denominator u - l for an unstable ReLU.
_TINY = 1e-300


@dataclass(frozen=True)
class LinfBall:
    """l-inf ball around ``center`` (one sample or a batch), optionally intersected with [0, 1]."""

    center: torch.Tensor
    radius: float
    clip: bool = True

    def __post_init__(self):
        if float(torch.as_tensor(self.radius).min()) < 0:
            raise ValueError(f"ball radius must be >= 0, got {self.radius}")

    def box(self) -> tuple[torch.Tensor, torch.Tensor]:
        lo, hi = self.center - self.radius, self.center + self.radius
        if self.clip:
            lo, hi = lo.clamp(0.0, 1.0), hi.clamp(0.0, 1.0)
        return lo, hi


@dataclass
class IntervalBounds:
    lower: torch.Tensor
    upper: torch.Tensor

    @property
    def mid(self):
        return (self.upper + self.lower) / 2

    @property
    def rad(self):
        return (self.upper - self.lower) / 2


@dataclass(frozen=True)
class BoundMethod:
    """Which margin bound to use.

    ``mixed`` blends final margins as ``beta * CROWN-IBP + (1 - beta) * IBP``.
    ``best`` takes the elementwise maximum of the two (both are sound, so the max is
    too); it is meant for evaluation, not training.
    """

    kind: str = "crown-ibp"
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("ibp", "crown-ibp", "mixed", "best"):
            raise ValueError(f"unknown bound method {self.kind!r}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")

    @classmethod
    def ibp(cls):
        return cls("ibp", 0.0)

    @classmethod
    def crown_ibp(cls):
        return cls("crown-ibp", 1.0)

    @classmethod
    def mixed(cls, beta: float):
        return cls("mixed", float(beta))

    @classmethod
    def best(cls):
        return cls("best", 1.0)

    @classmethod
    def parse(cls, text: str) -> "BoundMethod":
        """Parse ``ibp``, ``crown-ibp``, ``best`` or ``mixed:<beta>``."""
        if text.startswith("mixed:"):
            return cls.mixed(float(text.split(":", 1)[1]))
        if text in ("ibp", "crown-ibp", "best"):
            return cls(text, 0.0 if text == "ibp" else 1.0)
        raise ValueError(f"unknown bound method {text!r}")

    def __str__(self):
        return f"mixed:{self.beta:g}" if self.kind == "mixed" else self.kind


@dataclass(frozen=True)
class MarginSpec:
    """Margin rows ``e_{j*} - e_j`` for a batch of true classes; row ``j*`` is zero."""

    true_class: torch.Tensor
    num_classes: int

    def __post_init__(self):
        t = self.true_class
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= self.num_classes):
            raise IndexError(f"true class out of range [0, {self.num_classes})")

    @property
    def rows(self) -> torch.Tensor:
        eye = torch.eye(self.num_classes, dtype=torch.float64)
        onehot = eye[self.true_class]
        return onehot.unsqueeze(1) - eye.unsqueeze(0)


def _batched(net: Network, center: torch.Tensor, labels):
    """Normalize a (sample | batch) center and (int | tensor) labels to batch form."""
    single = tuple(center.shape) == net.input_shape
    if not single and tuple(center.shape[1:]) != net.input_shape:
        raise ShapeError(f"ball center shape {tuple(center.shape)} does not match {net.input_shape}")
    if single:
        center = center.unsqueeze(0)
    if labels is not None:
        labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
        if labels.numel() == 1 and center.shape[0] > 1:
            labels = labels.expand(center.shape[0])
        if labels.shape[0] != center.shape[0]:
            raise ShapeError(f"{labels.shape[0]} labels for {center.shape[0]} samples")
    return center, labels, single


def ibp_bounds(net: Network, ball: LinfBall) -> list[IntervalBounds]:
    """Interval bounds for the input box (index 0) and every layer output (index i + 1)."""
    center, _, single = _batched(net, ball.center, None)
    lo, hi = LinfBall(center, ball.radius, ball.clip).box()
    bounds = [IntervalBounds(lo, hi)]
    for layer, w, b in net.layer_params():
        cur = bounds[-1]
        if w is not None:
            mid = apply_affine(layer, cur.mid, w, b)
            rad = apply_affine(layer, cur.rad, w.abs(), None)
            nxt = IntervalBounds(mid - rad, mid + rad)
        elif isinstance(layer, ReLU):
            nxt = IntervalBounds(F.relu(cur.lower), F.relu(cur.upper))
        else:
            nxt = IntervalBounds(cur.lower.flatten(1), cur.upper.flatten(1))
        bounds.append(nxt)
    if single:
        bounds = [IntervalBounds(bd.lower[0], bd.upper[0]) for bd in bounds]
    return bounds


def relu_relaxation(lower: torch.Tensor, upper: torch.Tensor):
    """Return (lower slope, upper slope, upper intercept) of the linear ReLU relaxation."""
    active = lower >= 0
    unstable = (lower < 0) & (upper > 0)
    denom = torch.where(unstable, upper - lower, torch.ones_like(upper)).clamp_min(_TINY)
    up_slope = torch.where(unstable, upper / denom, active.to(upper.dtype))
    up_icpt = torch.where(unstable, -upper * lower / denom, torch.zeros_like(upper))
    alpha = (upper >= -lower).to(upper.dtype)
    lo_slope = torch.where(unstable, alpha, active.to(upper.dtype))
    return lo_slope, up_slope, up_icpt


def _conv_input_grad(layer: Conv2D, a: torch.Tensor, weight: torch.Tensor, in_hw) -> torch.Tensor:
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    out_h, out_w = a.shape[-2:]
    pad_h = in_hw[0] - ((out_h - 1) * s - 2 * p + k)
    pad_w = in_hw[1] - ((out_w - 1) * s - 2 * p + k)
    return F.conv_transpose2d(a, weight, stride=s, padding=p, output_padding=(pad_h, pad_w))


def crown_margin_lower(net: Network, intermediate: list[IntervalBounds], spec: MarginSpec) -> torch.Tensor:
    """Lower bounds of ``spec.rows @ net(x)`` over the input box ``intermediate[0]``.

    ``intermediate`` must come from :func:`ibp_bounds` in batch form.  Returns a
    ``(batch, M)`` tensor whose true-class column is exactly zero.
    """
    if len(intermediate) != len(net.layers) + 1:
        raise ShapeError("intermediate bounds do not match the network depth")
    for bd in intermediate:
        if bool((bd.lower > bd.upper).any()):
            raise ValueError("inconsistent intermediate bounds: lower > upper")
    batch = intermediate[0].lower.shape[0]
    if spec.true_class.shape[0] != batch:
        raise ShapeError(f"{spec.true_class.shape[0]} labels for a batch of {batch}")
    m = spec.num_classes
    if net.output_shape != (m,):
        raise ShapeError(f"network output {net.output_shape} is not a {m}-class logit vector")
    a = spec.rows  # (B, M, out)
    bias = torch.zeros(batch, m, dtype=a.dtype)
    layers = list(net.layer_params())
    for idx in range(len(layers) - 1, -1, -1):
        layer, w, b = layers[idx]
        if isinstance(layer, Dense):
            bias = bias + a @ b
            a = a @ w
        elif isinstance(layer, Conv2D):
            bias = bias + (a.sum((-1, -2)) * b).sum(-1)
            in_shape = net.shapes[idx]
            flat = a.reshape(batch * m, *a.shape[2:])
            a = _conv_input_grad(layer, flat, w, in_shape[1:]).reshape(batch, m, *in_shape)
        elif isinstance(layer, Flatten):
            a = a.reshape(batch, m, *net.shapes[idx])
        elif isinstance(layer, ReLU):
            pre = intermediate[idx]
            lo_slope, up_slope, up_icpt = relu_relaxation(pre.lower, pre.upper)
            a_pos, a_neg = a.clamp(min=0), a.clamp(max=0)
            bias = bias + (a_neg * up_icpt.unsqueeze(1)).flatten(2).sum(-1)
            a = a_pos * lo_slope.unsqueeze(1) + a_neg * up_slope.unsqueeze(1)
    box = intermediate[0]
    mid, rad = box.mid.unsqueeze(1), box.rad.unsqueeze(1)
    lower = (a * mid).flatten(2).sum(-1) - (a.abs() * rad).flatten(2).sum(-1) + bias
    return torch.where(_true_mask(spec.true_class, m), torch.zeros_like(lower), lower)


def _true_mask(labels: torch.Tensor, m: int) -> torch.Tensor:
    return F.one_hot(labels, m).bool()


def ibp_margins(out: IntervalBounds, labels: torch.Tensor) -> torch.Tensor:
    """``m_j = y^l_{j*} - y^u_j`` with ``m_{j*} = 0``; batch form."""
    m = out.lower.gather(1, labels[:, None]) - out.upper
    return torch.where(_true_mask(labels, m.shape[1]), torch.zeros_like(m), m)


def certified_margins(net: Network, ball: LinfBall, true_class, method: BoundMethod = BoundMethod.crown_ibp()):
    """Certified margin lower bounds ``m`` (length M, or ``(batch, M)`` for a batched center)."""
    center, labels, single = _batched(net, ball.center, true_class)
    m_classes = net.output_shape[0]
    if int(labels.min()) < 0 or int(labels.max()) >= m_classes:
        raise ValueError(f"true class out of range [0, {m_classes})")
    spec = MarginSpec(labels, m_classes)
    bounds = ibp_bounds(net, LinfBall(center, ball.radius, ball.clip))
    if method.kind == "ibp" or (method.kind == "mixed" and method.beta == 0.0):
        m = ibp_margins(bounds[-1], labels)
    elif method.kind == "crown-ibp" or (method.kind == "mixed" and method.beta == 1.0):
        m = crown_margin_lower(net, bounds, spec)
    else:
        m_ibp = ibp_margins(bounds[-1], labels)
        m_crown = crown_margin_lower(net, bounds, spec)
        if method.kind == "best":
            m = torch.maximum(m_ibp, m_crown)
        else:
            m = method.beta * m_crown + (1.0 - method.beta) * m_ibp
    return m[0] if single else m


def worst_case_probs(m: torch.Tensor) -> torch.Tensor:
    """Softmax of ``-m`` along the last axis (max-shift stabilized)."""
    return torch.softmax(-m, dim=-1)


def worst_case_xent(m: torch.Tensor, true_class) -> torch.Tensor:
    """``-log p_{j*}`` for the worst-case probabilities; equals ``logsumexp(-m)`` when m_{j*}=0."""
    neg = -m
    labels = torch.as_tensor(true_class, dtype=torch.long)
    if m.dim() == 1:
        return torch.logsumexp(neg, dim=-1) - neg[labels]
    labels = labels.reshape(-1).expand(m.shape[0]) if labels.numel() == 1 else labels
    return torch.logsumexp(neg, dim=-1) - neg.gather(1, labels[:, None])[:, 0]


def certified_correct(m: torch.Tensor, true_class) -> torch.Tensor:
    """True iff every non-true margin is strictly positive (ties are not certified)."""
    labels = torch.as_tensor(true_class, dtype=torch.long)
    if m.dim() == 1:
        others = torch.ones_like(m, dtype=torch.bool)
        others[labels] = False
        return bool((m[others] > 0).all())
    labels = labels.reshape(-1).expand(m.shape[0]) if labels.numel() == 1 else labels
    ok = (m > 0) | _true_mask(labels, m.shape[1])
    return ok.all(dim=1)


def wc_xent_grad(net: Network, ball: LinfBall, true_class, method: BoundMethod = BoundMethod.crown_ibp()):
    """Worst-case cross entropy and its gradients w.r.t. the ball center and every parameter.

    For a batched center the returned gradients are those of the summed loss.
    """
    center = ball.center.detach().clone().requires_grad_(True)
    params = [p.detach().clone().requires_grad_(True) for p in net.params]
    local = Network(net.layers, net.input_shape, params)
    with torch.enable_grad():
        m = certified_margins(local, LinfBall(center, ball.radius, ball.clip), true_class, method)
        e = worst_case_xent(m, true_class)
        grads = torch.autograd.grad(e.sum(), [center] + params, allow_unused=True)
    dparams = [g if g is not None else torch.zeros_like(p) for g, p in zip(grads[1:], params)]
    return e.detach(), grads[0], dparams
