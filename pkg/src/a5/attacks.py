"""Empirical l-inf adversaries (FGSM / PGD) and the clean / PGD / certified error triple."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from a5.certify import BoundMethod, LinfBall, certified_correct, certified_margins
from a5.errors import A5Error
from a5.nn import Network
from a5.rng import Rng


class SoundnessError(A5Error, AssertionError):
    """An attack flipped a sample that the bounds certified."""


@dataclass(frozen=True)
class AttackConfig:
    """PGD settings; restart 0 starts at the clean input, later restarts at uniform points in the ball.

    ``steps=1, step_size=eps, restarts=1`` is FGSM.
    """

    eps: float
    steps: int = 50
    step_size: float | None = None
    restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")
        if self.steps < 1 or self.restarts < 1:
            raise ValueError("steps and restarts must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else self.eps / 10

    @classmethod
    def fgsm(cls, eps: float, seed: int = 0) -> "AttackConfig":
        return cls(eps, steps=1, step_size=eps, restarts=1, seed=seed)


def _ce(net: Network, x: torch.Tensor, labels: torch.Tensor):
    logits = net(x)
    return F.cross_entropy(logits, labels, reduction="none"), logits.argmax(1) != labels


def pgd_attack(net: Network, x: torch.Tensor, labels, cfg: AttackConfig, rng: Rng | None = None) -> torch.Tensor:
    """Sign-gradient ascent on cross entropy, projected onto the ball intersected with [0, 1].

    Per sample, returns the iterate (over all restarts and steps, including the
    starting points) that misclassifies, preferring the highest loss; if none does,
    the highest-loss iterate.
    """
    single = x.dim() == len(net.input_shape)
    xb = x.unsqueeze(0) if single else x
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1).expand(xb.shape[0])
    xb = xb.detach()
    if cfg.eps == 0:
        return x.detach().clone()
    rng = rng or Rng(cfg.seed)
    lo, hi = (xb - cfg.eps).clamp(0, 1), (xb + cfg.eps).clamp(0, 1)
    params = [p.detach() for p in net.params]
    frozen = Network(net.layers, net.input_shape, params)

    with torch.no_grad():
        best_loss, best_wrong = _ce(frozen, xb, labels)
    best_x = xb.clone()

    def consider(xa, loss, wrong):
        better = (wrong & ~best_wrong) | ((wrong == best_wrong) & (loss > best_loss))
        best_x[better] = xa[better]
        best_loss[better] = loss[better]
        best_wrong[better] = wrong[better]

    for r in range(cfg.restarts):
        if r == 0:
            xa = xb.clone()
        else:
            u = torch.from_numpy(rng.generator("pgd-start", r).uniform(size=tuple(xb.shape)))
            xa = lo + (hi - lo) * u
            with torch.no_grad():
                consider(xa, *_ce(frozen, xa, labels))
        for _ in range(cfg.steps):
            xa = xa.detach().requires_grad_(True)
            with torch.enable_grad():
                loss, _ = _ce(frozen, xa, labels)
                (grad,) = torch.autograd.grad(loss.sum(), xa)
            with torch.no_grad():
                xa = torch.minimum(torch.maximum(xa + cfg.alpha * grad.sign(), lo), hi)
                consider(xa, *_ce(frozen, xa, labels))
    return best_x[0] if single else best_x


def empirical_error(net: Network, dataset, cfg: AttackConfig,
                    robustify: Callable[[torch.Tensor], torch.Tensor] | None = None,
                    method: BoundMethod = BoundMethod.best(), batch_size: int = 250,
                    rng: Rng | None = None) -> dict:
    """Clean, PGD and certified error rates at radius ``cfg.eps``.

    When ``robustify`` is given, every input is passed through it first and both the
    attack and the certificate apply to the robustified input.  Raises
    :class:`SoundnessError` if PGD flips a certified sample.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    rng = rng or Rng(cfg.seed)
    clean = pgd = cert = 0
    for start in range(0, n, batch_size):
        x = dataset.x[start:start + batch_size]
        y = dataset.y[start:start + batch_size]
        with torch.no_grad():
            if robustify is not None:
                x = robustify(x)
            wrong_clean = net(x).argmax(1) != y
            certified = certified_correct(certified_margins(net, LinfBall(x, cfg.eps), y, method), y)
        x_adv = pgd_attack(net, x, y, cfg, rng.child("batch", start))
        with torch.no_grad():
            wrong_adv = (net(x_adv).argmax(1) != y) | wrong_clean
        if bool((wrong_adv & certified).any()):
            raise SoundnessError("PGD flipped a certified sample; bounds are unsound")
        clean += int(wrong_clean.sum())
        pgd += int(wrong_adv.sum())
        cert += int((~certified).sum())
    return {"clean": clean / n, "pgd": pgd / n, "certified": cert / n}
