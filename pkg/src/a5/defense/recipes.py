"""Robustification recipes and the certified-training baseline.

* :func:`a5o_robustify`  per-sample defensive perturbation with known labels.
* :func:`a5r_train`      robustifier network for a frozen classifier.
* :func:`a5rc_cotrain`   joint fine-tuning of robustifier and classifier.
* :func:`crown_ibp_train` certified classifier training with a smoothed eps ramp.

All of them minimize the mean worst-case cross entropy with RMSProp.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import torch

from a5.attacks import AttackConfig, empirical_error
from a5.certify import BoundMethod, LinfBall, certified_correct, certified_margins, worst_case_xent
from a5.data import Dataset
from a5.defense.augment import AugmentPolicy, augment_batch
from a5.defense.perturbation import DefenseSpec, Robustifier, apply_defense, defensive_perturbation
from a5.defense.quality import mean_psnr
from a5.defense.schedule import EpsSchedule
from a5.errors import NumericError
from a5.nn import Network, RmsPropState, StepDecay, rmsprop_step
from a5.rng import Rng

log = logging.getLogger(__name__)


class TrainingDiverged(NumericError):
    """Loss became non-finite; ``last_good`` holds the networks from the last finished epoch."""

    def __init__(self, message, last_good, history):
        super().__init__(message)
        self.last_good = last_good
        self.history = history


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 100
    lr: float = 1e-3
    lr_milestones: tuple = ()
    lr_factor: float = 0.1
    eps_train: float = 0.1  # eps_A^C for crown_ibp_train, eps_A^R for the A5 recipes
    eps_d: float = 0.0
    eps_eval: float | None = None
    method: str = "crown-ibp"  # bound minimized by the A5 recipes
    schedule: EpsSchedule | None = None
    seed: int = 0
    rms_decay: float = 0.9
    lr_classifier: float | None = None  # a5rc only; defaults to lr
    eval_attack_steps: int = 10
    eval_attack_restarts: int = 1
    eval_method: str = "best"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if min(self.eps_train, self.eps_d) < 0 or (self.eps_eval is not None and self.eps_eval < 0):
            raise ValueError("eps values must be >= 0")
        self.lr_milestones = tuple(self.lr_milestones)

    @property
    def lr_schedule(self) -> StepDecay:
        return StepDecay(self.lr, self.lr_milestones, self.lr_factor)

    @property
    def eval_eps(self) -> float:
        if self.eps_eval is not None:
            return self.eps_eval
        return self.schedule.target if self.schedule is not None else self.eps_train


@dataclass
class TrainResult:
    networks: dict
    history: list = field(default_factory=list)


def wc_loss(net: Network, x: torch.Tensor, labels: torch.Tensor, eps: float, method: BoundMethod) -> torch.Tensor:
    """Per-sample worst-case cross entropy at radius ``eps`` (exact margins when eps == 0)."""
    if eps == 0:
        method = BoundMethod.ibp()
    return worst_case_xent(certified_margins(net, LinfBall(x, eps), labels, method), labels)


def evaluate(classifier: Network, ds: Dataset, eps: float, robustify: Callable | None = None,
             attack: AttackConfig | None = None, method: BoundMethod = BoundMethod.best(),
             batch_size: int = 250, rng: Rng | None = None) -> dict:
    """Clean / PGD / certified error, mean worst-case entropy and PSNR of a (robustified) set."""
    xs, xent = [], 0.0
    with torch.no_grad():
        for start in range(0, len(ds), batch_size):
            x = ds.x[start:start + batch_size]
            y = ds.y[start:start + batch_size]
            xr = robustify(x) if robustify is not None else x
            xs.append(xr)
            xent += float(wc_loss(classifier, xr, y, eps, method).sum())
    x_rob = torch.cat(xs)
    view = Dataset(x_rob, ds.y, ds.num_classes, ds.provenance)
    if attack is not None:
        rates = empirical_error(classifier, view, replace(attack, eps=eps), method=method,
                                batch_size=batch_size, rng=rng)
    else:
        rates = _clean_and_certified(classifier, view, eps, method, batch_size)
    return {
        "clean_err": rates["clean"],
        "pgd_err": rates.get("pgd"),
        "cert_err": rates["certified"],
        "mean_wc_xent": xent / len(ds),
        "psnr_mean": mean_psnr(ds.x, x_rob) if robustify is not None else None,
    }


def _clean_and_certified(net, ds, eps, method, batch_size):
    clean = cert = 0
    with torch.no_grad():
        for start in range(0, len(ds), batch_size):
            x, y = ds.x[start:start + batch_size], ds.y[start:start + batch_size]
            clean += int((net(x).argmax(1) != y).sum())
            m = certified_margins(net, LinfBall(x, eps), y, method)
            cert += int((~certified_correct(m, y)).sum())
    return {"clean": clean / len(ds), "certified": cert / len(ds)}


# -- A5/O ---------------------------------------------------------------------------------

@dataclass
class RobustifiedSample:
    """Result of :func:`a5o_robustify`; tensors keep the batch layout of the input."""

    x: torch.Tensor
    z: torch.Tensor
    delta: torch.Tensor
    x_rob: torch.Tensor
    loss_trace: torch.Tensor  # (steps + 1, batch)
    best_step: torch.Tensor


def a5o_robustify(net: Network, x: torch.Tensor, labels, eps_ar: float, spec: DefenseSpec,
                  steps: int = 100, lr: float = 0.05, method: BoundMethod = BoundMethod.crown_ibp(),
                  decay: float = 0.9) -> RobustifiedSample:
    """Offline robustification with ground truth: minimize each sample's worst-case
    entropy over the latent ``z`` (start 0) with RMSProp; keep each sample's best iterate."""
    single = tuple(x.shape) == net.input_shape
    xb = x.unsqueeze(0) if single else x
    y = torch.as_tensor(labels, dtype=torch.long).reshape(-1).expand(xb.shape[0])
    if float(xb.min()) < 0 or float(xb.max()) > 1:
        raise ValueError("inputs must lie in [0, 1]")
    frozen = net.clone()
    z = torch.zeros_like(xb)
    best_z = z.clone()
    best = torch.full((xb.shape[0],), float("inf"), dtype=xb.dtype)
    best_step = torch.zeros(xb.shape[0], dtype=torch.long)
    state = RmsPropState.for_params([z], lr, decay)
    trace = []
    for step in range(steps + 1):
        zz = z.detach().requires_grad_(spec.eps_d > 0 and step < steps)
        with torch.set_grad_enabled(zz.requires_grad):
            xr = apply_defense(xb, defensive_perturbation(zz, spec.eps_d), spec)
            e = wc_loss(frozen, xr, y, eps_ar, method)
        if not bool(torch.isfinite(e).all()):
            raise NumericError(f"non-finite worst-case entropy at step {step}")
        trace.append(e.detach())
        improved = e.detach() < best
        best = torch.where(improved, e.detach(), best)
        best_z[improved] = z[improved]
        best_step[improved] = step
        if step == steps or spec.eps_d == 0:
            break
        (grad,) = torch.autograd.grad(e.sum(), zz)
        rmsprop_step([z], [grad], state)
    delta = defensive_perturbation(best_z, spec.eps_d)
    x_rob = apply_defense(xb, delta, spec)
    result = RobustifiedSample(xb, best_z, delta, x_rob, torch.stack(trace), best_step)
    if single:
        result = RobustifiedSample(xb[0], best_z[0], delta[0], x_rob[0], result.loss_trace[:, 0], best_step[0])
    return result


def a5o_robustify_dataset(net: Network, ds: Dataset, eps_ar: float, spec: DefenseSpec, batch_size: int = 250,
                          **kwargs) -> tuple[Dataset, torch.Tensor]:
    """Run :func:`a5o_robustify` over a dataset; returns the robustified set and final losses."""
    xs, losses = [], []
    for start in range(0, len(ds), batch_size):
        res = a5o_robustify(net, ds.x[start:start + batch_size], ds.y[start:start + batch_size],
                            eps_ar, spec, **kwargs)
        xs.append(res.x_rob.detach())
        losses.append(res.loss_trace.min(0).values)
    return Dataset(torch.cat(xs), ds.y, ds.num_classes, ds.provenance + "|a5o"), torch.cat(losses)


# -- training loops -------------------------------------------------------------------------

def _fit(groups, loss_fn, train: Dataset, cfg: TrainConfig, snapshot, epoch_metrics, augment=None):
    """Minibatch RMSProp over parameter groups ``[(params, base_lr), ...]``.

    ``loss_fn(x, y, t)`` returns per-sample losses at fractional epoch ``t``;
    ``epoch_metrics(epoch, train_loss)`` returns the metrics dict appended to the history.
    """
    rng = Rng(cfg.seed)
    states = [RmsPropState.for_params(params, base_lr, cfg.rms_decay) for params, base_lr in groups]
    history = []
    n = len(train)
    n_batches = (n + cfg.batch_size - 1) // cfg.batch_size
    for epoch in range(cfg.epochs):
        last_good = snapshot()
        scale = cfg.lr_schedule(epoch) / cfg.lr if cfg.lr else 0.0
        for (params, base_lr), state in zip(groups, states):
            state.lr = base_lr * scale
        perm = torch.from_numpy(rng.generator("shuffle", epoch).permutation(n))
        total = 0.0
        for b in range(n_batches):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x, y = train.x[idx], train.y[idx]
            if augment is not None:
                x = augment_batch(x, augment, rng.child("augment", epoch, b))
            t = epoch + b / n_batches
            all_params = [p for params, _ in groups for p in params]
            with torch.enable_grad():
                losses = loss_fn(x, y, t)
                loss = losses.mean()
                if not bool(torch.isfinite(loss)):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}", last_good, history)
                # an empty defense budget cuts the graph to the robustifier
                grads = torch.autograd.grad(loss, all_params, allow_unused=True) if loss.requires_grad \
                    else [None] * len(all_params)
            grads = [g if g is not None else torch.zeros_like(p) for g, p in zip(grads, all_params)]
            if not all(bool(torch.isfinite(g).all()) for g in grads):
                raise TrainingDiverged(f"non-finite gradient at epoch {epoch}, batch {b}", last_good, history)
            offset = 0
            for (params, _), state in zip(groups, states):
                rmsprop_step(params, grads[offset:offset + len(params)], state)
                offset += len(params)
            total += float(losses.detach().sum())
        metrics = epoch_metrics(epoch, total / n)
        log.info("epoch %d: %s", epoch, metrics)
        history.append(metrics)
    return history


def _epoch_metrics(cfg: TrainConfig, val: Dataset | None, classifier_fn, robustify_fn, extra_fn):
    def run(epoch, train_loss):
        metrics = {"epoch": epoch, "train_loss": train_loss}
        metrics.update(extra_fn(epoch))
        if val is not None:
            attack = None
            if cfg.eval_attack_steps > 0:
                attack = AttackConfig(cfg.eval_eps, steps=cfg.eval_attack_steps,
                                      restarts=cfg.eval_attack_restarts, seed=cfg.seed)
            with torch.no_grad():
                metrics.update(evaluate(classifier_fn(), val, cfg.eval_eps, robustify_fn(), attack,
                                        BoundMethod.parse(cfg.eval_method), rng=Rng(cfg.seed).child("eval", epoch)))
        return metrics
    return run


def crown_ibp_train(classifier: Network, train: Dataset, cfg: TrainConfig, val: Dataset | None = None,
                    on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Certified training of ``classifier`` (a copy is trained and returned).

    The training radius follows ``cfg.schedule`` (constant ``cfg.eps_train`` when
    absent) and the bound mixes CROWN-IBP into IBP with a weight that ramps from 1
    to 0 over the schedule.  With target radius 0 this is plain cross-entropy training.
    """
    net = classifier.clone(requires_grad=True)
    schedule = cfg.schedule

    def eps_at(t):
        return schedule(t) if schedule is not None else cfg.eps_train

    def beta_at(t):
        return 1.0 - schedule.progress(t) if schedule is not None else BoundMethod.parse(cfg.method).beta

    def loss_fn(x, y, t):
        return wc_loss(net, x, y, eps_at(t), BoundMethod.mixed(beta_at(t)))

    metrics_fn = _epoch_metrics(cfg, val, lambda: net, lambda: None,
                                lambda e: {"eps_a": eps_at(e + 1), "beta": beta_at(e + 1)})
    history = _fit([(net.params, cfg.lr)], loss_fn, train, cfg, lambda: {"classifier": net.clone()},
                   _emit(metrics_fn, on_epoch))
    return TrainResult({"classifier": net.clone()}, history)


def a5r_train(classifier: Network, robustifier: Network, train: Dataset, cfg: TrainConfig,
              val: Dataset | None = None, on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train the robustifier for a frozen classifier (returned copies; inputs untouched)."""
    frozen = classifier.clone()
    rob = robustifier.clone(requires_grad=True)
    spec = DefenseSpec(cfg.eps_d)
    method = BoundMethod.parse(cfg.method)

    def loss_fn(x, y, t):
        return wc_loss(frozen, Robustifier(rob, spec)(x), y, cfg.eps_train, method)

    metrics_fn = _epoch_metrics(cfg, val, lambda: frozen, lambda: Robustifier(rob, spec),
                                lambda e: {"eps_a": cfg.eps_train, "beta": method.beta})
    groups = [(rob.params, cfg.lr)] if cfg.eps_d > 0 else [(rob.params, 0.0)]
    history = _fit(groups, loss_fn, train, cfg,
                   lambda: {"classifier": frozen.clone(), "robustifier": rob.clone()},
                   _emit(metrics_fn, on_epoch))
    return TrainResult({"classifier": frozen.clone(), "robustifier": rob.clone()}, history)


def a5rc_cotrain(classifier: Network, robustifier: Network, train: Dataset, cfg: TrainConfig,
                 augment: AugmentPolicy | None = None, val: Dataset | None = None,
                 on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Jointly fine-tune classifier and robustifier; samples are augmented before robustification."""
    net = classifier.clone(requires_grad=True)
    rob = robustifier.clone(requires_grad=True)
    spec = DefenseSpec(cfg.eps_d)
    method = BoundMethod.parse(cfg.method)

    def loss_fn(x, y, t):
        return wc_loss(net, Robustifier(rob, spec)(x), y, cfg.eps_train, method)

    metrics_fn = _epoch_metrics(cfg, val, lambda: net, lambda: Robustifier(rob, spec),
                                lambda e: {"eps_a": cfg.eps_train, "beta": method.beta})
    lr_c = cfg.lr if cfg.lr_classifier is None else cfg.lr_classifier
    groups = [(net.params, lr_c), (rob.params, cfg.lr)]
    history = _fit(groups, loss_fn, train, cfg,
                   lambda: {"classifier": net.clone(), "robustifier": rob.clone()},
                   _emit(metrics_fn, on_epoch), augment=augment)
    return TrainResult({"classifier": net.clone(), "robustifier": rob.clone()}, history)


def _emit(metrics_fn, on_epoch):
    if on_epoch is None:
        return metrics_fn

    def run(epoch, train_loss):
        metrics = metrics_fn(epoch, train_loss)
        on_epoch(copy.deepcopy(metrics))
        return metrics
    return run
