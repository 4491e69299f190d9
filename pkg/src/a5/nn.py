"""Network substrate: layer specs, forward/backward, initialization, RMSProp and checkpoints.

Everything runs in float64 on CPU.  A :class:`Network` is a plain ordered list of
layer specs plus one ``(weight, bias)`` pair per parametric layer; bound
propagation in :mod:`a5.certify` walks the same layer list, so the two never
disagree about the architecture.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from a5.errors import CheckpointError, NumericError, ShapeError
from a5.rng import Rng

DTYPE = torch.float64


def as_tensor(data, shape: Sequence[int] | None = None) -> torch.Tensor:
    """Convert ``data`` to a float64 tensor, rejecting NaN/Inf."""
    t = torch.as_tensor(data, dtype=DTYPE)
    if shape is not None:
        t = t.reshape(tuple(shape))
    if not bool(torch.isfinite(t).all()):
        raise NumericError("tensor contains non-finite entries")
    return t


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Union[Dense, Conv2D, ReLU, Flatten]
_KINDS = {"Dense": Dense, "Conv2D": Conv2D, "ReLU": ReLU, "Flatten": Flatten}


def layer_to_dict(layer: LayerSpec) -> dict:
    return {"kind": type(layer).__name__, **asdict(layer)}


def layer_from_dict(d: dict) -> LayerSpec:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _KINDS:
        raise ShapeError(f"unknown layer kind {kind!r}")
    return _KINDS[kind](**d)


def is_parametric(layer: LayerSpec) -> bool:
    return isinstance(layer, (Dense, Conv2D))


def param_shapes_for(layer: LayerSpec) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if isinstance(layer, Dense):
        return (layer.out_features, layer.in_features), (layer.out_features,)
    k = layer.kernel_size
    return (layer.out_channels, layer.in_channels, k, k), (layer.out_channels,)


def layer_output_shape(layer: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Dense):
        if in_shape != (layer.in_features,):
            raise ShapeError(f"Dense expects input ({layer.in_features},), got {in_shape}")
        return (layer.out_features,)
    if isinstance(layer, Conv2D):
        if len(in_shape) != 3 or in_shape[0] != layer.in_channels:
            raise ShapeError(f"Conv2D expects ({layer.in_channels}, H, W) input, got {in_shape}")
        if layer.stride < 1 or layer.kernel_size < 1 or layer.padding < 0:
            raise ShapeError(f"invalid Conv2D geometry {layer}")
        _, h, w = in_shape
        k, s, p = layer.kernel_size, layer.stride, layer.padding
        oh, ow = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"Conv2D {layer} produces empty output from {in_shape}")
        return (layer.out_channels, oh, ow)
    if isinstance(layer, Flatten):
        return (math.prod(in_shape),)
    if isinstance(layer, ReLU):
        return in_shape
    raise ShapeError(f"unsupported layer {layer!r}")


def apply_affine(layer: LayerSpec, x: torch.Tensor, weight: torch.Tensor, bias) -> torch.Tensor:
    """Dense/Conv2D on a batch; ``bias`` may be None for the radius path of IBP."""
    if isinstance(layer, Dense):
        return F.linear(x, weight, bias)
    return F.conv2d(x, weight, bias, stride=layer.stride, padding=layer.padding)


class Network:
    """Ordered layer list with a parameter store.

    ``params`` is a flat list ``[W0, b0, W1, b1, ...]`` following the order of the
    parametric layers.  Calling the network evaluates a batch whose trailing
    dimensions equal ``input_shape``.
    """

    def __init__(self, layers: Sequence[LayerSpec], input_shape: Sequence[int],
                 params: Sequence[torch.Tensor] | None = None):
        self.layers = tuple(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(layer_output_shape(layer, shapes[-1]))
        self.shapes = shapes
        expected = [s for layer in self.layers if is_parametric(layer) for s in param_shapes_for(layer)]
        if params is None:
            params = [torch.zeros(s, dtype=DTYPE) for s in expected]
        params = list(params)
        if [tuple(p.shape) for p in params] != expected:
            raise ShapeError(f"parameter shapes {[tuple(p.shape) for p in params]} != {expected}")
        self.params = params

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def num_params(self) -> int:
        return sum(p.numel() for p in self.params)

    def layer_params(self):
        """Yield ``(layer, weight, bias)`` with None parameters for non-parametric layers."""
        i = 0
        for layer in self.layers:
            if is_parametric(layer):
                yield layer, self.params[i], self.params[i + 1]
                i += 2
            else:
                yield layer, None, None

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        for layer, w, b in self.layer_params():
            if w is not None:
                x = apply_affine(layer, x, w, b)
            elif isinstance(layer, ReLU):
                x = F.relu(x)
            else:
                x = x.flatten(1)
        return x

    def clone(self, requires_grad: bool = False) -> "Network":
        params = [p.detach().clone().requires_grad_(requires_grad) for p in self.params]
        return Network(self.layers, self.input_shape, params)

    def requires_grad_(self, flag: bool = True) -> "Network":
        for p in self.params:
            p.requires_grad_(flag)
        return self

    def __repr__(self):
        return f"Network(input_shape={self.input_shape}, layers={list(self.layers)})"


def _as_batch(net: Network, x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    shape = tuple(x.shape)
    if shape == net.input_shape:
        return x.unsqueeze(0), True
    if shape[1:] == net.input_shape:
        return x, False
    raise ShapeError(f"input shape {shape} does not match network input {net.input_shape}")


def forward(net: Network, x: torch.Tensor) -> torch.Tensor:
    """Evaluate ``net`` on one sample (shape ``input_shape``) or a batch of them."""
    xb, single = _as_batch(net, as_tensor(x))
    with torch.no_grad():
        out = net(xb)
    return out[0] if single else out


def backward(net: Network, x: torch.Tensor, grad_out: torch.Tensor):
    """Reverse-mode derivatives of ``<grad_out, net(x)>``.

    Returns ``(grad_params, grad_input)`` where ``grad_params`` mirrors ``net.params``.
    """
    xb, single = _as_batch(net, as_tensor(x))
    g = as_tensor(grad_out)
    if single:
        g = g.unsqueeze(0)
    xb = xb.detach().clone().requires_grad_(True)
    params = [p.detach().clone().requires_grad_(True) for p in net.params]
    local = Network(net.layers, net.input_shape, params)
    with torch.enable_grad():
        out = local(xb)
        if out.shape != g.shape:
            raise ShapeError(f"grad_out shape {tuple(g.shape)} != output shape {tuple(out.shape)}")
        grads = torch.autograd.grad(out, params + [xb], grad_outputs=g, allow_unused=True)
    grad_params = [gp if gp is not None else torch.zeros_like(p) for gp, p in zip(grads[:-1], params)]
    grad_input = grads[-1][0] if single else grads[-1]
    return grad_params, grad_input


def init_params(net: Network, rng: Rng) -> Network:
    """Kaiming-normal weights (std = sqrt(2 / fan_in)), zero biases."""
    gen = rng.generator("init")
    params = []
    for layer in net.layers:
        if not is_parametric(layer):
            continue
        wshape, bshape = param_shapes_for(layer)
        fan_in = math.prod(wshape[1:])
        w = gen.standard_normal(wshape) * math.sqrt(2.0 / fan_in)
        params += [torch.from_numpy(w).to(DTYPE), torch.zeros(bshape, dtype=DTYPE)]
    return Network(net.layers, net.input_shape, params)


# -- optimization -----------------------------------------------------------------

@dataclass
class RmsPropState:
    lr: float
    decay: float = 0.9
    eps: float = 1e-8
    sq: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[torch.Tensor], lr: float, decay: float = 0.9,
                   eps: float = 1e-8) -> "RmsPropState":
        return cls(lr, decay, eps, [torch.zeros_like(p, dtype=DTYPE).detach() for p in params])


def rmsprop_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: RmsPropState):
    """One in-place RMSProp update: s <- rho*s + (1-rho)*g^2, p <- p - lr*g/(sqrt(s)+eps)."""
    if len(params) != len(grads) or len(params) != len(state.sq):
        raise ShapeError("params, grads and optimizer state must have equal length")
    for g in grads:
        if not bool(torch.isfinite(g).all()):
            raise NumericError("non-finite gradient passed to rmsprop_step")
    with torch.no_grad():
        for p, g, s in zip(params, grads, state.sq):
            if p.shape != g.shape or p.shape != s.shape:
                raise ShapeError(f"shape mismatch {tuple(p.shape)} / {tuple(g.shape)} / {tuple(s.shape)}")
            s.mul_(state.decay).addcmul_(g, g, value=1.0 - state.decay)
            p.sub_(state.lr * g / (s.sqrt() + state.eps))
    return params, state


@dataclass(frozen=True)
class StepDecay:
    """Piecewise-constant learning rate: ``initial * factor**(number of milestones passed)``."""

    initial: float
    milestones: tuple = ()
    factor: float = 0.1

    def __call__(self, epoch: float) -> float:
        passed = sum(1 for m in self.milestones if epoch >= m)
        return self.initial * self.factor ** passed


# -- checkpoints ---------------------------------------------------------------------

MAGIC = b"A5CKPT01"
FORMAT_VERSION = 1


def save_checkpoint(net: Network, path, meta: dict | None = None) -> None:
    """Write ``MAGIC | u64 manifest length | JSON manifest | little-endian f64 blobs``."""
    tensors = [{"shape": list(p.shape)} for p in net.params]
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "f64",
        "input_shape": list(net.input_shape),
        "layers": [layer_to_dict(layer) for layer in net.layers],
        "tensors": tensors,
        "meta": meta or {},
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in net.params:
            fh.write(p.detach().cpu().numpy().astype("<f8", copy=False).tobytes())


def read_manifest(path) -> dict:
    return _read(path)[0]


def _read(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[8:16])
    if 16 + n > len(raw):
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION or manifest.get("dtype") != "f64":
        raise CheckpointError(f"{path}: unsupported version/dtype "
                              f"{manifest.get('format_version')}/{manifest.get('dtype')}")
    return manifest, raw[16 + n:]


def load_checkpoint(path) -> Network:
    manifest, payload = _read(path)
    try:
        layers = [layer_from_dict(d) for d in manifest["layers"]]
        arch = Network(layers, manifest["input_shape"])
    except (KeyError, TypeError, ShapeError) as exc:
        raise CheckpointError(f"{path}: invalid architecture: {exc}") from exc
    declared = [tuple(t["shape"]) for t in manifest.get("tensors", [])]
    expected = [tuple(p.shape) for p in arch.params]
    if declared != expected:
        raise CheckpointError(f"{path}: manifest shapes {declared} disagree with layers {expected}")
    sizes = [math.prod(s) for s in declared]
    if 8 * sum(sizes) != len(payload):
        raise CheckpointError(f"{path}: manifest declares {8 * sum(sizes)} bytes of tensors, "
                              f"file holds {len(payload)}")
    params, off = [], 0
    for shape, size in zip(declared, sizes):
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=off).reshape(shape)
        params.append(torch.from_numpy(arr.astype(np.float64)))
        off += 8 * size
    return Network(layers, manifest["input_shape"], params)


def checkpoint_roundtrip(net: Network, path) -> Network:
    save_checkpoint(net, path)
    return load_checkpoint(path)
