"""Named architectures used by the recipes and the command line."""
from __future__ import annotations

import math

from a5.nn import Conv2D, Dense, Flatten, Network, ReLU, init_params
from a5.rng import Rng


def mlp(input_shape, hidden, num_outputs: int) -> list:
    layers, width = [], math.prod(input_shape)
    if len(input_shape) > 1:
        layers.append(Flatten())
    for h in hidden:
        layers += [Dense(width, h), ReLU()]
        width = h
    layers.append(Dense(width, num_outputs))
    return layers


def conv_small(input_shape, num_classes: int) -> list:
    """Two stride-2 convolutions and a 100-unit hidden layer."""
    c, h, w = input_shape
    h2, w2 = (h + 1) // 2, (w + 1) // 2
    h4, w4 = (h2 + 1) // 2, (w2 + 1) // 2
    return [Conv2D(c, 16, 4, 2, 1), ReLU(), Conv2D(16, 32, 4, 2, 1), ReLU(), Flatten(),
            Dense(32 * h4 * w4, 100), ReLU(), Dense(100, num_classes)]


def robustifier_layers(input_shape, width: int = 32) -> list:
    """Image robustifier Conv3x3(width) - ReLU - Conv5x5(channels); an MLP for vector inputs."""
    if len(input_shape) == 3:
        c = input_shape[0]
        return [Conv2D(c, width, 3, 1, 1), ReLU(), Conv2D(width, c, 5, 1, 2)]
    return [Dense(input_shape[0], width), ReLU(), Dense(width, input_shape[0])]


def build_model(name: str, input_shape, num_classes: int, seed: int = 0) -> Network:
    """``conv-small``, ``mlp:<h1>,<h2>,...`` or ``robustifier[:<width>]``, Kaiming-initialized.

    The last layer of a robustifier starts at zero, so an untrained robustifier adds no perturbation.
    """
    input_shape = tuple(input_shape)
    kind, _, arg = name.partition(":")
    if kind == "conv-small":
        if len(input_shape) != 3:
            raise ValueError("conv-small needs (C, H, W) inputs")
        layers = conv_small(input_shape, num_classes)
    elif kind == "mlp":
        hidden = [int(h) for h in arg.split(",") if h] if arg else []
        layers = mlp(input_shape, hidden, num_classes)
    elif kind == "robustifier":
        layers = robustifier_layers(input_shape, int(arg) if arg else 32)
    else:
        raise ValueError(f"unknown model {name!r}")
    net = init_params(Network(layers, input_shape), Rng(seed).child("model", name))
    if kind == "robustifier":
        net.params[-2].zero_()
        net.params[-1].zero_()
    return net
