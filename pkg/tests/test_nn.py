import math
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from a5.errors import CheckpointError, NumericError, ShapeError
from a5.nn import (Conv2D, Dense, Flatten, Network, ReLU, RmsPropState, StepDecay, as_tensor, backward,
                   checkpoint_roundtrip, forward, init_params, load_checkpoint, read_manifest, rmsprop_step,
                   save_checkpoint)
from a5.rng import Rng
from oracles import as_affine_chain, central_difference, np_forward, random_conv_net, rel_error


def dense(w, b):
    w, b = torch.tensor(w, dtype=torch.float64), torch.tensor(b, dtype=torch.float64)
    return Network([Dense(w.shape[1], w.shape[0])], (w.shape[1],), [w, b])


def test_tensor_rejects_non_finite():
    with pytest.raises(NumericError):
        as_tensor([1.0, float("nan")])
    with pytest.raises(NumericError):
        as_tensor([float("inf")])


def test_forward_identity_dense():
    out = forward(dense([[1, 0], [0, 1]], [0, 0]), torch.tensor([0.3, 0.7], dtype=torch.float64))
    assert out.tolist() == [0.3, 0.7]


def test_forward_hand_matrix():
    out = forward(dense([[1, -1], [2, 1]], [0, 1]), torch.tensor([0.5, 0.5], dtype=torch.float64))
    assert torch.allclose(out, torch.tensor([0.0, 2.5], dtype=torch.float64), atol=0, rtol=1e-15)


def test_forward_relu():
    net = Network([ReLU()], (2,))
    assert forward(net, torch.tensor([-0.2, 2.2], dtype=torch.float64)).tolist() == [0.0, 2.2]


def test_forward_shape_mismatch():
    with pytest.raises(ShapeError):
        forward(dense([[1, 0]], [0]), torch.zeros(3, dtype=torch.float64))


def test_forward_pure_and_batched():
    net = random_conv_net(1)
    x = torch.rand(4, 1, 6, 6, dtype=torch.float64)
    before = [p.clone() for p in net.params]
    a, b = forward(net, x), forward(net, x)
    assert torch.equal(a, b)
    assert all(torch.equal(p, q) for p, q in zip(before, net.params))
    assert torch.allclose(forward(net, x[2]), a[2], rtol=0, atol=1e-14)


def test_conv_forward_matches_explicit_matrix():
    net = random_conv_net(3)
    x = np.random.default_rng(0).uniform(size=(1, 6, 6))
    ref = np_forward(as_affine_chain(net), x)
    out = forward(net, torch.from_numpy(x)).numpy()
    assert np.allclose(out, ref, atol=1e-12)


def test_backward_dense_calculus():
    w = [[1.0, -2.0, 0.5], [0.3, 0.1, -1.0]]
    net = dense(w, [0.1, -0.2])
    x = torch.tensor([0.2, -0.4, 0.9], dtype=torch.float64)
    g = torch.tensor([0.7, -1.3], dtype=torch.float64)
    (gw, gb), gx = backward(net, x, g)
    assert torch.allclose(gw, torch.outer(g, x))
    assert torch.equal(gb, g)
    assert torch.allclose(gx, torch.tensor(w, dtype=torch.float64).T @ g)


def test_backward_relu_subgradient():
    _, gx = backward(Network([ReLU()], (2,)), torch.tensor([-1.0, 2.0], dtype=torch.float64),
                     torch.tensor([1.0, 1.0], dtype=torch.float64))
    assert gx.tolist() == [0.0, 1.0]
    _, g0 = backward(Network([ReLU()], (1,)), torch.tensor([0.0], dtype=torch.float64),
                     torch.tensor([1.0], dtype=torch.float64))
    assert g0.tolist() == [0.0]


def test_backward_shape_mismatch():
    with pytest.raises(ShapeError):
        backward(dense([[1, 0]], [0]), torch.zeros(2, dtype=torch.float64), torch.zeros(2, dtype=torch.float64))


def generic_point(steps, shape, gen):
    """A random input whose ReLU pre-activations all satisfy |a| > 1e-3."""
    for _ in range(100):
        x = gen.uniform(size=shape)
        v, ok = x.reshape(-1), True
        for step in steps:
            if step[0] == "affine":
                v = step[1] @ v + step[2]
            else:
                ok &= bool((np.abs(v) > 1e-3).all())
                v = np.maximum(v, 0)
        if ok:
            return x
    raise AssertionError("no generic point found")


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    net = random_conv_net(seed)
    gen = np.random.default_rng(seed)
    steps = as_affine_chain(net)
    x = generic_point(steps, net.input_shape, gen)
    g = gen.standard_normal(net.output_shape)

    def f(xv):
        return float(np_forward(steps, xv) @ g)

    grad_params, grad_x = backward(net, torch.from_numpy(x), torch.from_numpy(g))
    assert rel_error(grad_x.numpy(), central_difference(f, x.copy(), 1e-5)) <= 1e-6
    for i, p in enumerate(net.params):
        def fp(pv, i=i):
            params = list(net.params)
            params[i] = torch.from_numpy(pv)
            return float(forward(Network(net.layers, net.input_shape, params), torch.from_numpy(x)) @ torch.from_numpy(g))
        ref = central_difference(fp, p.numpy().copy(), 1e-5)
        assert rel_error(grad_params[i].numpy(), ref) <= 1e-6


def test_rmsprop_zero_gradient_is_noop():
    p = [torch.tensor([1.0, -2.0], dtype=torch.float64)]
    state = RmsPropState.for_params(p, 0.1)
    rmsprop_step(p, [torch.zeros(2, dtype=torch.float64)], state)
    assert p[0].tolist() == [1.0, -2.0]


def test_rmsprop_single_step_closed_form():
    p = [torch.tensor([1.0], dtype=torch.float64)]
    state = RmsPropState.for_params(p, lr=0.1, decay=0.9, eps=1e-8)
    rmsprop_step(p, [torch.tensor([1.0], dtype=torch.float64)], state)
    assert state.sq[0].item() == pytest.approx(0.1, abs=1e-15)
    assert p[0].item() == pytest.approx(1 - 0.1 / (math.sqrt(0.1) + 1e-8), abs=1e-12)
    assert p[0].item() == pytest.approx(0.683772, abs=1e-6)


def test_rmsprop_converges_on_quadratic():
    p = [torch.tensor([1.0], dtype=torch.float64)]
    state = RmsPropState.for_params(p, lr=0.01)
    hit = None
    for i in range(500):
        rmsprop_step(p, [2 * p[0].clone()], state)
        if hit is None and abs(p[0].item()) < 1e-3:
            hit = i
    assert hit is not None
    # normalized steps leave a limit cycle of amplitude about lr / 2
    assert abs(p[0].item()) <= 0.01


def test_rmsprop_rejects_non_finite_and_bad_shapes():
    p = [torch.zeros(2, dtype=torch.float64)]
    state = RmsPropState.for_params(p, 0.1)
    with pytest.raises(NumericError):
        rmsprop_step(p, [torch.tensor([1.0, float("nan")], dtype=torch.float64)], state)
    with pytest.raises(ShapeError):
        rmsprop_step(p, [torch.zeros(3, dtype=torch.float64)], state)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.one_of(st.just(0.0), st.floats(1e-6, 10), st.floats(-10, -1e-6)), min_size=1, max_size=6),
       st.floats(1e-4, 1.0))
def test_rmsprop_moves_iff_gradient_nonzero(values, lr):
    g = torch.tensor(values, dtype=torch.float64)
    p = [torch.ones_like(g)]
    state = RmsPropState.for_params(p, lr)
    rmsprop_step(p, [g], state)
    assert bool((state.sq[0] >= 0).all())
    assert torch.equal(p[0] == 1.0, g == 0)


def test_step_decay():
    sched = StepDecay(1e-3, (25, 42), 0.1)
    assert sched(0) == 1e-3
    assert sched(25) == pytest.approx(1e-4)
    assert sched(42) == pytest.approx(1e-5)


def test_init_params_deterministic_and_scaled():
    arch = Network([Dense(100, 100)], (100,))
    a, b = init_params(arch, Rng(1)), init_params(arch, Rng(1))
    c = init_params(arch, Rng(2))
    assert all(torch.equal(p, q) for p, q in zip(a.params, b.params))
    assert not torch.equal(a.params[0], c.params[0])
    assert float(a.params[1].abs().max()) == 0.0
    var = float(a.params[0].var())
    assert abs(var - 0.02) <= 0.2 * 0.02


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    net = random_conv_net(7)
    back = checkpoint_roundtrip(net, tmp_path / "m.ckpt")
    assert back.layers == net.layers and back.input_shape == net.input_shape
    assert all(torch.equal(p, q) for p, q in zip(back.params, net.params))
    x = torch.rand(3, 1, 6, 6, dtype=torch.float64)
    assert torch.equal(forward(back, x), forward(net, x))


def test_checkpoint_layout(tmp_path):
    net = random_conv_net(7)
    path = tmp_path / "m.ckpt"
    save_checkpoint(net, path, {"role": "classifier"})
    raw = path.read_bytes()
    assert raw[:8] == b"A5CKPT01"
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = read_manifest(path)
    assert manifest["dtype"] == "f64" and manifest["format_version"] == 1
    assert manifest["meta"] == {"role": "classifier"}
    assert len(raw) == 16 + n + 8 * net.num_params()


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(random_conv_net(0), path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="declares"):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(random_conv_net(0), path)
    path.write_bytes(b"XXXXXXXX" + path.read_bytes()[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_edited_manifest_rejected(tmp_path):
    import json

    path = tmp_path / "m.ckpt"
    net = Network([Dense(3, 2)], (3,), [torch.ones(2, 3, dtype=torch.float64), torch.zeros(2, dtype=torch.float64)])
    save_checkpoint(net, path)
    raw = path.read_bytes()
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + n])
    manifest["tensors"][0]["shape"] = [3, 2]
    blob = json.dumps(manifest).encode()
    path.write_bytes(raw[:8] + struct.pack("<Q", len(blob)) + blob + raw[16 + n:])
    with pytest.raises(CheckpointError, match="disagree"):
        load_checkpoint(path)


def test_network_shape_chain_validation():
    with pytest.raises(ShapeError):
        Network([Dense(3, 4), Dense(5, 2)], (3,))
    net = Network([Conv2D(1, 2, 3, 1, 1), ReLU(), Flatten(), Dense(2 * 5 * 5, 4)], (1, 5, 5))
    assert net.output_shape == (4,)
