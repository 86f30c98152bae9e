import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch.func import functional_call

from embattr.nn_layers import (Adam, AdamState, CheckpointError, LayerSpec, Network, adam_step,
                               conv, dumps_checkpoint, init_parameters, load_state,
                               loads_checkpoint, loss_cross_entropy, loss_mse, make_layer,
                               save_checkpoint)
from embattr.tensor_core import ShapeError, finite_diff_check


def t64(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


def test_identity_1x1_conv(rng):
    mod, shape = make_layer(conv("1/1/1/0"), (1, 5, 5))
    with torch.no_grad():
        mod.weight.fill_(1.0)
        mod.bias.zero_()
    x = t64(rng.normal(size=(2, 1, 5, 5)))
    assert shape == (1, 5, 5)
    assert torch.equal(mod(x), x)


def test_maxpool_example():
    mod, shape = make_layer(LayerSpec("maxpool", kernel=2), (1, 2, 2))
    assert mod(t64([[[[1, 2], [3, 4]]]])).tolist() == [[[[4.0]]]]
    assert shape == (1, 1, 1)


@pytest.mark.parametrize("spec,in_shape,out_shape", [
    (conv("8/5/1/2"), (1, 28, 28), (8, 28, 28)),
    (LayerSpec("conv2d_transposed", units=3, kernel=4, stride=2, padding=1), (2, 7, 7), (3, 14, 14)),
    (LayerSpec("maxpool", kernel=2, ceil_mode=True), (2, 7, 7), (2, 4, 4)),
    (LayerSpec("maxpool", kernel=2), (2, 7, 7), (2, 3, 3)),
    (LayerSpec("upsample_nn", scale=2), (2, 4, 4), (2, 8, 8)),
    (LayerSpec("flatten"), (2, 4, 4), (32,)),
    (LayerSpec("crop", size=(28, 28)), (1, 32, 32), (1, 28, 28)),
])
def test_declared_output_shape_matches_runtime(spec, in_shape, out_shape, rng):
    mod, shape = make_layer(spec, in_shape)
    assert shape == out_shape
    y = mod.to(torch.float64)(t64(rng.normal(size=(2, *in_shape))))
    assert tuple(y.shape[1:]) == out_shape


@pytest.mark.parametrize("bad", [
    dict(kind="conv2d", kernel=0), dict(kind="conv2d", stride=0),
    dict(kind="conv2d", padding=-1), dict(kind="linear", units=0), dict(kind="dropout"),
])
def test_layer_spec_validation(bad):
    with pytest.raises(ValueError):
        LayerSpec(**bad)


def test_conv_spec_string():
    s = conv("4/5/1/2")
    assert (s.units, s.kernel, s.stride, s.padding) == (4, 5, 1, 2)


def test_network_shape_error_names_layer():
    with pytest.raises(ShapeError, match="encoder block 1"):
        Network([[LayerSpec("linear", units=3)]], input_shape=(1, 4, 4))
    net = Network([[LayerSpec("flatten"), LayerSpec("linear", units=3)]], input_shape=(1, 4, 4))
    with pytest.raises(ShapeError, match=r"\[1, 5, 4\]"):
        net(torch.zeros(2, 1, 5, 4, dtype=torch.float64))


LAYER_CASES = [
    ("conv2d", conv("3/3/1/1"), (2, 5, 5)),
    ("conv2d_strided", LayerSpec("conv2d", units=2, kernel=3, stride=2, padding=0), (2, 7, 7)),
    ("conv2d_transposed", LayerSpec("conv2d_transposed", units=2, kernel=3, stride=2, padding=1), (2, 4, 4)),
    ("linear", LayerSpec("linear", units=4), (6,)),
    ("batchnorm2d", LayerSpec("batchnorm"), (3, 4, 4)),
    ("batchnorm1d", LayerSpec("batchnorm"), (5,)),
    ("maxpool", LayerSpec("maxpool", kernel=2), (2, 4, 4)),
    ("maxpool_ceil", LayerSpec("maxpool", kernel=2, ceil_mode=True), (2, 5, 5)),
    ("upsample_nn", LayerSpec("upsample_nn", scale=2), (2, 3, 3)),
    ("relu", LayerSpec("relu"), (2, 3, 3)),
    ("softplus", LayerSpec("softplus"), (2, 3, 3)),
    ("sigmoid", LayerSpec("sigmoid"), (2, 3, 3)),
    ("flatten", LayerSpec("flatten"), (2, 3, 3)),
    ("crop", LayerSpec("crop", size=(3, 2)), (2, 5, 4)),
]


def layer_fd_error(spec, in_shape, name) -> float:
    """Worst FD discrepancy of a layer w.r.t. its input and each parameter."""
    rng = np.random.default_rng(len(name) * 1000 + sum(map(ord, name)))
    mod, out_shape = make_layer(spec, in_shape)
    mod = mod.to(torch.float64).train()
    init_parameters(mod, torch.Generator().manual_seed(3))
    x = t64(rng.normal(size=(4, *in_shape)))
    w = t64(rng.normal(size=(4, *out_shape)))
    params = {k: v.detach().clone() for k, v in mod.named_parameters()}

    def f_x(xx):
        return (functional_call(mod, params, (xx,)) * w).sum()

    worst = finite_diff_check(f_x, x)
    for k in params:
        def f_p(pp, k=k):
            return (functional_call(mod, {**params, k: pp}, (x,)) * w).sum()
        worst = max(worst, finite_diff_check(f_p, params[k]))
    return worst


@pytest.mark.parametrize("name,spec,in_shape", LAYER_CASES, ids=[c[0] for c in LAYER_CASES])
def test_layer_gradients_match_fd(name, spec, in_shape):
    assert layer_fd_error(spec, in_shape, name) < 1e-4


def test_layer_double_backprop_softplus_conv(rng):
    mod, _ = make_layer(conv("2/3/1/1"), (1, 4, 4))
    mod = mod.to(torch.float64)
    x = t64(rng.normal(size=(2, 1, 4, 4)))
    params = {k: v.detach().clone() for k, v in mod.named_parameters()}

    def gnorm(wt):
        xr = x.clone().requires_grad_(True)
        out = F.softplus(functional_call(mod, {**params, "weight": wt}, (xr,))).sum()
        (g,) = torch.autograd.grad(out, xr, create_graph=True)
        return (g ** 2).sum()

    assert finite_diff_check(gnorm, params["weight"]) < 1e-3


def test_batchnorm_training_normalises(rng):
    mod, _ = make_layer(LayerSpec("batchnorm"), (3, 6, 6))
    mod = mod.train()
    # large-variance inputs keep the eps bias of the normaliser below 1e-6
    x = t64(rng.normal(loc=5.0, scale=30.0, size=(16, 3, 6, 6)))
    y = mod(x).detach()
    mean = y.mean(dim=(0, 2, 3))
    var = y.var(dim=(0, 2, 3), correction=0)
    assert float(mean.abs().max()) < 1e-6
    assert float((var - 1).abs().max()) < 1e-6


def test_batchnorm_eval_uses_running_stats(rng):
    mod, _ = make_layer(LayerSpec("batchnorm"), (2, 3, 3))
    x = t64(rng.normal(size=(8, 2, 3, 3)))
    mod.train()(x)
    mod.eval()
    a = mod(x[:1])
    b = mod(x)[:1]
    torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_conv_transposed_adjoint(rng):
    c, _ = make_layer(LayerSpec("conv2d", units=3, kernel=3, stride=2, padding=1), (2, 9, 9))
    ct, _ = make_layer(LayerSpec("conv2d_transposed", units=2, kernel=3, stride=2, padding=1), (3, 5, 5))
    with torch.no_grad():
        ct.weight.copy_(c.weight)
        c.bias.zero_()
        ct.bias.zero_()
    x = t64(rng.normal(size=(1, 2, 9, 9))).requires_grad_(True)
    y = t64(rng.normal(size=(1, 3, 5, 5)))
    lhs = (c(x) * y).sum()
    rhs = (x * ct(y)).sum()
    assert abs(float((lhs - rhs).detach())) < 1e-8
    (gx,) = torch.autograd.grad(lhs, x)
    torch.testing.assert_close(gx, ct(y), rtol=0, atol=1e-12)


def test_sigmoid_decoder_output_bounded(rng):
    net = Network([[LayerSpec("flatten"), LayerSpec("linear", units=2)]], input_shape=(1, 4, 4),
                  decoder=[LayerSpec("linear", units=16), LayerSpec("sigmoid")])
    init_parameters(net, torch.Generator().manual_seed(0))
    with torch.no_grad():
        for p in net.decoder.parameters():
            p.mul_(1e3)
    out, _ = net(t64(rng.normal(size=(32, 1, 4, 4)) * 100))
    r = out["reconstruction"]
    assert float(r.detach().min()) >= 0 and float(r.detach().max()) <= 1


def test_mse_examples(rng):
    x = t64(rng.random((3, 4)))
    assert float(loss_mse(x, x)) == 0.0
    assert float(loss_mse(t64([0.0, 1.0]), t64([1.0, 1.0]))) == 0.5
    with pytest.raises(ShapeError):
        loss_mse(t64([0.0]), t64([0.0, 1.0]))


def test_cross_entropy_examples():
    z = torch.zeros(10, dtype=torch.float64)
    for label in (0, 7):
        assert float(loss_cross_entropy(z, label)) == pytest.approx(math.log(10), abs=1e-15)
    big = torch.full((10,), -1e3, dtype=torch.float64)
    big[3] = 1e3
    assert float(loss_cross_entropy(big, 3)) == 0.0
    for bad in (10, -1):
        with pytest.raises(ValueError, match="out of range"):
            loss_cross_entropy(z, bad)


def test_adam_first_step():
    p = t64([0.5])
    adam_step([p], [t64([1.0])], AdamState(), lr=1e-3)
    assert float(p) == pytest.approx(0.5 - 1e-3, abs=1e-10)


def test_adam_zero_gradient_fixed_point():
    p = t64([0.5, -2.0])
    st = AdamState()
    for _ in range(10):
        adam_step([p], [torch.zeros(2, dtype=torch.float64)], st)
    assert p.tolist() == [0.5, -2.0]


def test_adam_constant_gradient_step_is_lr_sign():
    p = t64([0.0, 0.0])
    st = AdamState()
    g = t64([3.0, -0.01])
    for _ in range(2000):
        before = p.clone()
        adam_step([p], [g], st, lr=1e-3)
    torch.testing.assert_close(p - before, t64([-1e-3, 1e-3]), rtol=1e-5, atol=0)


def test_adam_matches_torch_optim(rng):
    a = t64(rng.normal(size=(3, 4))).requires_grad_(True)
    b = a.detach().clone().requires_grad_(True)
    mine = Adam([a])
    ref = torch.optim.Adam([b], lr=1e-3, betas=(0.9, 0.999), eps=1e-8)
    for k in range(50):
        g = t64(rng.normal(size=(3, 4)))
        a.grad = g.clone()
        b.grad = g.clone()
        mine.step()
        ref.step()
    torch.testing.assert_close(a, b, rtol=1e-12, atol=1e-14)


def _small_net():
    net = Network([[conv("2/3/1/1"), LayerSpec("batchnorm"), LayerSpec("relu")],
                   [LayerSpec("flatten"), LayerSpec("linear", units=3)]], input_shape=(1, 4, 4),
                  classifier=[LayerSpec("linear", units=10)])
    init_parameters(net, torch.Generator().manual_seed(5))
    return net


def test_checkpoint_round_trip(tmp_path, rng):
    net = _small_net()
    net.train()(t64(rng.normal(size=(4, 1, 4, 4))))
    save_checkpoint(net, tmp_path / "a.ckpt", {"seed": 5})
    tensors, meta = loads_checkpoint((tmp_path / "a.ckpt").read_bytes())
    assert meta == {"seed": 5}
    other = _small_net()
    init_parameters(other, torch.Generator().manual_seed(99))
    load_state(other, tensors)
    for (k, v), (k2, v2) in zip(net.state_dict().items(), other.state_dict().items()):
        assert k == k2 and torch.equal(v, v2), k
    save_checkpoint(other, tmp_path / "b.ckpt", {"seed": 5})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_layout():
    blob = dumps_checkpoint({"w": torch.tensor([[1.0, 2.0]], dtype=torch.float64)}, {})
    assert blob[:8] == b"EMBATTR\x00"
    assert blob[8:12] == (1).to_bytes(4, "little")
    assert blob[-16:] == np.array([1.0, 2.0], dtype="<f8").tobytes()


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b"XXXXXXXX" + b[8:], "magic"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\x00", "trailing"),
    (lambda b: b[:8] + (2).to_bytes(4, "little") + b[12:], "version"),
])
def test_checkpoint_errors(mutate, msg):
    blob = dumps_checkpoint(_small_net().state_dict(), {"k": 1})
    with pytest.raises(CheckpointError, match=msg):
        loads_checkpoint(mutate(blob))


def test_load_state_rejects_wrong_shapes():
    tensors, _ = loads_checkpoint(dumps_checkpoint(_small_net().state_dict()))
    tensors["blocks.1.1.weight"] = torch.zeros(4, 32, dtype=torch.float64)
    with pytest.raises(CheckpointError, match="shape"):
        load_state(_small_net(), tensors)
    del tensors["blocks.1.1.weight"]
    with pytest.raises(CheckpointError, match="lacks"):
        load_state(_small_net(), tensors)
