import itertools
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import sympy as sp
import torch
from hypothesis import given, settings, strategies as st

from hemopinn.neural import (
    MlpSpec,
    NonFiniteLoss,
    ParamVector,
    adam_init,
    adam_step,
    basis,
    forward,
    forward_jet,
    init_params,
    load_checkpoint,
    loss_gradient,
    save_checkpoint,
    sigmoid_jet,
    swish_jet,
)
from hemopinn.neural.jet import compose

D = torch.float64

# central-difference stencils for derivative orders 0..3 (offset -> weight)
_STENCIL = {
    0: {0: 1.0},
    1: {-1: -0.5, 1: 0.5},
    2: {-1: 1.0, 0: -2.0, 1: 1.0},
    3: {-2: -0.5, -1: 1.0, 1: -1.0, 2: 0.5},
}


def fd_partial(f, x, alpha, h):
    """Tensor-product central difference of multi-index ``alpha`` at ``x``."""
    total = 0.0
    per_var = [list(_STENCIL[a].items()) for a in alpha]
    for combo in itertools.product(*per_var):
        w = math.prod(c[1] for c in combo)
        shift = np.array([c[0] for c in combo], dtype=float) * h
        total = total + w * f(x + shift)
    return total / h ** sum(alpha)


def richardson(f, x, alpha, h=2e-2):
    coarse = fd_partial(f, x, alpha, h)
    fine = fd_partial(f, x, alpha, h / 2)
    return (4 * fine - coarse) / 3


def _small_net(seed, n_in=3, n_out=2, width=6, layers=2):
    spec = MlpSpec(n_in, layers, width, n_out)
    g = torch.Generator().manual_seed(seed)
    theta = init_params(spec, seed) + 0.1 * torch.randn(spec.n_params, generator=g, dtype=D)
    return spec, theta


def _all_alphas(nvars, degree):
    return [a for a in basis(nvars, degree).multi if sum(a) >= 1]


def test_coefficient_count():
    assert basis(3, 3).ncoef == math.comb(6, 3) == 20
    assert basis(2, 2).ncoef == 6
    assert basis(1, 3).ncoef == 4


def test_param_count_paper_size():
    # layer-shape arithmetic: input layer, six hidden-to-hidden layers, output layer
    expected = 3 * 220 + 220 + 6 * (220**2 + 220) + 220 * 3 + 3
    assert expected == 293_263
    assert MlpSpec(3, 7, 220, 3).n_params == expected


def test_init_deterministic_and_glorot_variance():
    spec = MlpSpec(3, 2, 220, 3)
    a, b = init_params(spec, 1), init_params(spec, 1)
    assert torch.equal(a, b)
    assert not torch.equal(a, init_params(spec, 2))
    W = a[3 * 220 + 220: 3 * 220 + 220 + 220 * 220]
    assert W.var().item() == pytest.approx(2.0 / 440.0, rel=0.05)
    # biases are zero
    assert not a[3 * 220: 3 * 220 + 220].any()


def test_swish_values():
    x = basis(1, 3).variables(torch.tensor([[0.0], [1.0]], dtype=D))
    y = swish_jet(x)
    assert y.value[0, 0].item() == 0.0
    assert y.d(1)[0, 0].item() == pytest.approx(0.5, abs=1e-15)
    assert y.value[1, 0].item() == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-15)
    assert y.value[1, 0].item() == pytest.approx(0.7310585786300049, abs=1e-15)


@pytest.mark.parametrize("fn,jet_fn", [
    (lambda a: a / (1 + np.exp(-a)), swish_jet),
    (lambda a: 1 / (1 + np.exp(-a)), sigmoid_jet),
])
def test_activation_jets_vs_fd(fn, jet_fn):
    pts = np.linspace(-3.0, 3.0, 13)
    y = jet_fn(basis(1, 3).variables(torch.tensor(pts[:, None], dtype=D)))
    for k in (1, 2, 3):
        for i, a in enumerate(pts):
            fd = richardson(lambda z: fn(z[0]), np.array([a]), (k,))
            got = y.d(k)[i, 0].item()
            assert abs(got - fd) <= 1e-6 * max(1.0, abs(fd))


def test_activation_degree_limit():
    with pytest.raises(NotImplementedError):
        swish_jet(basis(1, 4).variables(torch.zeros((1, 1), dtype=D)))


def test_jet_polynomial_arithmetic_is_exact():
    x, y, t = sp.symbols("x y t")
    expr = (x + 2 * y - t) * (x * y + 3) * (1 + t * x) - 0.5 * y**3
    pt = {x: 0.3, y: -0.7, t: 1.1}
    J = basis(3, 3).variables(torch.tensor([[0.3, -0.7, 1.1]], dtype=D))
    X, Y, T = J[..., 0], J[..., 1], J[..., 2]
    out = (X + 2 * Y - T) * (X * Y + 3) * (1 + T * X) - 0.5 * (Y * Y * Y)
    for alpha in basis(3, 3).multi:
        sym = sp.diff(expr, x, alpha[0], y, alpha[1], t, alpha[2]) if sum(alpha) else expr
        assert abs(out.d(*alpha)[0].item() - float(sym.subs(pt))) < 1e-14 * max(1.0, abs(float(sym.subs(pt))))


def test_jet_compose_exp_exact():
    x, y = sp.symbols("x y")
    expr = sp.exp(x * y + x)
    J = basis(2, 3).variables(torch.tensor([[0.4, 0.2]], dtype=D))
    inner = J[..., 0] * J[..., 1] + J[..., 0]
    e = math.exp(inner.value.item())
    out = compose(inner, [torch.exp(inner.value)] * 4)
    for alpha in basis(2, 3).multi:
        sym = sp.diff(expr, x, alpha[0], y, alpha[1]) if sum(alpha) else expr
        val = float(sym.subs({x: 0.4, y: 0.2}))
        assert abs(out.d(*alpha)[0].item() - val) < 1e-13 * max(1.0, abs(val))
    assert e > 0


def test_identity_network_jets_exact():
    # with identity activation the net is affine; all second and third partials vanish exactly
    spec = MlpSpec(3, 2, 4, 2, "identity")
    theta = init_params(spec, 3)
    pts = torch.rand((5, 3), dtype=D, generator=torch.Generator().manual_seed(0))
    jet = forward_jet(theta, spec, pts, 3)
    Ws = [theta[:12].reshape(4, 3), theta[16:32].reshape(4, 4), theta[36:44].reshape(2, 4)]
    A = Ws[2] @ Ws[1] @ Ws[0]
    for v in range(3):
        e = [0, 0, 0]
        e[v] = 1
        assert torch.allclose(jet.d(*e), A[:, v].expand(5, 2), atol=1e-14, rtol=0)
    for alpha in basis(3, 3).multi:
        if sum(alpha) >= 2:
            assert torch.all(jet.d(*alpha) == 0)


def test_zero_network():
    spec = MlpSpec(3, 2, 5, 2)
    jet = forward_jet(torch.zeros(spec.n_params, dtype=D), spec, torch.rand((4, 3), dtype=D), 3)
    assert not jet.c.any()


def test_linear_layer_jet():
    # u = 2x + 3y with identity single hidden layer (W2 = 1, W1 = [2, 3])
    spec = MlpSpec(2, 1, 1, 1, "identity")
    theta = torch.tensor([2.0, 3.0, 0.0, 1.0, 0.0], dtype=D)
    jet = forward_jet(theta, spec, torch.tensor([[0.5, -1.0]], dtype=D), 3)
    assert jet.d(1, 0).item() == 2.0 and jet.d(0, 1).item() == 3.0
    assert all(jet.d(*a).item() == 0.0 for a in basis(2, 3).multi if sum(a) >= 2)


@pytest.mark.parametrize("seed", range(100))
def test_network_partials_vs_richardson(seed):
    spec, theta = _small_net(seed)
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-1, 1, 3)
    jet = forward_jet(theta, spec, torch.tensor(x0[None, :], dtype=D), 3)

    def f(x):
        return forward(theta, spec, torch.tensor(x[None, :], dtype=D))[0].numpy()

    for alpha in _all_alphas(3, 3):
        fd = richardson(f, x0, alpha)
        got = jet.d(*alpha)[0].numpy()
        assert np.all(np.abs(got - fd) <= 1e-5 * np.maximum(np.abs(fd), 1e-2)), alpha


def test_forward_degree_validation():
    spec, theta = _small_net(0)
    with pytest.raises(ValueError):
        forward_jet(theta, spec, torch.zeros((1, 3), dtype=D), 4)
    with pytest.raises(ValueError):
        forward_jet(theta, spec, torch.zeros((1, 2), dtype=D), 1)


def test_quadratic_loss_gradient():
    pv = ParamVector.concat({"a": torch.randn(7, dtype=D), "b": torch.randn(3, dtype=D)})
    val, g = loss_gradient(pv, None, lambda th, _: 0.5 * torch.sum(th * th))
    assert torch.equal(g, pv.data)
    assert val == pytest.approx(0.5 * float(pv.data @ pv.data))


def test_gradient_linear_in_batch():
    spec, theta = _small_net(1, n_in=2, n_out=1)
    pv = ParamVector.concat({"net": theta})
    one = torch.tensor([[0.1, 0.2]], dtype=D)
    two = one.repeat(2, 1)

    def closure(th, pts):
        return torch.sum(forward_jet(th, spec, pts, 2).d(2, 0) ** 2)

    _, g1 = loss_gradient(pv, one, closure)
    _, g2 = loss_gradient(pv, two, closure)
    # identical up to BLAS reduction order
    assert torch.allclose(g2, 2 * g1, rtol=4e-15, atol=0)


def test_directional_fd_on_jet_loss():
    spec, theta = _small_net(5, n_in=3, n_out=2, width=8)
    pv = ParamVector.concat({"net": theta})
    pts = torch.rand((16, 3), dtype=D, generator=torch.Generator().manual_seed(1))

    def closure(th, _):
        J = forward_jet(th, spec, pts, 3)
        psi = J[..., 0]
        return torch.mean(psi.d(2, 1, 0) ** 2 + psi.d(0, 0, 1) * psi.value) + torch.mean(J[..., 1].d(1, 1) ** 2)

    val, g = loss_gradient(pv, None, closure)
    rng = np.random.default_rng(0)
    eps = 1e-5
    for _ in range(100):
        d = torch.tensor(rng.standard_normal(len(pv)), dtype=D)
        d /= d.norm()
        with torch.no_grad():
            fd = (closure(theta + eps * d, None) - closure(theta - eps * d, None)).item() / (2 * eps)
        exact = float(g @ d)
        assert abs(exact - fd) <= 1e-5 * max(abs(exact), 1e-3 * g.norm().item())


def test_nonfinite_loss():
    pv = ParamVector.concat({"a": torch.ones(2, dtype=D)})
    with pytest.raises(NonFiniteLoss):
        loss_gradient(pv, None, lambda th, _: th.sum() / 0.0)


def test_param_vector_slices():
    pv = ParamVector.concat({"net": torch.arange(5.0), "wk": torch.tensor([7.0, 8.0])})
    assert pv.slices == {"net": (0, 5), "wk": (5, 7)}
    assert torch.equal(pv["wk"], torch.tensor([7.0, 8.0], dtype=D))
    assert pv.mask("wk").sum() == 2
    with pytest.raises(ValueError):
        ParamVector(torch.zeros(4), {"a": (0, 2), "b": (3, 4)})


def test_checkpoint_round_trip(tmp_path):
    pv = ParamVector.concat({"net": torch.randn(11, dtype=D), "wk": torch.randn(2, dtype=D)})
    save_checkpoint(tmp_path, pv, {"step": 3, "seed": 9}, {"adam_m": np.ones(13)})
    back, head = load_checkpoint(tmp_path)
    assert torch.equal(back.data, pv.data) and back.slices == pv.slices
    assert head["step"] == 3 and head["seed"] == 9
    assert np.array_equal(np.load(tmp_path / "adam_m.npy"), np.ones(13))


def test_adam_zero_gradient_fixed_point():
    pv = ParamVector.concat({"net": torch.randn(6, dtype=D)})
    s = adam_init(pv, {"net": 1e-3})
    s2, p = adam_step(s, pv.data, torch.zeros(6, dtype=D))
    assert torch.equal(p, pv.data) and s2.step == 1


def test_adam_first_step_closed_form():
    pv = ParamVector.concat({"net": torch.zeros(4, dtype=D), "wk": torch.zeros(2, dtype=D)})
    s = adam_init(pv, {"net": 1e-3, "wk": 1e-2})
    g = torch.tensor([1.0, -2.0, 1e-9, 0.5, -3.0, 4.0], dtype=D)
    _, p = adam_step(s, pv.data, g)
    lr = torch.tensor([1e-3] * 4 + [1e-2] * 2, dtype=D)
    assert torch.allclose(p, -lr * g / (g.abs() + 1e-8), rtol=1e-12, atol=0)


def test_adam_constant_gradient_bounded_monotone():
    pv = ParamVector.concat({"net": torch.zeros(3, dtype=D)})
    s = adam_init(pv, {"net": 1e-2})
    p = pv.data
    g = torch.tensor([0.3, -5.0, 1e-4], dtype=D)
    prev = p
    for _ in range(1000):
        s, p = adam_step(s, p, g)
        step = p - prev
        assert torch.all(-torch.sign(g) * step > 0)
        assert torch.all(step.abs() <= 1e-2 * (1 + 1e-6))
        prev = p


def test_adam_decay_schedule():
    pv = ParamVector.concat({"net": torch.zeros(1, dtype=D)})
    s = adam_init(pv, {"net": 1.0}, decay_every=10, decay_factor=0.5)
    p = pv.data
    for _ in range(25):
        s, p = adam_step(s, p, torch.ones(1, dtype=D))
    assert s.current_scale() == 0.25
    with pytest.raises(KeyError):
        adam_init(pv, {})


def test_concurrent_evaluation_bitwise():
    spec, theta = _small_net(3, width=16)
    chunks = [torch.rand((64, 3), dtype=D, generator=torch.Generator().manual_seed(i)) for i in range(8)]
    serial = [forward_jet(theta, spec, c, 3).c for c in chunks]
    with ThreadPoolExecutor(4) as ex:
        parallel = list(ex.map(lambda c: forward_jet(theta, spec, c, 3).c, chunks))
    assert all(torch.equal(a, b) for a, b in zip(serial, parallel))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_mixed_partials_commute(seed):
    spec, theta = _small_net(seed, n_in=2, n_out=1)
    jet = forward_jet(theta, spec, torch.rand((3, 2), dtype=D), 3)
    # d/dx of (d/dy psi) equals the mixed coefficient read directly
    assert torch.allclose(jet[..., 0].diff(1).diff(0).value, jet[..., 0].d(1, 1), rtol=1e-14, atol=1e-15)
