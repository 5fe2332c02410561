import numpy as np
import pytest

from feinn.neural import (
    Mlp,
    NetError,
    Taylor2,
    flatten,
    forward,
    forward_grad,
    hidden_outputs,
    load_checkpoint,
    mlp_new,
    save_checkpoint,
    spatial_derivs,
    t2_atan2,
    unflatten,
    vjp,
)

ARCH = (2, 50, 50, 50, 50, 1)


def test_param_count_paper_arch():
    net = mlp_new(ARCH, seed=0)
    # 2*50+50 + 3*(50*50+50) + 50+1
    assert net.n_params == 7851
    assert flatten(net).shape == (7851,)


def test_glorot_bounds_and_determinism():
    n1 = mlp_new(ARCH, seed=42)
    n2 = mlp_new(ARCH, seed=42)
    assert np.array_equal(flatten(n1), flatten(n2))
    # 50 -> 50 layer bound
    a = np.sqrt(6 / 100)
    assert np.abs(n1.weights[1]).max() <= a
    assert all(np.allclose(b, 0) for b in n1.biases)
    n3 = mlp_new(ARCH, seed=43)
    assert not np.array_equal(flatten(n1), flatten(n3))


def test_arch_validation():
    with pytest.raises(NetError):
        mlp_new((3, 10, 1))
    with pytest.raises(NetError):
        mlp_new((2, 10, 2))


def test_flatten_unflatten_roundtrip(rng):
    net = mlp_new((2, 7, 5, 1), seed=1)
    theta = rng.standard_normal(net.n_params)
    net2 = unflatten(net, theta)
    assert np.array_equal(flatten(net2), theta)


def test_forward_zero_params():
    net = mlp_new((2, 4, 1), seed=0)
    net = unflatten(net, np.zeros(net.n_params))
    pts = np.random.default_rng(0).random((10, 2))
    assert np.allclose(forward(net, pts), 0.0)


def test_forward_single_neuron_is_tanh_x():
    net = Mlp(
        (np.array([[1.0, 0.0]]), np.array([[1.0]])),
        (np.zeros(1), np.zeros(1)),
    )
    pts = np.column_stack([np.linspace(-2, 2, 9), np.zeros(9)])
    assert np.allclose(forward(net, pts), np.tanh(pts[:, 0]), atol=1e-15)


def test_forward_batch_equals_loop(rng):
    net = mlp_new((2, 9, 7, 1), seed=3)
    pts = rng.random((17, 2))
    batch = forward(net, pts)
    loop = np.array([forward(net, pts[i : i + 1])[0] for i in range(len(pts))])
    assert np.allclose(batch, loop, atol=1e-15)


def test_vjp_zero_cotangent(rng):
    net = mlp_new((2, 6, 1), seed=0)
    pts = rng.random((5, 2))
    g = vjp(net, pts, np.zeros(5))
    assert np.allclose(g, 0.0)


def test_vjp_matches_finite_differences(rng):
    net = mlp_new((2, 8, 6, 1), seed=5)
    theta = flatten(net)
    pt = rng.random((1, 2))
    g = vjp(net, pt, np.ones(1))
    eps = 1e-5
    for i in rng.choice(net.n_params, size=25, replace=False):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += eps
        tm[i] -= eps
        fd = (forward(unflatten(net, tp), pt)[0] - forward(unflatten(net, tm), pt)[0]) / (2 * eps)
        denom = max(abs(fd), 1e-8)
        assert abs(fd - g[i]) / denom < 1e-6, i


def test_vjp_linear_in_cotangent(rng):
    net = mlp_new((2, 10, 1), seed=2)
    pts = rng.random((8, 2))
    g1, g2 = rng.standard_normal((2, 8))
    lhs = vjp(net, pts, g1 + g2)
    rhs = vjp(net, pts, g1) + vjp(net, pts, g2)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_vjp_directional_derivative(rng):
    # <vjp, d> equals the directional derivative of sum(N) along d
    net = mlp_new((2, 12, 8, 1), seed=7)
    theta = flatten(net)
    pts = rng.random((4, 2))
    cot = rng.standard_normal(4)
    g = vjp(net, pts, cot)
    for _ in range(10):
        d = rng.standard_normal(net.n_params)
        d /= np.linalg.norm(d)
        eps = 1e-5
        fp = float(cot @ forward(unflatten(net, theta + eps * d), pts))
        fm = float(cot @ forward(unflatten(net, theta - eps * d), pts))
        fd = (fp - fm) / (2 * eps)
        assert abs(fd - g @ d) / max(abs(fd), 1e-10) < 1e-6


def test_spatial_derivs_zero_net():
    net = unflatten(mlp_new((2, 5, 1), seed=0), np.zeros(21))
    v, g, lap = spatial_derivs(net, np.random.default_rng(1).random((6, 2)))
    assert np.allclose(v, 0) and np.allclose(g, 0) and np.allclose(lap, 0)


def test_spatial_derivs_single_neuron_analytic():
    w1, w2, b = 0.7, -1.3, 0.2
    net = Mlp(
        (np.array([[w1, w2]]), np.array([[1.0]])),
        (np.array([b]), np.zeros(1)),
    )
    pts = np.random.default_rng(2).random((20, 2)) * 2 - 1
    v, g, lap = spatial_derivs(net, pts)
    s = w1 * pts[:, 0] + w2 * pts[:, 1] + b
    t = np.tanh(s)
    assert np.allclose(v, t, atol=1e-15)
    assert np.allclose(g[:, 0], w1 * (1 - t**2), atol=1e-14)
    assert np.allclose(g[:, 1], w2 * (1 - t**2), atol=1e-14)
    expected_lap = (w1**2 + w2**2) * (-2 * t * (1 - t**2))
    assert np.allclose(lap, expected_lap, atol=1e-13)


def test_spatial_derivs_match_stencil(rng):
    net = mlp_new((2, 20, 20, 1), seed=9)
    pts = rng.random((5, 2)) * 0.8 + 0.1
    v, g, lap = spatial_derivs(net, pts)
    h = 1e-4
    for i, (x, y) in enumerate(pts):
        probe = np.array(
            [[x, y], [x + h, y], [x - h, y], [x, y + h], [x, y - h]]
        )
        f = forward(net, probe)
        lap_fd = (f[1] + f[2] + f[3] + f[4] - 4 * f[0]) / h**2
        gx_fd = (f[1] - f[2]) / (2 * h)
        gy_fd = (f[3] - f[4]) / (2 * h)
        # the stencil's roundoff floor is ~eps/h^2 = 1e-8, so measure
        # relative to max(1, |lap|)
        assert abs(lap[i] - lap_fd) < 1e-5 * max(1.0, abs(lap_fd))
        assert abs(g[i, 0] - gx_fd) < 1e-6 * max(1.0, abs(gx_fd))
        assert abs(g[i, 1] - gy_fd) < 1e-6 * max(1.0, abs(gy_fd))


def test_spatial_derivs_value_channel_bitwise(rng):
    net = mlp_new((2, 30, 30, 1), seed=11)
    pts = rng.random((40, 2))
    v, _, _ = spatial_derivs(net, pts)
    assert np.array_equal(v, forward(net, pts))
    vg, _ = forward_grad(net, pts)
    assert np.array_equal(vg, forward(net, pts))


def test_forward_grad_consistent_with_spatial(rng):
    net = mlp_new((2, 15, 1), seed=4)
    pts = rng.random((12, 2))
    v1, g1 = forward_grad(net, pts)
    v2, g2, _ = spatial_derivs(net, pts)
    assert np.array_equal(v1, v2)
    assert np.allclose(g1, g2, atol=1e-15)


def test_bounded_params_never_nan(rng):
    net = mlp_new((2, 30, 30, 1), seed=0)
    theta = rng.uniform(-100, 100, net.n_params)
    net = unflatten(net, theta)
    pts = rng.random((50, 2)) * 3 - 1
    v, g, lap = spatial_derivs(net, pts)
    assert np.all(np.isfinite(v)) and np.all(np.isfinite(g)) and np.all(np.isfinite(lap))


def test_hidden_outputs_shape(rng):
    net = mlp_new((2, 13, 7, 1), seed=0)
    z = hidden_outputs(net, rng.random((9, 2)))
    assert z.shape == (9, 7)


def test_checkpoint_roundtrip_bitwise(tmp_path, rng):
    net = mlp_new((2, 17, 9, 1), seed=21)
    theta = rng.standard_normal(net.n_params)
    net = unflatten(net, theta)
    p = tmp_path / "net.ckpt"
    save_checkpoint(net, p)
    net2 = load_checkpoint(p)
    assert net2.arch == net.arch
    pts = rng.random((11, 2))
    assert np.array_equal(forward(net, pts), forward(net2, pts))


def test_taylor2_polynomial():
    pts = np.random.default_rng(3).random((30, 2))
    x, y = Taylor2.seed(pts)
    expr = x**3 * y + 2.0 * y**2 - x / (1.0 + y)
    # analytic derivatives
    X, Y = pts[:, 0], pts[:, 1]
    assert np.allclose(expr.val, X**3 * Y + 2 * Y**2 - X / (1 + Y), atol=1e-14)
    assert np.allclose(expr.dx, 3 * X**2 * Y - 1 / (1 + Y), atol=1e-13)
    assert np.allclose(expr.dy, X**3 + 4 * Y + X / (1 + Y) ** 2, atol=1e-13)
    assert np.allclose(expr.dxx, 6 * X * Y, atol=1e-13)
    assert np.allclose(expr.dyy, 4 - 2 * X / (1 + Y) ** 3, atol=1e-13)


def test_taylor2_transcendental_against_stencil():
    rng = np.random.default_rng(8)
    pts = rng.random((6, 2)) + 0.2

    def f(p):
        x, y = Taylor2.seed(p)
        r = (x**2 + y**2).sqrt()
        return (100.0 * (r - 0.7)).arctan() + (np.pi * x).sin() * y.tanh()

    out = f(pts)
    h = 1e-5

    def val(p):
        return f(p).val

    for i in range(len(pts)):
        x, y = pts[i]
        probe = np.array([[x + h, y], [x - h, y], [x, y + h], [x, y - h], [x, y]])
        v = val(probe)
        assert abs(out.dx[i] - (v[0] - v[1]) / (2 * h)) < 1e-6 * max(1, abs(out.dx[i]))
        assert abs(out.dy[i] - (v[2] - v[3]) / (2 * h)) < 1e-6 * max(1, abs(out.dy[i]))
        lap_fd = (v[0] + v[1] + v[2] + v[3] - 4 * v[4]) / h**2
        assert abs(out.dxx[i] + out.dyy[i] - lap_fd) < 1e-4 * max(1.0, abs(lap_fd))


def test_t2_atan2_matches_angle_derivatives():
    rng = np.random.default_rng(5)
    pts = rng.random((10, 2)) + 0.3
    x, y = Taylor2.seed(pts)
    th = t2_atan2(y, x)
    X, Y = pts[:, 0], pts[:, 1]
    r2 = X**2 + Y**2
    assert np.allclose(th.val, np.arctan2(Y, X), atol=1e-15)
    assert np.allclose(th.dx, -Y / r2, atol=1e-13)
    assert np.allclose(th.dy, X / r2, atol=1e-13)
    # harmonic: atan2 has zero Laplacian
    assert np.allclose(th.dxx + th.dyy, 0.0, atol=1e-12)
