import numpy as np
import pytest

from warpgan import autodiff as ad
from warpgan.errors import NotInGraph, ShapeMismatch

from oracles import adam_reference, numeric_grad

F32 = np.float32


def check_grads(f, arrays, tol=1e-3, eps=3e-3):
    """Compare backward() gradients of scalar f(*tensors) against FD."""
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    loss = f(*tensors)
    ad.backward(loss)
    for k, (t, a) in enumerate(zip(tensors, arrays)):

        def probe(x, k=k):
            vals = [ad.Tensor(arr) for arr in arrays]
            vals[k] = ad.Tensor(x)
            with ad.no_grad():
                return f(*vals).item()

        num = numeric_grad(probe, np.asarray(a, dtype=np.float64), eps=eps)
        ana = t.grad
        assert ana is not None, f"no gradient for arg {k}"
        scale = max(1.0, float(np.max(np.abs(num))))
        err = float(np.max(np.abs(ana - num))) / scale
        assert err < tol, f"arg {k}: rel grad error {err:.2e}"


def test_arithmetic_grads():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 1, (3, 4)).astype(F32)
    b = rng.normal(0, 1, (3, 4)).astype(F32) + 3.0  # keep divisions tame
    check_grads(lambda x, y: (x * y + x - y / x).sum(), [a + 3.0, b])
    check_grads(lambda x, y: (x / y).mean(), [a, b])
    check_grads(lambda x: (-x).sum(), [a])
    check_grads(lambda x: ad.square(x).sum(), [a])
    check_grads(lambda x: ad.sqrt(x).sum(), [np.abs(a) + 1.0])


def test_broadcast_grads():
    rng = np.random.default_rng(1)
    a = rng.normal(0, 1, (2, 3, 4)).astype(F32)
    b = rng.normal(0, 1, (1, 3, 1)).astype(F32)
    c = rng.normal(0, 1, (4,)).astype(F32)
    check_grads(lambda x, y: (x * y).sum(), [a, b])
    check_grads(lambda x, y: (x + y).sum(axes=(0, 2)).mean(), [a, b])
    check_grads(lambda x, y: (x * y).sum(), [a, c])


def test_matmul_grads_2d_and_batched():
    rng = np.random.default_rng(2)
    a = rng.normal(0, 1, (5, 3)).astype(F32)
    b = rng.normal(0, 1, (3, 4)).astype(F32)
    check_grads(lambda x, y: (x @ y).sum(), [a, b])
    ab = rng.normal(0, 1, (6, 2, 3)).astype(F32)
    bb = rng.normal(0, 1, (6, 3, 2)).astype(F32)
    check_grads(lambda x, y: ad.square(x @ y).sum(), [ab, bb])
    # broadcast batch on the left operand
    a1 = rng.normal(0, 1, (1, 4, 3)).astype(F32)
    check_grads(lambda x, y: (x @ y).sum(), [a1, bb])


def test_structural_grads():
    rng = np.random.default_rng(3)
    a = rng.normal(0, 1, (2, 3, 4)).astype(F32)
    check_grads(lambda x: x.reshape((6, 4)).sum(axes=1).mean(), [a])
    check_grads(lambda x: x.transpose((2, 0, 1)).sum(), [a])
    check_grads(lambda x: ad.narrow(x, 2, 1, 2).sum(), [a])
    check_grads(lambda x: ad.pad_zeros(x, 1, 2, 1).mean(), [a])
    b = rng.normal(0, 1, (2, 5, 4)).astype(F32)
    check_grads(lambda x, y: ad.concat([x, y], 1).mean(), [a, b])


def test_relu_grads_away_from_kink():
    rng = np.random.default_rng(4)
    a = rng.normal(0, 1, (4, 4)).astype(F32)
    a[np.abs(a) < 0.05] = 0.5  # keep FD probes off the kink
    check_grads(lambda x: ad.relu(x).sum(), [a])
    check_grads(lambda x: ad.leaky_relu(x, 0.2).sum(), [a])


def test_block_mean_matches_manual_and_grads():
    rng = np.random.default_rng(5)
    a = rng.normal(0, 1, (2, 3, 6, 4)).astype(F32)
    out = ad.block_mean(ad.Tensor(a), 3, 2)
    ref = a.reshape(2, 3, 2, 3, 2, 2).mean(axis=(3, 5))
    assert np.allclose(out.data, ref, atol=1e-6)
    check_grads(lambda x: ad.square(ad.block_mean(x, 3, 2)).sum(), [a])
    with pytest.raises(ShapeMismatch):
        ad.block_mean(ad.Tensor(a), 4, 2)


def naive_conv(x, w, stride):
    """Loop convolution with ceil-sized output and low/high zero padding."""
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    ho = -(-h // stride)
    wo = -(-wd // stride)
    ph = max((ho - 1) * stride + k - h, 0)
    pw = max((wo - 1) * stride + k - wd, 0)
    xp = np.zeros((n, c, h + ph, wd + pw), dtype=np.float64)
    xp[:, :, ph // 2 : ph // 2 + h, pw // 2 : pw // 2 + wd] = x
    y = np.zeros((n, f, ho, wo))
    for ni in range(n):
        for fi in range(f):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    y[ni, fi, i, j] = np.sum(patch * w[fi])
    return y


@pytest.mark.parametrize("hw", [(8, 8), (5, 6), (7, 7)])
def test_conv2d_forward_matches_naive(hw):
    rng = np.random.default_rng(6)
    h, wd = hw
    x = rng.normal(0, 1, (2, 3, h, wd)).astype(F32)
    w = rng.normal(0, 1, (4, 3, 4, 4)).astype(F32)
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), stride=2)
    ref = naive_conv(x.astype(np.float64), w.astype(np.float64), 2)
    assert out.data.shape == ref.shape
    assert np.max(np.abs(out.data - ref)) < 1e-4


def test_conv2d_output_shape_is_ceil():
    x = ad.Tensor(np.zeros((1, 3, 120, 160), dtype=F32))
    w = ad.Tensor(np.zeros((8, 3, 4, 4), dtype=F32))
    assert ad.conv2d(x, w, 2).data.shape == (1, 8, 60, 80)
    x2 = ad.Tensor(np.zeros((1, 8, 15, 20), dtype=F32))
    w2 = ad.Tensor(np.zeros((8, 8, 4, 4), dtype=F32))
    assert ad.conv2d(x2, w2, 2).data.shape == (1, 8, 8, 10)


def test_conv2d_grads():
    rng = np.random.default_rng(7)
    x = rng.normal(0, 1, (2, 2, 5, 6)).astype(F32)
    w = rng.normal(0, 1, (3, 2, 4, 4)).astype(F32)
    check_grads(lambda a, b: ad.conv2d(a, b, 2).sum(), [x, w])
    check_grads(lambda a, b: ad.square(ad.conv2d(a, b, 2)).mean(), [x, w], tol=2e-3)


def test_conv_adjoint_primitives_differentiate():
    # gradients THROUGH the adjoint kernels (i.e. double-backward support)
    rng = np.random.default_rng(8)
    g = rng.normal(0, 1, (2, 3, 3, 3)).astype(F32)
    w = rng.normal(0, 1, (3, 2, 4, 4)).astype(F32)
    x = rng.normal(0, 1, (2, 2, 6, 6)).astype(F32)
    check_grads(
        lambda gg, ww: ad.square(ad.conv_input_adjoint(gg, ww, 2, (2, 2, 6, 6))).sum(),
        [g, w],
        tol=2e-3,
    )
    check_grads(
        lambda xx, gg: ad.square(ad.conv_weight_adjoint(xx, gg, 2, (3, 2, 4, 4))).sum(),
        [x, g],
        tol=2e-3,
    )


def test_grad_functional_and_create_graph_second_order():
    # f(x) = sum(x^3) via x*x*x; grad is 3x^2, grad of sum(grad) is 6x
    x = ad.Tensor(np.array([1.0, -2.0, 0.5], dtype=F32), requires_grad=True)
    y = (x * x * x).sum()
    (gx,) = ad.grad(y, [x], create_graph=True)
    assert np.allclose(gx.data, 3 * x.data**2, atol=1e-5)
    z = gx.sum()
    (ggx,) = ad.grad(z, [x])
    assert np.allclose(ggx.data, 6 * x.data, atol=1e-5)


def test_double_backward_of_gradient_norm_matches_fd():
    # d/dw of sum((||d D(x)/dx|| - 1)^2) for a small conv critic
    rng = np.random.default_rng(9)
    x_data = rng.normal(0, 1, (2, 1, 6, 6)).astype(F32)
    w_data = rng.normal(0, 0.5, (2, 1, 4, 4)).astype(F32)

    def penalty(w):
        x = ad.Tensor(x_data, requires_grad=True)

        def critic(t):
            return ad.leaky_relu(ad.conv2d(t, w, 2), 0.2).mean(axes=(1, 2, 3))

        norms = ad.input_gradient_norm(critic, x)
        one = ad.Tensor(np.float32(1.0))
        return ad.square(norms - one).sum()

    w = ad.Parameter(w_data, "w")
    loss = penalty(w)
    ad.backward(loss)
    ana = w.grad.copy()

    def probe(wd):
        with ad.enable_grad():
            val = penalty(ad.Tensor(wd.astype(F32)))
        return val.item()

    num = numeric_grad(probe, w_data.astype(np.float64), eps=1e-3)
    scale = max(1.0, float(np.max(np.abs(num))))
    assert float(np.max(np.abs(ana - num))) / scale < 2e-3


def test_input_gradient_norm_linear_critic_is_exact():
    # D(x) = <w, x>: per-sample gradient is w, norm is ||w|| exactly
    rng = np.random.default_rng(10)
    w_data = rng.normal(0, 1, (18,)).astype(F32)
    w = ad.Parameter(w_data.copy(), "w")
    x = ad.Tensor(rng.normal(0, 1, (4, 2, 3, 3)).astype(F32), requires_grad=True)

    def critic(t):
        return t.reshape((4, 18)) @ w.reshape((18, 1))

    norms = ad.input_gradient_norm(lambda t: critic(t).sum(axes=1), x)
    expected = np.linalg.norm(w_data)
    assert np.allclose(norms.data, expected, rtol=1e-6)
    # and the penalty gradient wrt w is analytic: 2 (||w|| - 1) w / ||w|| per sample
    one = ad.Tensor(np.float32(1.0))
    gp = ad.square(norms - one).mean()
    ad.zero_grads([w])
    ad.backward(gp)
    analytic = 2.0 * (expected - 1.0) * w_data / expected
    assert np.max(np.abs(w.grad - analytic)) < 1e-6


def test_not_in_graph_and_no_grad():
    x = ad.Tensor(np.ones(3, dtype=F32), requires_grad=True)
    y = ad.Tensor(np.ones(3, dtype=F32), requires_grad=True)
    loss = (x * x).sum()
    with pytest.raises(NotInGraph):
        ad.grad(loss, [y])
    with ad.no_grad():
        silent = (x * x).sum()
    assert not silent.requires_grad
    with pytest.raises(NotInGraph):
        ad.backward(silent)
    detached = (x * x).detach()
    assert not detached.requires_grad and detached._parents == ()


def test_backward_accumulates_and_zero_grads_clears():
    x = ad.Parameter(np.ones(4, dtype=F32), "x")
    ad.backward((x * x).sum())
    ad.backward((x * x).sum())
    assert np.allclose(x.grad, 4.0)  # two accumulated passes of 2x
    ad.zero_grads([x])
    assert x.grad is None


def test_grad_of_scalar_only():
    x = ad.Tensor(np.ones(3, dtype=F32), requires_grad=True)
    with pytest.raises(ShapeMismatch):
        ad.grad(x * x, [x])


def test_adam_matches_reference_sequence():
    # drive a single scalar parameter with a fixed gradient sequence
    rng = np.random.default_rng(11)
    gseq = [float(g) for g in rng.normal(0, 1, 12)]
    p = ad.Parameter(np.zeros((), dtype=F32), "p")
    state = ad.AdamState()
    ref = adam_reference(gseq, lr=0.01)
    for g, want in zip(gseq, ref):
        p.grad = np.asarray(g, dtype=F32)
        ad.adam_step([p], state, lr=0.01)
        assert abs(p.data - want) < 1e-6
    assert state.step == len(gseq)


def test_adam_bias_correction_first_step():
    # after one step the update must be exactly -lr * sign-ish normalized grad
    p = ad.Parameter(np.zeros(3, dtype=F32), "p")
    p.grad = np.array([0.5, -2.0, 1e-3], dtype=F32)
    ad.adam_step([p], ad.AdamState(), lr=0.1)
    expect = -0.1 * p.grad / (np.abs(p.grad) + 1e-8)
    assert np.max(np.abs(p.data - expect)) < 1e-5


def test_shape_mismatch_raised():
    a = ad.Tensor(np.ones((2, 3), dtype=F32))
    b = ad.Tensor(np.ones((4, 5), dtype=F32))
    with pytest.raises(ShapeMismatch):
        ad.add(a, b)
    with pytest.raises(ShapeMismatch):
        ad.matmul(a, b)
    with pytest.raises(ShapeMismatch):
        ad.conv2d(ad.Tensor(np.ones((1, 2, 8, 8), dtype=F32)),
                  ad.Tensor(np.ones((4, 3, 4, 4), dtype=F32)))


def test_results_stay_float32():
    x = ad.Tensor(np.ones((2, 2), dtype=np.float64))
    assert x.data.dtype == np.float32
    y = x * 2.0 + 1.0
    assert y.data.dtype == np.float32
    assert ad.sqrt(y).data.dtype == np.float32
