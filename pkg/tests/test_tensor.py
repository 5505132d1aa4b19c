import zlib

import numpy as np
import pytest

from noisytail import tensor as T
from noisytail.tensor import Tensor, finite_difference_check

N_INSTANCES = 20
TOL = 1e-4


def weighted(fn, shape_like, rng):
    """Scalar probe: sum(w * fn(t)) with fixed random w, so no gradient entry is trivially zero."""
    w = None

    def f(t):
        nonlocal w
        out = fn(t)
        if w is None:
            w = rng.uniform(0.5, 1.5, size=out.shape) * rng.choice([-1, 1], size=out.shape)
        return T.tsum(T.mul(out, Tensor(w)))

    return f


def away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 2.0, size=shape)
    return x * rng.choice([-1, 1], size=shape)


def away_from_kinks(rng, shape, kinks, margin=0.1):
    x = rng.uniform(-2.0, 2.0, size=shape)
    for k in kinks:
        near = np.abs(x - k) < margin
        x[near] = k + np.copysign(margin, x[near] - k)
    return x


# -- values ----------------------------------------------------------------------


def test_matmul_identity_and_hand_example():
    b = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert np.array_equal(out.data, [[17.0], [39.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def direct_conv(x, k, stride, pad):
    n, c, h, w = x.shape
    o = k.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - 3) // stride + 1
    ow = (w + 2 * pad - 3) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
                    out[b, f, i, j] = np.sum(patch * k[f])
    return out


def test_conv2d_zero_kernel_and_delta_kernel(rng):
    x = rng.normal(size=(2, 1, 5, 5))
    zero = T.conv2d(Tensor(x), Tensor(np.zeros((1, 1, 3, 3))), stride=1, pad=1)
    assert np.all(zero.data == 0)
    delta = np.zeros((1, 1, 3, 3))
    delta[0, 0, 1, 1] = 1.0
    assert np.array_equal(T.conv2d(Tensor(x), Tensor(delta), stride=1, pad=1).data, x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_direct_loops(rng, stride, pad):
    x = rng.normal(size=(1, 1, 5, 5))
    k = rng.normal(size=(1, 1, 3, 3))
    got = T.conv2d(Tensor(x), Tensor(k), stride=stride, pad=pad).data
    np.testing.assert_allclose(got, direct_conv(x, k, stride, pad), rtol=0, atol=1e-12)
    # multi-channel, multi-filter
    x = rng.normal(size=(2, 3, 6, 5))
    k = rng.normal(size=(4, 3, 3, 3))
    got = T.conv2d(Tensor(x), Tensor(k), stride=stride, pad=pad).data
    np.testing.assert_allclose(got, direct_conv(x, k, stride, pad), rtol=0, atol=1e-12)


def test_conv2d_errors():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), pad=0)


def test_softmax_uniform_and_rows_sum(rng):
    p = T.softmax(Tensor(np.full((3, 10), 2.5)), axis=1).data
    np.testing.assert_allclose(p, 0.1, atol=1e-15)
    p = T.softmax(Tensor(rng.normal(scale=20, size=(50, 7))), axis=1).data
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-12)
    assert np.all(np.maximum(p, 1e-12) > 0)


def test_relu_and_clamp_values():
    assert np.array_equal(T.relu(Tensor([-2.0, 3.0])).data, [0.0, 3.0])
    assert np.array_equal(T.clamp(Tensor([-1.0, 0.5, 2.0]), 0.0, 1.0).data, [0.0, 0.5, 1.0])


def test_log_prob_clamps_boundaries():
    out = T.log_prob(Tensor([0.0, 1.0, 2.0])).data
    np.testing.assert_allclose(out, [np.log(1e-12), 0.0, 0.0])
    assert np.all(np.isfinite(out))


def test_log_of_nonpositive_is_an_internal_error():
    with pytest.raises(FloatingPointError):
        T.log(Tensor([1.0, 0.0]))


def test_scalar_broadcast_only():
    a = Tensor(np.ones((2, 3)))
    assert np.array_equal(T.add(a, 2.0).data, np.full((2, 3), 3.0))
    with pytest.raises(ValueError):
        T.add(a, Tensor(np.ones(3)))


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(4, 1, 6, 6))
    k = rng.normal(size=(3, 1, 3, 3))
    a = T.softmax(T.reshape(T.conv2d(Tensor(x), Tensor(k), 2, 1), (4, -1)), axis=1).data
    b = T.softmax(T.reshape(T.conv2d(Tensor(x), Tensor(k), 2, 1), (4, -1)), axis=1).data
    assert a.tobytes() == b.tobytes()


# -- backward semantics ------------------------------------------------------------


def test_backward_of_sum_gives_ones(rng):
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    T.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_accumulates_until_zeroed():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.tsum(T.mul(x, 3.0)).backward()
    T.tsum(T.mul(x, 3.0)).backward()
    assert np.array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_on_constant_is_a_noop():
    x = Tensor(np.array([1.0, 2.0]))
    T.tsum(T.mul(x, x)).backward()
    assert x.grad is None


def test_backward_needs_a_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        T.mul(x, 2.0).backward()


def test_shared_subexpression_visited_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = T.mul(x, x)
    z = T.add(y, y)  # d/dx 2x^2 = 4x
    T.tsum(z).backward()
    assert np.array_equal(x.grad, [8.0])


def test_fd_check_examples(rng):
    x = rng.normal(size=(4, 3))
    assert finite_difference_check(lambda t: T.tsum(T.mul(t, t)), x) <= 1e-7
    assert finite_difference_check(lambda t: Tensor(3.0), x) == 0.0


# -- gradients: every primitive, >= 20 random instances ------------------------------


UNARY = {
    "exp": (lambda t: T.exp(t), lambda r, s: r.normal(size=s)),
    "log": (lambda t: T.log(t), lambda r, s: r.uniform(0.2, 3.0, size=s)),
    "log_prob": (lambda t: T.log_prob(t), lambda r, s: r.uniform(0.05, 0.95, size=s)),
    "relu": (lambda t: T.relu(t), away_from_zero),
    "clamp": (lambda t: T.clamp(t, -0.5, 0.5), lambda r, s: away_from_kinks(r, s, (-0.5, 0.5))),
    "neg": (lambda t: -t, lambda r, s: r.normal(size=s)),
    "scalar_mul": (lambda t: T.mul(t, 2.5), lambda r, s: r.normal(size=s)),
    "scalar_add": (lambda t: T.add(t, -1.5), lambda r, s: r.normal(size=s)),
    "scalar_rsub": (lambda t: 1.0 - t, lambda r, s: r.normal(size=s)),
    "softmax": (lambda t: T.softmax(t, axis=1), lambda r, s: r.normal(size=s)),
    "log_softmax": (lambda t: T.log_softmax(t, axis=1), lambda r, s: r.normal(size=s)),
    "sum_axis0": (lambda t: T.tsum(t, axis=0), lambda r, s: r.normal(size=s)),
    "mean_axis1": (lambda t: T.tmean(t, axis=1), lambda r, s: r.normal(size=s)),
    "mean_all": (lambda t: T.reshape(T.tmean(t), (1,)), lambda r, s: r.normal(size=s)),
    "reshape": (lambda t: T.reshape(t, (-1,)), lambda r, s: r.normal(size=s)),
    "gather": (lambda t: T.gather(t, np.arange(t.shape[0]) % t.shape[1]), lambda r, s: r.normal(size=s)),
    "take_rows": (lambda t: T.take_rows(t, np.array([0, 2, 2])), lambda r, s: r.normal(size=s)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    fn, sample = UNARY[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(N_INSTANCES):
        x = sample(rng, (4, 3))
        worst = max(worst, finite_difference_check(weighted(fn, x, rng), x))
    assert worst <= TOL, f"{name}: max relative error {worst:.2e}"


BINARY = {
    "add": (T.add, (4, 3), (4, 3)),
    "sub": (T.sub, (4, 3), (4, 3)),
    "mul": (T.mul, (4, 3), (4, 3)),
    "matmul": (T.matmul, (4, 3), (3, 2)),
    "add_bias": (T.add_bias, (4, 3), (3,)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("wrt", [0, 1])
def test_binary_gradients(name, wrt):
    op, sa, sb = BINARY[name]
    rng = np.random.default_rng(17 + wrt)
    worst = 0.0
    for _ in range(N_INSTANCES):
        a, b = rng.normal(size=sa), rng.normal(size=sb)
        if wrt == 0:
            f = weighted(lambda t: op(t, Tensor(b)), a, rng)
            worst = max(worst, finite_difference_check(f, a))
        else:
            f = weighted(lambda t: op(Tensor(a), t), b, rng)
            worst = max(worst, finite_difference_check(f, b))
    assert worst <= TOL


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv2d_gradients(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    worst = 0.0
    for _ in range(N_INSTANCES):
        x = rng.normal(size=(2, 2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        fx = weighted(lambda t: T.conv2d(t, Tensor(k), stride, pad), x, rng)
        fk = weighted(lambda t: T.conv2d(Tensor(x), t, stride, pad), k, rng)
        worst = max(worst, finite_difference_check(fx, x), finite_difference_check(fk, k))
    assert worst <= TOL


@pytest.mark.parametrize("pool", ["global_avg_pool", "avg_pool2"])
def test_pool_gradients(pool):
    rng = np.random.default_rng(5)
    op = getattr(T, pool)
    worst = 0.0
    for _ in range(N_INSTANCES):
        x = rng.normal(size=(2, 3, 4, 6))
        worst = max(worst, finite_difference_check(weighted(op, x, rng), x))
    assert worst <= TOL


@pytest.mark.parametrize("shape", [(6, 3), (4, 2, 3, 3)])
@pytest.mark.parametrize("wrt", ["x", "gamma", "beta"])
def test_batch_norm_train_gradients(shape, wrt):
    rng = np.random.default_rng(len(shape) * 7 + len(wrt))
    c = shape[1]
    worst = 0.0
    for _ in range(N_INSTANCES):
        args = {"x": rng.normal(size=shape), "gamma": rng.uniform(0.5, 2, c), "beta": rng.normal(size=c)}

        def fn(t, wrt=wrt, args=args):
            kw = {k: (t if k == wrt else Tensor(v)) for k, v in args.items()}
            return T.batch_norm_train(kw["x"], kw["gamma"], kw["beta"], 1e-5)[0]

        worst = max(worst, finite_difference_check(weighted(fn, args[wrt], rng), args[wrt]))
    assert worst <= TOL


@pytest.mark.parametrize("wrt", ["x", "gamma", "beta"])
def test_batch_norm_eval_gradients(wrt):
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(N_INSTANCES):
        args = {"x": rng.normal(size=(5, 3, 2, 2)), "gamma": rng.uniform(0.5, 2, 3), "beta": rng.normal(size=3)}
        mean, sigma = rng.normal(size=3), rng.uniform(0.5, 2, 3)

        def fn(t, wrt=wrt, args=args, mean=mean, sigma=sigma):
            kw = {k: (t if k == wrt else Tensor(v)) for k, v in args.items()}
            return T.batch_norm_eval(kw["x"], kw["gamma"], kw["beta"], mean, sigma)

        worst = max(worst, finite_difference_check(weighted(fn, args[wrt], rng), args[wrt]))
    assert worst <= TOL


def test_batch_norm_constant_features_give_beta():
    x = Tensor(np.full((4, 3), 2.0))
    beta = np.array([0.1, -0.2, 0.3])
    out, mu, sigma = T.batch_norm_train(x, Tensor(np.ones(3)), Tensor(beta), 1e-5)
    np.testing.assert_allclose(sigma, np.sqrt(1e-5))
    np.testing.assert_allclose(out.data, np.tile(beta, (4, 1)))


def test_batch_norm_uses_biased_variance(rng):
    x = rng.normal(size=(7, 2))
    _, mu, sigma = T.batch_norm_train(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-5)
    np.testing.assert_allclose(mu, x.mean(0))
    np.testing.assert_allclose(sigma, np.sqrt(x.var(0, ddof=0) + 1e-5))
