"""Engine, RNG and Gaussian-kernel tests against independent oracles."""

import numpy as np
import pytest

from uggfuse.errors import ContractViolationError, DomainError
from uggfuse.numerics import (
    RngStream,
    Tensor,
    gaussian_kl,
    gaussian_kl_t,
    grad_check,
    no_grad,
    parameter,
    reparameterize,
    seeded_rng,
)
from uggfuse.numerics import engine


def fd_grad(scalar_fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar_fn() w.r.t. the array x in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        fp = scalar_fn()
        flat[i] = saved - h
        fm = scalar_fn()
        flat[i] = saved
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_against_fd(build_loss, arrays, tol=1e-7, seed=0):
    """build_loss(params...) -> scalar Tensor; compares engine grad to FD."""
    params = [parameter(a.copy()) for a in arrays]
    loss = build_loss(*params)
    loss.backward()
    for p in params:
        def forward():
            with no_grad():
                return float(build_loss(*params).data)
        numeric = fd_grad(forward, p.data)
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        np.testing.assert_allclose(analytic, numeric, rtol=tol, atol=tol)


def _weighted_sum(t, rng):
    w = Tensor(rng.standard_normal(t.shape))
    return (t * w).sum()


def test_elementwise_ops_match_finite_differences():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 4)) + 2.5  # keep positive for log/sqrt
    b = rng.standard_normal((3, 4)) + 2.5
    cases = [
        lambda x, y: _weighted_sum(x + y, np.random.default_rng(1)),
        lambda x, y: _weighted_sum(x - y, np.random.default_rng(2)),
        lambda x, y: _weighted_sum(x * y, np.random.default_rng(3)),
        lambda x, y: _weighted_sum(x / y, np.random.default_rng(4)),
        lambda x, y: _weighted_sum(x ** 3.0, np.random.default_rng(5)),
        lambda x, y: _weighted_sum(x.exp(), np.random.default_rng(6)),
        lambda x, y: _weighted_sum(x.log(), np.random.default_rng(7)),
        lambda x, y: _weighted_sum(x.sqrt(), np.random.default_rng(8)),
        lambda x, y: _weighted_sum(x.sigmoid(), np.random.default_rng(9)),
        lambda x, y: _weighted_sum(x.softplus(), np.random.default_rng(10)),
        lambda x, y: _weighted_sum((x - 2.0).relu(), np.random.default_rng(11)),
        lambda x, y: _weighted_sum(x.clamp_min(2.0), np.random.default_rng(12)),
        lambda x, y: _weighted_sum((-x) + (3.0 * y) - (y / 2.0), np.random.default_rng(13)),
    ]
    for build in cases:
        check_against_fd(build, [a, b])


def test_broadcasting_gradients():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((4, 1, 5))
    b = rng.standard_normal((3, 1))
    check_against_fd(lambda x, y: _weighted_sum(x * y, np.random.default_rng(2)), [a, b])
    check_against_fd(lambda x, y: _weighted_sum(x + y, np.random.default_rng(3)), [a, b])


def test_matmul_including_batched():
    rng = np.random.default_rng(2)
    a2 = rng.standard_normal((3, 4))
    b2 = rng.standard_normal((4, 5))
    check_against_fd(lambda x, y: _weighted_sum(x @ y, np.random.default_rng(4)), [a2, b2])
    ab = rng.standard_normal((6, 3, 4))   # batch on the left only
    check_against_fd(lambda x, y: _weighted_sum(x @ y, np.random.default_rng(5)), [ab, b2])
    bb = rng.standard_normal((6, 4, 2))
    check_against_fd(lambda x, y: _weighted_sum(x @ y, np.random.default_rng(6)), [ab, bb])


def test_reductions_and_shape_ops():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((4, 5, 3))
    cases = [
        lambda x: x.sum(),
        lambda x: _weighted_sum(x.sum(axis=1), np.random.default_rng(7)),
        lambda x: _weighted_sum(x.sum(axis=2, keepdims=True), np.random.default_rng(8)),
        lambda x: _weighted_sum(x.mean(axis=0), np.random.default_rng(9)),
        lambda x: x.mean(),
        lambda x: _weighted_sum(x.reshape(20, 3), np.random.default_rng(10)),
        lambda x: _weighted_sum(x.transpose((2, 0, 1)), np.random.default_rng(11)),
        lambda x: _weighted_sum(x.swapaxes(0, 2), np.random.default_rng(12)),
        lambda x: _weighted_sum(x[1:3, ::2], np.random.default_rng(13)),
        lambda x: _weighted_sum(x.max(axis=1), np.random.default_rng(14)),
        lambda x: _weighted_sum(x.min(axis=2, keepdims=True), np.random.default_rng(15)),
        lambda x: x.max(),
        lambda x: x.min(),
    ]
    for build in cases:
        check_against_fd(build, [a])


def test_concat_stack_and_gather():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((2, 4))

    def build_concat(x, y):
        return _weighted_sum(engine.concat([x, y], axis=0), np.random.default_rng(16))

    check_against_fd(build_concat, [a, b])

    c = rng.standard_normal((5, 3, 2))
    idx = np.array([[1, 4, 1], [0, 2, 2]])[:, :, None]  # duplicate rows on purpose

    def build_gather(x):
        picked = engine.take_along_axis(x, np.broadcast_to(idx, (2, 3, 1)), axis=0)
        return _weighted_sum(picked, np.random.default_rng(17))

    check_against_fd(build_gather, [c])

    def build_stack(x, y):
        s = engine.stack([x, (x * 2.0) + y[:3]], axis=0)
        return _weighted_sum(s, np.random.default_rng(18))

    check_against_fd(build_stack, [a, rng.standard_normal((4, 4))])


def test_fancy_index_gradients_accumulate():
    p = parameter(np.array([1.0, 2.0, 3.0]))
    out = p[np.array([0, 0, 2])].sum()
    out.backward()
    np.testing.assert_array_equal(p.grad, [2.0, 0.0, 1.0])


def test_median_matches_fd_for_odd_and_even():
    rng = np.random.default_rng(5)
    odd = rng.standard_normal((4, 5))
    even = rng.standard_normal((4, 6))
    for arr in (odd, even):
        check_against_fd(
            lambda x: _weighted_sum(engine.median_lastaxis(x), np.random.default_rng(19)),
            [arr])
    np.testing.assert_allclose(
        engine.median_lastaxis(Tensor(even)).data, np.median(even, axis=-1))


def test_logsumexp_and_softmax_values_and_grads():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((3, 7)) * 30.0  # large magnitudes: stability matters
    lse = engine.logsumexp(Tensor(a), axis=1)
    expect = np.log(np.exp(a - a.max(1, keepdims=True)).sum(1)) + a.max(1)
    np.testing.assert_allclose(lse.data, expect, rtol=1e-12)

    sm = engine.softmax(Tensor(a), axis=1)
    np.testing.assert_allclose(sm.data.sum(axis=1), 1.0, rtol=1e-12)

    small = rng.standard_normal((3, 5))
    check_against_fd(
        lambda x: _weighted_sum(engine.logsumexp(x, axis=1), np.random.default_rng(20)),
        [small])
    check_against_fd(
        lambda x: _weighted_sum(engine.softmax(x, axis=1), np.random.default_rng(21)),
        [small])


def test_max_ties_route_gradient_to_first():
    p = parameter(np.array([[2.0, 5.0, 5.0]]))
    p.max(axis=1).sum().backward()
    np.testing.assert_array_equal(p.grad, [[0.0, 1.0, 0.0]])


def test_relu_subgradient_at_zero_is_zero():
    p = parameter(np.array([0.0, -1.0, 1.0]))
    p.relu().sum().backward()
    np.testing.assert_array_equal(p.grad, [0.0, 0.0, 1.0])


def test_no_grad_blocks_graph_construction():
    p = parameter(np.ones(3))
    with no_grad():
        out = (p * 2.0).sum()
    assert not out.requires_grad
    assert out._backward is None


def test_backward_requires_scalar():
    p = parameter(np.ones((2, 2)))
    with pytest.raises(ValueError):
        (p * 2.0).backward()


def test_grad_accumulates_across_backwards():
    p = parameter(np.array([3.0]))
    (p * 2.0).sum().backward()
    (p * 2.0).sum().backward()
    np.testing.assert_array_equal(p.grad, [4.0])
    p.zero_grad()
    assert p.grad is None


# -- RngStream --------------------------------------------------------------


def test_rng_identical_state_identical_bits():
    a = RngStream(123, 7).standard_normal((100,))
    b = RngStream(123, 7).standard_normal((100,))
    np.testing.assert_array_equal(a, b)


def test_rng_streams_and_seeds_decorrelate():
    base = RngStream(1, 0).standard_normal((64,))
    assert not np.allclose(base, RngStream(1, 1).standard_normal((64,)))
    assert not np.allclose(base, RngStream(2, 0).standard_normal((64,)))


def test_rng_counter_advances_once_per_call():
    s = RngStream(9, 4)
    s.standard_normal((3,))
    s.uniform(0.0, 1.0, (2, 2))
    assert s.counter == 2


def test_rng_state_roundtrip_resumes_exactly():
    s = RngStream.named(42, "data")
    s.standard_normal((10,))
    snap = s.state()
    expected = [s.standard_normal((4,)) for _ in range(3)]
    resumed = RngStream.from_state(snap)
    got = [resumed.standard_normal((4,)) for _ in range(3)]
    for e, g in zip(expected, got):
        np.testing.assert_array_equal(e, g)


def test_rng_named_streams_are_stable():
    assert RngStream.named(0, "data").stream_id == RngStream.named(0, "data").stream_id
    assert RngStream.named(0, "data").stream_id != RngStream.named(0, "init").stream_id


def test_rng_statistics_are_sane():
    x = RngStream(7, 0).standard_normal((200_000,))
    assert abs(x.mean()) < 0.01
    assert abs(x.std() - 1.0) < 0.01


def test_rng_rejects_bad_state():
    with pytest.raises(ContractViolationError):
        RngStream(-1)
    with pytest.raises(ContractViolationError):
        RngStream(0, counter=-3)


# -- Gaussian kernels --------------------------------------------------------


def test_reparameterize_zero_sigma_returns_mu():
    mu = np.arange(12.0).reshape(3, 4)
    out = reparameterize(mu, np.zeros_like(mu), seeded_rng(0, "reparam"))
    np.testing.assert_array_equal(out, mu)


def test_reparameterize_statistics():
    mu = np.full((200_000,), 2.0)
    sigma = np.full((200_000,), 0.5)
    out = reparameterize(mu, sigma, seeded_rng(3, "reparam"))
    assert abs(out.mean() - 2.0) < 0.01
    assert abs(out.std() - 0.5) < 0.01


def test_reparameterize_contracts():
    mu = np.zeros((2, 2))
    with pytest.raises(ContractViolationError):
        reparameterize(mu, np.zeros((2, 3)), seeded_rng(0, "r"))
    with pytest.raises(DomainError):
        reparameterize(mu, np.full((2, 2), -0.1), seeded_rng(0, "r"))


def test_gaussian_kl_standard_normal_is_zero():
    assert abs(gaussian_kl(np.zeros(16), np.ones(16))) <= 1e-12


def test_gaussian_kl_closed_forms():
    mu = np.full(8, 1.5)
    assert gaussian_kl(mu, np.ones(8)) == pytest.approx(0.5 * 1.5**2, rel=1e-12)
    sig = np.full(8, 2.0)
    expect = 0.5 * (4.0 - np.log(4.0) - 1.0)
    assert gaussian_kl(np.zeros(8), sig) == pytest.approx(expect, rel=1e-12)


def test_gaussian_kl_nonnegative_property():
    rng = np.random.default_rng(11)
    for _ in range(50):
        mu = rng.standard_normal(32) * 3.0
        sigma = np.exp(rng.standard_normal(32))
        assert gaussian_kl(mu, sigma) >= 0.0


def test_gaussian_kl_monte_carlo_oracle():
    # KL(q||p) = E_q[log q - log p], estimated by sampling from q
    rng = np.random.default_rng(13)
    mu = np.array([0.7, -1.2, 0.3])
    sigma = np.array([0.8, 1.5, 0.4])
    n = 400_000
    x = mu + sigma * rng.standard_normal((n, 3))
    log_q = -0.5 * ((x - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * np.log(2 * np.pi)
    log_p = -0.5 * x**2 - 0.5 * np.log(2 * np.pi)
    mc = (log_q - log_p).sum(axis=1).mean() / 3.0  # mean-reduced over dims
    assert gaussian_kl(mu, sigma) == pytest.approx(mc, abs=5e-3)


def test_gaussian_kl_domain_errors():
    with pytest.raises(DomainError):
        gaussian_kl(np.zeros(3), np.array([1.0, 0.0, 1.0]))
    with pytest.raises(DomainError):
        gaussian_kl(np.array([np.nan, 0.0]), np.ones(2))


def test_gaussian_kl_t_matches_and_differentiates():
    rng = np.random.default_rng(17)
    mu = rng.standard_normal((4, 6))
    sigma = np.exp(rng.standard_normal((4, 6)) * 0.3)
    t = gaussian_kl_t(Tensor(mu), Tensor(sigma))
    assert float(t.data) == pytest.approx(gaussian_kl(mu, sigma), rel=1e-12)
    check_against_fd(lambda m, s: gaussian_kl_t(m, s), [mu, sigma])


# -- grad_check harness -------------------------------------------------------


def test_grad_check_passes_on_correct_graph():
    p = parameter(np.random.default_rng(19).standard_normal((3, 3)), name="w")
    q = parameter(np.random.default_rng(23).standard_normal((3,)), name="b")

    def loss():
        return ((p @ p).sigmoid().sum() + (q * q).sum()) * 0.5

    reports = grad_check(loss, {"w": p, "b": q})
    assert all(r.passed for r in reports)
    assert all(r.max_relative_error <= 1e-4 for r in reports)


def test_grad_check_flags_wrong_backward():
    p = parameter(np.array([1.0, 2.0]), name="bad")

    def wrong_square(t):
        data = t.data**2

        def backward(g):
            engine._accum(t, g * 3.0 * t.data)  # deliberately not 2x

        return engine._result(data, (t,), backward)

    reports = grad_check(lambda: wrong_square(p).sum(), {"bad": p})
    assert not reports[0].passed


def test_grad_check_subsamples_large_parameters():
    p = parameter(np.random.default_rng(29).standard_normal((150, 100)), name="big")
    reports = grad_check(lambda: (p * p).sum(), {"big": p},
                         subsample_threshold=10_000, subsample_size=200)
    assert reports[0].n_checked == 200
    assert reports[0].passed
