import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hybridreg import numeric as nx
from hybridreg.errors import NonScalarOutput, ShapeMismatch


def P(rng, *shape, scale=1.0):
    return nx.parameter(rng.normal(scale=scale, size=shape))


def assert_grad_ok(f, params, tol=1e-4):
    report = nx.gradcheck(f, params, tol=tol)
    assert report.passed, (report.names, report.max_rel_error)
    return report


def test_softmax_uniform_row():
    np.testing.assert_allclose(nx.softmax_rows(np.zeros((1, 4))).data, [[0.25] * 4], atol=0)


def test_silu_at_zero():
    assert nx.silu(np.zeros(3)).data.tolist() == [0.0, 0.0, 0.0]


def test_dwconv_impulse_echoes_kernel():
    kernel = np.array([[1.0], [2.0], [3.0], [4.0]])
    x = np.zeros((7, 1))
    x[1] = 1.0
    y = nx.dwconv1d(x, kernel).data[:, 0]
    np.testing.assert_array_equal(y, [0, 1, 2, 3, 4, 0, 0])


def test_dwconv_matches_direct_convolution(rng):
    x, k = rng.normal(size=(12, 3)), rng.normal(size=(4, 3))
    y = nx.dwconv1d(x, k).data
    for c in range(3):
        np.testing.assert_allclose(y[:, c], np.convolve(x[:, c], k[:, c])[:12], atol=1e-14)


def test_grad_of_sum_of_squares(rng):
    x = P(rng, 5)
    (g,) = nx.grad((x * x).sum(), [x])
    np.testing.assert_allclose(g, 2 * x.data, atol=1e-15)


def test_softmax_cross_entropy_gradient(rng):
    z = P(rng, 3)
    (g,) = nx.grad(nx.softmax_cross_entropy(z, 1), [z])
    p = np.exp(z.data - z.data.max())
    p /= p.sum()
    np.testing.assert_allclose(g, p - np.eye(3)[1], atol=1e-15)


def test_grad_requires_scalar(rng):
    x = P(rng, 3)
    with pytest.raises(NonScalarOutput):
        nx.grad(x * 2.0, [x])


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeMismatch):
        nx.dwconv1d(np.ones((4, 2)), np.ones((3, 3)))


def test_linear_function_has_exact_gradcheck(rng):
    x, w = P(rng, 6), rng.normal(size=6)
    assert nx.gradcheck(lambda: (x * w).sum(), [x]).worst < 1e-9


def test_silu_chain_depth_three(rng):
    x = P(rng, 4, 3)
    assert_grad_ok(lambda: nx.silu(nx.silu(nx.silu(x))).sum(), [x])


def test_wrong_gradient_rule_is_caught(rng):
    x = P(rng, 5)

    def bad_square(a):
        return nx.make_op(a.data**2, (a,), lambda g: (g * a.data,), "bad_square")  # missing factor 2

    report = nx.gradcheck(lambda: bad_square(x).sum(), [x])
    assert not report.passed


UNARY = {
    "exp": lambda a: nx.exp(a * 0.3),
    "log": lambda a: nx.log(a * a + 1.0),
    "sqrt": lambda a: nx.sqrt(a * a + 0.5),
    "sigmoid": nx.sigmoid,
    "softplus": nx.softplus,
    "silu": nx.silu,
    "softmax": nx.softmax_rows,
    "logsumexp": nx.logsumexp_rows,
    "layernorm": nx.layernorm_rows,
    "norm": lambda a: nx.norm_rows(a),
    "abs": lambda a: nx.absolute(a),
    "log1p_sum_exp": nx.log1p_sum_exp_rows,
    "transpose": lambda a: a.T @ a,
    "div": lambda a: a / (a * a + 2.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_each_op_gradcheck(name, rng):
    x = P(rng, 4, 5)
    probe = rng.normal(size=UNARY[name](x).shape)
    assert_grad_ok(lambda: (UNARY[name](x) * probe).sum(), [x])


def test_segment_ops_gradcheck(rng):
    x = P(rng, 7, 3)
    seg = np.array([0, 2, 1, 0, 2, 2, 1])
    probe = rng.normal(size=(3, 3))
    for op in (nx.segment_sum, nx.segment_max, nx.segment_softmax):
        out_probe = probe if op is not nx.segment_softmax else rng.normal(size=(7, 3))
        assert_grad_ok(lambda: (op(x, seg, 3) * out_probe).sum(), [x])


def test_gather_concat_getitem_gradcheck(rng):
    a, b = P(rng, 5, 3), P(rng, 2, 3)
    idx = np.array([4, 0, 0, 2])
    assert_grad_ok(lambda: nx.square(nx.concat([nx.gather_rows(a, idx), b], axis=0)[1:, 1:]).sum(), [a, b])


def test_dwconv_and_selective_scan_gradcheck(rng):
    x, k = P(rng, 9, 3), P(rng, 4, 3)
    assert_grad_ok(lambda: nx.square(nx.dwconv1d(x, k)).sum(), [x, k])
    M, E, N = 6, 3, 4
    u, d = P(rng, M, E), nx.parameter(rng.uniform(0.05, 0.5, size=(M, E)))
    A = nx.parameter(-rng.uniform(0.5, 2.0, size=(E, N)))
    B, C, D = P(rng, M, N), P(rng, M, N), P(rng, E)
    assert_grad_ok(lambda: nx.square(nx.selective_scan(u, d, A, B, C, D)).sum(), [u, d, A, B, C, D])


def test_sym_top_eigvec_gradcheck(rng):
    K = P(rng, 4, 4)
    K.data += np.diag([3.0, 0.0, -1.0, -2.0])  # keeps the top eigenvalue well separated
    probe = rng.normal(size=4)
    assert_grad_ok(lambda: (nx.sym_top_eigvec(K) * probe).sum(), [K])


def test_depth_five_composition(rng):
    x, W = P(rng, 5, 4), P(rng, 4, 4, scale=0.5)
    g, b = P(rng, 4), P(rng, 4)

    def f():
        h = nx.layernorm_rows(x @ W, g, b)
        h = nx.silu(h)
        h = nx.softmax_rows(h @ W)
        h = nx.log(h)
        return h.sum()

    assert_grad_ok(f, [x, W, g, b])


@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_softmax_shift_invariance(seed, c):
    x = np.random.default_rng(seed).normal(size=(3, 6))
    a = nx.softmax_rows(x).data
    b = nx.softmax_rows(x + c).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


@given(st.integers(0, 10_000))
def test_layernorm_rows_standardized(seed):
    x = np.random.default_rng(seed).normal(scale=3.0, size=(4, 16))
    y = nx.layernorm_rows(x).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-5 * 10)


def test_log1p_sum_exp_extremes():
    out = nx.log1p_sum_exp_rows(np.array([[-20.0], [800.0]])).data
    assert out[0] == np.log1p(np.exp(-20.0))
    assert out[1] == pytest.approx(800.0)
    assert nx.log1p_sum_exp_rows(np.zeros((2, 0))).data.tolist() == [0.0, 0.0]


def test_clamp_min_blocks_gradient():
    x = nx.parameter([-3.0, 2.0])
    (g,) = nx.grad(nx.clamp_min(x, 0.0).sum(), [x])
    assert g.tolist() == [0.0, 1.0]


def test_no_grad_builds_no_graph(rng):
    x = P(rng, 3)
    with nx.no_grad():
        y = nx.exp(x)
    assert not y.requires_grad


def test_cost_tracer_counts_matmul_and_empty_trace(rng):
    a, b = nx.Tensor(np.ones((2, 2))), nx.Tensor(np.ones((2, 2)))
    with nx.trace_costs() as tr:
        _ = a @ b
    assert sum(r.flops for r in tr.records) == 16
    with nx.trace_costs() as tr:
        pass
    assert tr.records == []
    with pytest.raises(RuntimeError):
        with nx.trace_costs():
            with nx.trace_costs():
                pass


def test_named_parameters_walks_nested_containers(rng):
    from dataclasses import dataclass

    @dataclass
    class Inner:
        w: nx.Tensor

    tree = {"a": [Inner(P(rng, 2)), P(rng, 1)], "b": Inner(P(rng, 3))}
    assert [n for n, _ in nx.named_parameters(tree)] == ["a.0.w", "a.1", "b.w"]
