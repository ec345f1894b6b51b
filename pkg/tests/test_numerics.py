import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tosa import numerics as nx
from tosa.numerics.tensor import emit
from tosa.numerics import (
    ConfigError, GradCheckUsageError, GradTape, InputError, NumericsError, ShapeError, TapeError, Tensor,
    check_gradients,
)


def conv1d_oracle(x, w, b):
    """Triple loop over output channel, position and input channel."""
    c_out, c_in, k = w.shape
    length = x.shape[-1]
    pad = k // 2
    out = np.zeros((c_out, length))
    for o in range(c_out):
        for t in range(length):
            acc = b[o]
            for c in range(c_in):
                for j in range(k):
                    s = t + j - pad
                    if 0 <= s < length:
                        acc += w[o, c, j] * x[c, s]
            out[o, t] = acc
    return out


# --------------------------------------------------------------------- tape


def test_backward_accumulates_leaf_gradients():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with GradTape() as tape:
        y = nx.sum(nx.mul(x, x))
    tape.backward(y)
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_second_backward_on_same_tape_raises():
    x = Tensor([1.0], requires_grad=True)
    with GradTape() as tape:
        y = nx.sum(x * x)
    tape.backward(y)
    with pytest.raises(TapeError):
        tape.backward(y)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        y = x * x
    with pytest.raises(TapeError):
        tape.backward(y)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        with nx.no_grad():
            nx.sum(x * x)
    assert tape.nodes == []


def test_tapes_are_thread_local():
    seen = {}

    def worker():
        seen["tape"] = nx.active_tape()

    with GradTape():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen["tape"] is None


def test_nonfinite_results_raise():
    with pytest.raises(NumericsError):
        Tensor([np.nan])
    with pytest.raises(NumericsError):
        nx.exp(Tensor([1000.0]))


def test_shared_input_gradients_add_up():
    x = Tensor([3.0], requires_grad=True)
    with GradTape() as tape:
        y = nx.sum(nx.add(nx.mul(x, x), x))
    tape.backward(y)
    assert x.grad[0] == pytest.approx(7.0)


# ------------------------------------------------------------------ oracles


@pytest.mark.parametrize("c_in,c_out,k,length", [(1, 1, 1, 5), (2, 3, 3, 7), (4, 2, 5, 9), (3, 3, 3, 2)])
def test_conv1d_matches_triple_loop(rng, c_in, c_out, k, length):
    x = rng.standard_normal((c_in, length))
    w = rng.standard_normal((c_out, c_in, k))
    b = rng.standard_normal(c_out)
    got = nx.conv1d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_array_equal(got, conv1d_oracle(x, w, b))


def test_conv1d_batched_rows_match_oracle(rng):
    x = rng.standard_normal((2, 3, 4, 11))
    w = rng.standard_normal((5, 4, 3))
    b = rng.standard_normal(5)
    got = nx.conv1d(Tensor(x), Tensor(w), Tensor(b)).data
    for i in range(2):
        for j in range(3):
            np.testing.assert_allclose(got[i, j], conv1d_oracle(x[i, j], w, b), rtol=0, atol=1e-9)


def test_conv1d_rejects_even_width(rng):
    with pytest.raises(ConfigError):
        nx.conv1d(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 1, 2))), Tensor(np.zeros(1)))


def test_kl_divergence_matches_hand_sum(rng):
    p = rng.dirichlet(np.ones(6), size=4)
    q = rng.dirichlet(np.ones(6), size=4)
    expected = np.mean([sum(p[r, i] * np.log(p[r, i] / q[r, i]) for i in range(6)) for r in range(4)])
    got = nx.kl_divergence(Tensor(np.log(q)), p, axis=-1).item()
    assert got == pytest.approx(expected, rel=1e-12)


def test_kl_divergence_zero_mass_terms():
    p = np.array([[0.0, 1.0]])
    got = nx.kl_divergence(Tensor(np.log([[0.5, 0.5]])), p).item()
    assert got == pytest.approx(np.log(2.0))


def test_kl_divergence_rejects_bad_targets():
    logq = Tensor(np.log(np.full((1, 3), 1 / 3)))
    with pytest.raises(InputError):
        nx.kl_divergence(logq, np.array([[0.5, 0.6, -0.1]]))
    with pytest.raises(InputError):
        nx.kl_divergence(logq, np.array([[0.5, 0.6, 0.1]]))


def test_softmax_rows_sum_to_one(rng):
    s = nx.softmax(Tensor(rng.standard_normal((3, 4, 9)) * 30)).data
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-12)


def test_log_softmax_consistent_with_softmax(rng):
    x = Tensor(rng.standard_normal((4, 7)))
    np.testing.assert_allclose(np.exp(nx.log_softmax(x).data), nx.softmax(x).data, atol=1e-14)


def test_layer_norm_statistics(rng):
    x = Tensor(rng.standard_normal((5, 8)) * 3 + 2)
    y = nx.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), 1.0, atol=1e-4)
    with pytest.raises(ConfigError):
        nx.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=0.0)


def test_gather_then_scatter_restores_order(rng):
    x = rng.standard_normal((2, 6, 3))
    att = np.array([[[0], [2], [5]], [[1], [3], [4]]])
    skip = np.array([[[1], [3], [4]], [[0], [2], [5]]])
    a = nx.gather(Tensor(x), att, axis=-2)
    s = nx.gather(Tensor(x), skip, axis=-2)
    np.testing.assert_array_equal(nx.scatter_rows(a, s, att, skip, axis=-2).data, x)


def test_gather_out_of_range():
    with pytest.raises(IndexError):
        nx.gather(Tensor(np.ones((3, 2))), np.array([[3]]), axis=0)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_cross_entropy_matches_manual(rng):
    logits = rng.standard_normal((4, 3))
    labels = np.array([0, 2, 1, 2])
    lse = np.log(np.exp(logits).sum(1))
    expected = np.mean(lse - logits[np.arange(4), labels])
    assert nx.cross_entropy(Tensor(logits), labels).item() == pytest.approx(expected, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_softmax_invariant_to_row_shift(rows, cols, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((rows, cols))
    shift = r.standard_normal((rows, 1)) * 10
    np.testing.assert_allclose(nx.softmax(Tensor(x + shift)).data, nx.softmax(Tensor(x)).data, atol=1e-12)


# -------------------------------------------------------------- grad checks

SEEDS = range(20)


def _op_cases(r):
    a = Tensor(r.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(r.standard_normal((4, 2)), requires_grad=True)
    c = Tensor(r.standard_normal((4,)), requires_grad=True)
    w = Tensor(r.standard_normal((2, 3, 3)), requires_grad=True)
    cb = Tensor(r.standard_normal(2), requires_grad=True)
    g = Tensor(1 + 0.1 * r.standard_normal(4), requires_grad=True)
    p = r.dirichlet(np.ones(4), size=3)
    idx = r.permutation(3)[:2][:, None]
    return {
        "matmul": (lambda: nx.sum(nx.matmul(a, b) * nx.matmul(a, b)), [a, b]),
        "broadcast_add_mul": (lambda: nx.sum(nx.mul(nx.add(a, c), a)), [a, c]),
        "gelu": (lambda: nx.sum(nx.gelu(a)), [a]),
        "softmax": (lambda: nx.sum(nx.mul(nx.softmax(a), Tensor(p))), [a]),
        "layer_norm": (lambda: nx.sum(nx.mul(nx.layer_norm(a, g, c), Tensor(p))), [a, g, c]),
        "conv1d": (lambda: nx.sum(nx.mul(nx.conv1d(a, w, cb), nx.conv1d(a, w, cb))), [a, w, cb]),
        "kl": (lambda: nx.kl_divergence(nx.log_softmax(a), p), [a]),
        "gather": (lambda: nx.sum(nx.mul(nx.gather(a, idx, axis=0), nx.gather(a, idx, axis=0))), [a]),
    }


@pytest.mark.parametrize("op", ["matmul", "broadcast_add_mul", "gelu", "softmax", "layer_norm", "conv1d", "kl",
                                "gather"])
def test_op_gradients(op):
    worst = 0.0
    for seed in SEEDS:
        f, inputs = _op_cases(np.random.default_rng(seed))[op]
        report = check_gradients(f, inputs)
        worst = max(worst, report.max_rel_error)
    assert worst < 1e-5


def test_gradcheck_rejects_nonscalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GradCheckUsageError):
        check_gradients(lambda: x * x, x)


def test_gradcheck_flags_wrong_gradient():
    x = Tensor(np.array([0.3, -0.7]), requires_grad=True)

    def bad():
        return emit("bad", np.asarray((x.data ** 2).sum()), [x], lambda g: (g * x.data,))  # missing factor 2

    assert not check_gradients(bad, x).passed
