import threading
import zlib

import numpy as np
import pytest

from idealdml import autodiff as ad
from idealdml.autodiff import Tape, Tensor
from idealdml.losses import triplet_loss

from oracles import check_op_instance, conv2d_direct


def grad_of(f, x):
    xt = Tensor(np.asarray(x, dtype=float), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    tape.backward(y)
    return xt.grad


# ---- forward ----------------------------------------------------------------


def test_matmul_identity():
    a = np.array([[1.5, -2.0], [0.25, 4.0]])
    assert np.array_equal(ad.matmul(np.eye(2), a).data, a)


def test_l2_normalize_345():
    out = ad.l2_normalize([[3.0, 4.0]]).data
    assert np.allclose(out, [[0.6, 0.8]], rtol=0, atol=1e-15)


def test_conv2d_matches_direct_oracle_fixed():
    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    w = np.array([[[[1.0, -1.0], [2.0, 0.5]]]])
    expected = conv2d_direct(x, w)
    # by hand: top-left window 0*1 + 1*-1 + 4*2 + 5*0.5 = 9.5, +2.5 per column, +10 per row
    assert np.array_equal(expected[0, 0], [[9.5, 12.0, 14.5], [19.5, 22.0, 24.5], [29.5, 32.0, 34.5]])
    assert np.allclose(ad.conv2d(x, w).data, expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (1, 1), (3, 2)])
def test_conv2d_matches_direct_oracle_random(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    got = ad.conv2d(x, w, b, stride=stride, padding=padding).data
    assert np.allclose(got, conv2d_direct(x, w, b, stride, padding), rtol=0, atol=1e-10)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(np.zeros((2, 3)), np.zeros((4, 2)))
    with pytest.raises(ad.ShapeError, match="channels"):
        ad.conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 2, 2)))


def test_l2_normalize_zero_row_is_error():
    with pytest.raises(ad.DegenerateEmbeddingError):
        ad.l2_normalize([[1.0, 0.0], [0.0, 0.0]])


def test_l2_rows_unit_norm():
    x = np.random.default_rng(0).normal(size=(50, 7)) * 1e3
    norms = np.linalg.norm(ad.l2_normalize(x).data, axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-9


def test_concat_then_slice_is_identity():
    rng = np.random.default_rng(1)
    parts = [rng.normal(size=(3, k)) for k in (2, 5, 1)]
    cat = ad.concat(parts, axis=1)
    start = 0
    for p in parts:
        assert np.array_equal(ad.slice_(cat, 1, start, start + p.shape[1]).data, p)
        start += p.shape[1]


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(5, 3, 3, 3))
    a = ad.l2_normalize(ad.global_avg_pool(ad.relu(ad.conv2d(x, w, stride=2, padding=1)))).data
    b = ad.l2_normalize(ad.global_avg_pool(ad.relu(ad.conv2d(x, w, stride=2, padding=1)))).data
    assert a.tobytes() == b.tobytes()


def test_forward_op_dispatch():
    assert np.array_equal(ad.forward_op("add", [np.ones(2), np.ones(2)]).data, [2.0, 2.0])
    with pytest.raises(ValueError):
        ad.forward_op("nope", [])


# ---- backward ---------------------------------------------------------------


def test_square_gradient():
    assert grad_of(lambda x: ad.mul(x, x), 3.0) == pytest.approx(6.0)


def test_reduce_sum_gradient():
    assert np.array_equal(grad_of(ad.reduce_sum, np.arange(4.0)), np.ones(4))


def test_l2_normalize_dot_matches_finite_difference():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 6))
    v = rng.normal(size=(6, 1))
    f = lambda t: ad.reduce_sum(ad.matmul(ad.l2_normalize(t), v))
    report = ad.gradient_check(f, x, h=1e-5, tol=1e-6)
    assert report.ok, report.max_rel_error


def test_backward_rejects_foreign_tensor():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y1 = ad.reduce_sum(ad.square(x))
    with Tape() as t2:
        ad.reduce_sum(x)
    with pytest.raises(ad.TapeError):
        t2.backward(y1)


def test_tape_discarded_after_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.reduce_sum(ad.exp(x))
    assert len(tape) == 2
    tape.backward(y)
    assert len(tape) == 0
    with pytest.raises(ad.TapeError):
        tape.backward(y)


def test_no_recording_outside_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ad.reduce_sum(ad.square(x))
    assert not y.requires_grad and y.is_leaf


def test_relu_subgradient_at_zero_is_zero():
    g = grad_of(lambda x: ad.reduce_sum(ad.relu(x)), np.array([-1.0, 0.0, 2.0]))
    assert np.array_equal(g, [0.0, 0.0, 1.0])


def test_gradient_reused_tensor_accumulates():
    # y = x*x + x -> dy/dx = 2x + 1
    g = grad_of(lambda x: ad.reduce_sum(ad.add(ad.mul(x, x), x)), np.array([1.0, -2.0]))
    assert np.allclose(g, [3.0, -3.0])


def test_threads_record_independent_tapes():
    results = {}

    def work(k):
        x = Tensor(np.full(4, float(k)), requires_grad=True)
        with Tape() as tape:
            y = ad.reduce_sum(ad.square(x))
        tape.backward(y)
        results[k] = x.grad

    threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k, g in results.items():
        assert np.array_equal(g, np.full(4, 2.0 * k))


# ---- gradient_check ---------------------------------------------------------


def test_gradient_check_sum_of_squares():
    x = np.random.default_rng(4).normal(size=(5, 3))
    assert ad.gradient_check(lambda t: ad.reduce_sum(ad.square(t)), x, h=1e-5, tol=1e-4).failures.size == 0


def test_gradient_check_triplet_loss_four_points():
    rng = np.random.default_rng(5)
    labels = np.array([0, 0, 1, 1])
    x = rng.normal(size=(4, 3))
    f = lambda t: triplet_loss(ad.l2_normalize(t), labels, margin=0.5)
    report = ad.gradient_check(f, x, h=1e-5, tol=1e-4)
    assert report.ok, report.max_rel_error


def test_gradient_check_flags_wrong_gradient():
    def bad_square(x):
        x = ad.as_tensor(x)
        return ad.apply_op("bad_square", (x,), x.data**2, lambda g: (g * 3.0 * x.data,))

    x = np.random.default_rng(6).normal(size=4)
    report = ad.gradient_check(lambda t: ad.reduce_sum(bad_square(t)), x)
    assert report.failures.size >= 1


@pytest.mark.parametrize("kind", sorted(ad.OP_KINDS))
def test_every_op_gradient(kind):
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    for _ in range(10):
        assert check_op_instance(kind, rng) < 1e-4
