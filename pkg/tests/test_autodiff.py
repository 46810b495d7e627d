import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dyndistill import autodiff as ad
from dyndistill.autodiff import SgdState, Tensor
from dyndistill.errors import ContractError, DimensionError

from oracles import central_difference, max_rel_error, mp_cross_entropy, mp_softmax


def test_matmul_identity_and_dot():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), a).data, a.data)
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_is_ones_times_bt():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    ad.backward(ad.tsum(ad.matmul(a, b)))
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=0, atol=1e-14)

    def f():
        return float((a.data @ b.data).sum())

    (num,) = central_difference(f, [a.data])
    assert max_rel_error(a.grad, num) < 1e-6


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    p = ad.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(p))
    assert p[0] == 1.0 and p[1] < 1e-300
    np.testing.assert_allclose(ad.softmax(Tensor([1.0, 2.0, 3.0])).data, mp_softmax([1, 2, 3]), rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)), st.randoms(use_true_random=False))
def test_softmax_sums_to_one_and_permutation_equivariant(x, rnd):
    p = ad.softmax(Tensor(x)).data
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0)
    perm = list(range(x.size))
    rnd.shuffle(perm)
    # summation order changes with the permutation, so only round-off may differ
    np.testing.assert_allclose(ad.softmax(Tensor(x[perm])).data, p[perm], rtol=0, atol=1e-15)


def test_cross_entropy_examples():
    p = Tensor([0.2, 0.5, 0.3])
    assert ad.cross_entropy(Tensor([0.0, 1.0, 0.0]), p).item() == pytest.approx(-np.log(0.5), abs=1e-15)
    assert ad.cross_entropy(Tensor([0.0, 1.0]), Tensor([0.0, 1.0])).item() == 0.0
    h = ad.cross_entropy(p, p).item()
    assert h > 0
    got = ad.cross_entropy(Tensor([0.5, 0.5]), Tensor([0.25, 0.75])).item()
    assert got == pytest.approx(mp_cross_entropy([0.5, 0.5], [0.25, 0.75]), abs=1e-14)


def test_cross_entropy_clamps_zero_probability():
    val = ad.cross_entropy(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item()
    assert val == pytest.approx(-np.log(1e-12))


def test_cross_entropy_length_mismatch():
    with pytest.raises(DimensionError):
        ad.cross_entropy(Tensor([0.5, 0.5]), Tensor([0.2, 0.3, 0.5]))


def _simplex(rng, n):
    v = rng.gamma(1.0, size=n)
    return v / v.sum()


def test_gibbs_inequality_random():
    rng = np.random.default_rng(1)
    for _ in range(500):
        n = rng.integers(2, 7)
        a, b = _simplex(rng, n), _simplex(rng, n)
        aa = ad.cross_entropy(Tensor(a), Tensor(a)).item()
        ab = ad.cross_entropy(Tensor(a), Tensor(b)).item()
        assert ab >= aa - 1e-10


def test_elementwise_examples():
    assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert ad.mean(Tensor([1.0, 2.0, 3.0, 4.0])).item() == 2.5
    assert ad.scale(Tensor([1.0, -2.0]), 3.0).data.tolist() == [3.0, -6.0]
    assert ad.add(Tensor([1.0]), Tensor([2.0])).data.tolist() == [3.0]


def test_backward_sum_gives_ones():
    w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.backward(ad.tsum(w))
    np.testing.assert_array_equal(w.grad, np.ones((2, 3)))


def test_detach_blocks_gradient():
    w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    d = ad.detach(w)
    np.testing.assert_array_equal(d.data, w.data)
    assert not d.requires_grad
    # loss = sum(w * 0 + detach(w)^2): gradient only via the live branch
    loss = ad.tsum(ad.add(ad.scale(w, 0.0), ad.mul(d, d)))
    ad.backward(loss)
    np.testing.assert_array_equal(w.grad, np.zeros(3))


def test_backward_requires_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(ad.scale(w, 2.0))


def test_shared_node_visited_once():
    x = Tensor([2.0], requires_grad=True)
    y = ad.mul(x, x)  # reused twice below
    ad.backward(ad.tsum(ad.add(y, y)))
    assert x.grad.tolist() == [8.0]


# ---------------------------------------------------------------------------
# finite-difference sweep over every primitive

def _pos(rng, shape):
    return rng.uniform(0.1, 1.0, size=shape)


PRIMITIVES = {
    "add_broadcast": (lambda a, b: ad.add(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "mul": (lambda a, b: ad.mul(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "scale": (lambda a: ad.scale(a, -1.7), lambda r: [r.normal(size=(5,))]),
    "neg": (lambda a: ad.neg(a), lambda r: [r.normal(size=(2, 3))]),
    "matmul": (lambda a, b: ad.matmul(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
    # keep relu inputs away from the kink
    "relu": (lambda a: ad.relu(a), lambda r: [r.choice([-1, 1], size=(3, 4)) * r.uniform(0.05, 1, size=(3, 4))]),
    "sum_axis": (lambda a: ad.tsum(a, axis=1), lambda r: [r.normal(size=(3, 4))]),
    "mean": (lambda a: ad.mean(a, axis=0), lambda r: [r.normal(size=(3, 4))]),
    "exp": (lambda a: ad.exp(a), lambda r: [r.normal(size=(4,))]),
    "log": (lambda a: ad.log(a), lambda r: [_pos(r, (4,))]),
    "softmax": (lambda a: ad.softmax(a), lambda r: [r.normal(size=(3, 5))]),
    "cross_entropy": (
        lambda a, b: ad.cross_entropy(ad.softmax(a), ad.softmax(b)),
        lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))],
    ),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    op, make = PRIMITIVES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        inputs = make(rng)
        # random projection makes the scalar loss depend on every output entry
        proj = rng.normal(size=op(*[Tensor(a) for a in inputs]).shape)
        ts = [Tensor(a, requires_grad=True) for a in inputs]
        ad.backward(ad.tsum(ad.mul(op(*ts), Tensor(proj))))

        def f():
            return float(np.sum(op(*[Tensor(a) for a in inputs]).data * proj))

        nums = central_difference(f, inputs, step=1e-5)
        for t, num in zip(ts, nums):
            worst = max(worst, max_rel_error(t.grad, num, floor=1e-6))
    assert worst < 1e-4, worst


# ---------------------------------------------------------------------------
# SGD


def test_sgd_vanilla_step():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([2.0])
    ad.sgd_step(SgdState([p], learning_rate=0.1, momentum=0.0, weight_decay=0.0))
    assert p.data.tolist() == [pytest.approx(0.8, abs=1e-15)]
    assert p.grad is None


def test_sgd_momentum_second_update_is_1_9_grad():
    p = Tensor([0.0], requires_grad=True)
    st_ = SgdState([p], learning_rate=0.1, momentum=0.9, weight_decay=0.0)
    p.grad = np.array([1.0])
    ad.sgd_step(st_)
    before = p.data.copy()
    p.grad = np.array([1.0])
    ad.sgd_step(st_)
    assert (before - p.data)[0] == pytest.approx(0.1 * 1.9, abs=1e-15)


def test_sgd_weight_decay_is_coupled():
    p = Tensor([2.0], requires_grad=True)
    p.grad = np.array([0.5])
    ad.sgd_step(SgdState([p], learning_rate=0.1, momentum=0.0, weight_decay=1e-4))
    # hand recurrence: 2 - 0.1 * (0.5 + 1e-4 * 2)
    assert p.data[0] == pytest.approx(2.0 - 0.1 * (0.5 + 2e-4), abs=1e-15)


def test_sgd_missing_grad_is_contract_error():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(ContractError):
        ad.sgd_step(SgdState([p]))


def test_sgd_velocity_zero_initialised():
    ps = [Tensor(np.ones((2, 3)), requires_grad=True), Tensor(np.ones(3), requires_grad=True)]
    s = SgdState(ps)
    assert [v.shape for v in s.velocity] == [(2, 3), (3,)]
    assert all(not v.any() for v in s.velocity)


def test_teacher_style_forward_records_no_graph():
    w = Tensor(np.ones((2, 2)))
    out = ad.relu(ad.matmul(Tensor(np.ones((1, 2))), w))
    assert not out.requires_grad and out._parents == ()


def test_all_finite_after_ops_on_finite_inputs():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(scale=300, size=(4, 6)), requires_grad=True)
    loss = ad.mean(ad.cross_entropy(ad.softmax(Tensor(rng.normal(size=(4, 6)))), ad.softmax(x)))
    ad.backward(loss)
    assert np.isfinite(loss.data).all() and np.isfinite(x.grad).all()
