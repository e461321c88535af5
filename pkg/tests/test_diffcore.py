"""Tape, primitives, backward pass, and finite-difference agreement."""

import numpy as np
import pytest

from avfp import diffcore as dc
from avfp.diffcore import (
    NonFiniteError,
    Tape,
    TapeError,
    Tensor,
    apply_primitive,
    backward,
    grad_check,
    no_tape,
    replay,
)


def test_tensor_is_float64_contiguous():
    t = Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float64
    assert t.data.flags["C_CONTIGUOUS"]
    assert t.shape == (2, 2)


def test_tensor_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.inf])
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_forward_values_pinned():
    # fixed reference points for the nonlinearities
    assert dc.sigmoid(Tensor(0.0)).item() == 0.5
    sp = dc.softplus(Tensor(-30.0)).item()
    assert 0.0 < sp <= 1e-12
    assert dc.softplus(Tensor(0.0)).item() == pytest.approx(np.log(2.0), abs=1e-15)
    assert dc.tanh(Tensor(0.0)).item() == 0.0


def test_softplus_no_overflow():
    big = dc.softplus(Tensor([800.0, -800.0]))
    assert big.data[0] == 800.0
    assert big.data[1] == 0.0


def test_add_shape_mismatch_raises():
    with pytest.raises(ValueError):
        apply_primitive("add", Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_log_domain_error():
    with pytest.raises(ValueError):
        dc.log(Tensor([1.0, 0.0]))


def test_overflow_is_loud():
    with np.errstate(over="ignore"):
        with pytest.raises(NonFiniteError):
            dc.exp(Tensor(1000.0))


def test_scalar_broadcast_sugar():
    t = Tensor([1.0, 2.0, 3.0])
    assert np.allclose((t * 2.0).data, [2.0, 4.0, 6.0])
    assert np.allclose((1.0 - t).data, [0.0, -1.0, -2.0])
    assert np.allclose((-t).data, [-1.0, -2.0, -3.0])


def test_matmul_shapes():
    a = Tensor(np.arange(6.0).reshape(2, 3))
    v = Tensor([1.0, 1.0, 1.0])
    assert (a @ v).shape == (2,)
    b = Tensor(np.ones((3, 4)))
    assert (a @ b).shape == (2, 4)
    assert (v @ v).shape == ()
    with pytest.raises(ValueError):
        _ = a @ Tensor(np.ones((2, 2)))


def test_concat_slice_roundtrip():
    x = Tensor([1.0, 2.0])
    y = Tensor([3.0, 4.0, 5.0])
    c = dc.concat([x, y])
    assert np.allclose(c.data, [1, 2, 3, 4, 5])
    assert np.allclose(c.slice(2, 5).data, y.data)
    with pytest.raises(ValueError):
        c.slice(3, 6)


def test_no_tape_means_no_recording():
    x = Tensor([1.0, 2.0])
    y = dc.tanh(x)
    assert y.tape is None and y.node_id is None


def test_tape_records_and_leaf_memoizes():
    p = Tensor([1.0, 2.0])
    with Tape() as tape:
        y = (p * p).sum()
        z = (p + p).sum()
        _ = y + z
    leaf_nodes = [i for i, op in enumerate(tape.ops) if op == "leaf"]
    assert len(leaf_nodes) == 1  # p enrolled once
    replay(tape)


def test_no_tape_context_suspends_recording():
    p = Tensor([1.0])
    with Tape() as tape:
        a = p * 2.0
        with no_tape():
            b = p * 3.0
        assert b.tape is None
    assert a.tape is tape


def test_backward_simple_chain():
    p = Tensor([1.0, -2.0, 3.0])
    with Tape() as tape:
        loss = (p * p).sum()
    g = backward(tape, loss)
    assert np.allclose(g[p.uid], 2.0 * p.data)


def test_backward_requires_scalar_and_taped_loss():
    p = Tensor([1.0])
    with Tape() as tape:
        vec = p * 2.0
        scalar = vec.sum()
    with pytest.raises(ValueError):
        backward(tape, vec)
    with Tape() as other:
        (p * 1.0).sum()
    with pytest.raises(TapeError):
        backward(other, scalar)
    off_tape = dc.tanh(Tensor(1.0))
    with pytest.raises(TapeError):
        backward(tape, off_tape)


def test_const_leaves_excluded_from_gradients():
    p = Tensor([2.0])
    c = dc.constant([3.0])
    with Tape() as tape:
        loss = (p * c).sum()
    g = backward(tape, loss)
    assert p.uid in g and c.uid not in g


def test_fanout_accumulates():
    p = Tensor(2.0)
    with Tape() as tape:
        loss = p * p + p * 3.0  # d/dp = 2p + 3 = 7
    g = backward(tape, loss)
    assert g[p.uid] == pytest.approx(7.0)


def test_clip_gradient_mask():
    p = Tensor([-20.0, 0.0, 20.0])
    with Tape() as tape:
        loss = p.clip(-10.0, 10.0).sum()
    g = backward(tape, loss)
    assert np.allclose(g[p.uid], [0.0, 1.0, 0.0])
    assert np.allclose(p.clip(-10, 10).data, [-10.0, 0.0, 10.0])


def test_gradients_match_finite_differences_per_primitive():
    rng = np.random.default_rng(7)

    cases = {
        "add": lambda ps: (ps[0] + ps[1]).sum(),
        "sub": lambda ps: (ps[0] - ps[1]).sum(),
        "mul": lambda ps: (ps[0] * ps[1]).sum(),
        "tanh": lambda ps: dc.tanh(ps[0]).sum(),
        "sigmoid": lambda ps: dc.sigmoid(ps[0]).sum(),
        "exp": lambda ps: dc.exp(ps[0] * 0.3).sum(),
        "softplus": lambda ps: dc.softplus(ps[0]).sum(),
        "mean": lambda ps: (ps[0] * ps[1]).mean(),
        "slice": lambda ps: ps[0].slice(1, 4).sum(),
        "clip": lambda ps: ps[0].clip(-0.5, 0.5).sum(),
        "concat": lambda ps: (dc.concat([ps[0], ps[1]]) * dc.concat([ps[1], ps[0]])).sum(),
    }
    for name, f in cases.items():
        params = [Tensor(rng.normal(size=5)), Tensor(rng.normal(size=5))]
        err = grad_check(f, params)
        assert err < 1e-6, f"{name}: {err}"


def test_gradcheck_log():
    params = [Tensor([0.5, 1.5, 2.5])]
    err = grad_check(lambda ps: dc.log(ps[0]).sum(), params)
    assert err < 1e-6


def test_gradcheck_matmul_paths():
    rng = np.random.default_rng(11)
    W = Tensor(rng.normal(size=(3, 4)))
    v = Tensor(rng.normal(size=4))
    M = Tensor(rng.normal(size=(4, 2)))

    err = grad_check(lambda ps: dc.tanh(ps[0] @ ps[1]).sum(), [W, v])
    assert err < 1e-6
    err = grad_check(lambda ps: (ps[0] @ ps[1]).sum(), [W, M])
    assert err < 1e-6
    err = grad_check(lambda ps: ps[0] @ ps[0], [v])
    assert err < 1e-6


def test_gradcheck_broadcast_rows():
    rng = np.random.default_rng(13)
    b = Tensor(rng.normal(size=4))
    X = Tensor(rng.normal(size=(5, 4)))

    def f(ps):
        rows = dc.broadcast_to(ps[0], (5, 4))
        return (dc.sigmoid(ps[1] + rows)).sum()

    assert grad_check(f, [b, X]) < 1e-6


def test_gradcheck_composite_mlp():
    rng = np.random.default_rng(3)
    params = [
        Tensor(rng.normal(size=(4, 3)) * 0.5),
        Tensor(rng.normal(size=4) * 0.1),
        Tensor(rng.normal(size=(1, 4)) * 0.5),
        Tensor(rng.normal(size=3)),
    ]

    def f(ps):
        W1, b1, W2, x = ps
        h = dc.tanh(W1 @ x + b1)
        return dc.softplus(W2 @ h).sum()

    assert grad_check(f, params) < 1e-6


def test_deep_chain_stability():
    # 100 sequential nonlinearities: reverse pass stays exact
    p = Tensor([0.3, -0.2])

    def f(ps):
        h = ps[0]
        for _ in range(100):
            h = dc.tanh(h)
        return h.sum()

    assert grad_check(f, [p]) < 1e-6


def test_unused_leaf_gets_no_gradient():
    p = Tensor([1.0])
    q = Tensor([2.0])
    with Tape() as tape:
        _ = (q * 1.0).sum()
        loss = (p * p).sum()
    g = backward(tape, loss)
    assert q.uid not in g


def test_replay_is_bit_exact():
    rng = np.random.default_rng(5)
    W = Tensor(rng.normal(size=(6, 6)))
    x = Tensor(rng.normal(size=6))
    with Tape() as tape:
        h = dc.tanh(W @ x)
        for _ in range(5):
            h = dc.sigmoid(W @ h)
        (h * h).mean()
    replay(tape)


def test_primitive_set_is_pinned():
    assert set(dc.PRIMITIVES) >= {
        "add", "sub", "mul", "matmul", "tanh", "sigmoid", "exp", "log",
        "softplus", "sum", "mean", "concat", "slice", "broadcast",
    }
    with pytest.raises(ValueError):
        apply_primitive("pow", Tensor(1.0))
