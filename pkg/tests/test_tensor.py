import numpy as np
import pytest

from kdlab import tensor as tt
from kdlab.tensor import Tape, Tensor


def rand(shape, rng, scale=1.0, offset=0.0):
    return Tensor(rng.normal(size=shape) * scale + offset)


def test_softmax_symmetry():
    out = tt.softmax(Tensor([0.0, 0.0]))
    assert np.allclose(out.data, [0.5, 0.5])


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 2))
    out = tt.matmul(Tensor(np.eye(2)), Tensor(a))
    assert np.allclose(out.data, a)


def test_softmax_temperature_matches_sigmoid():
    # logits [2, 0] scaled by tau=2 upstream -> sigmoid(1)
    out = tt.softmax(Tensor(np.array([2.0, 0.0]) / 2.0))
    sig = 1.0 / (1.0 + np.exp(-1.0))
    assert np.allclose(out.data, [sig, 1.0 - sig], atol=1e-4)
    assert abs(out.data[0] - 0.7311) < 1e-4


def test_backward_square_sum():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        y = tt.reduce_sum(tt.mul(x, x))
    tape.backward(y)
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_log_softmax_pick():
    x = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    with Tape() as tape:
        y = tt.reduce_sum(tt.mul(tt.log_softmax(x), tt.constant([1.0, 0.0])))
    tape.backward(y)
    assert np.allclose(x.grad, [0.5, -0.5])


def test_backward_matmul_chain_depth3():
    rng = np.random.default_rng(3)
    consts = [tt.constant(rng.normal(size=(4, 4))) for _ in range(3)]

    def f(x):
        h = tt.reshape(x, (4, 4))
        for c in consts:
            h = tt.matmul(h, c)
        return tt.reduce_sum(h)

    err = tt.grad_check(f, Tensor(rng.normal(size=16)), h=1e-6)
    assert err < 1e-4


def test_grad_check_linear_is_zero():
    err = tt.grad_check(lambda x: tt.reduce_sum(x), Tensor(np.arange(5.0)))
    assert err == 0.0


def test_grad_check_negative_control():
    # deliberately wrong backward rule must be caught
    def broken_square(x):
        out = Tensor(x.data * x.data)

        def backward(g):
            return (g * 3.0 * x.data,)  # true derivative is 2x

        return tt._record(out, (x,), backward)

    err = tt.grad_check(lambda x: tt.reduce_sum(broken_square(x)),
                        Tensor(np.full(4, 2.0)))
    assert err > 1e-2


PRIMITIVE_CASES = [
    ("matmul", lambda x, rng: tt.reduce_sum(tt.matmul(tt.reshape(x, (3, 4)), tt.constant(rng.normal(size=(4, 2))))), 12, {}),
    ("bmm", lambda x, rng: tt.reduce_sum(tt.bmm(tt.reshape(x, (2, 3, 2)), tt.constant(rng.normal(size=(2, 2, 3))))), 12, {}),
    ("add", lambda x, rng: tt.reduce_sum(tt.add(x, tt.constant(rng.normal(size=8)))), 8, {}),
    ("add_bias", lambda x, rng: tt.reduce_sum(tt.add(tt.reshape(x, (4, 2)), tt.constant(rng.normal(size=2)))), 8, {}),
    ("mul", lambda x, rng: tt.reduce_sum(tt.mul(x, tt.constant(rng.normal(size=8)))), 8, {}),
    ("mul_scalar", lambda x, rng: tt.reduce_sum(tt.mul(x, 1.7)), 8, {}),
    ("div", lambda x, rng: tt.reduce_sum(tt.div(x, tt.constant(rng.normal(size=6) + 4.0))), 6, {}),
    ("embed_gather", lambda x, rng: tt.reduce_sum(tt.embed_gather(tt.reshape(x, (4, 3)), np.array([[0, 2], [3, 2]]))), 12, {}),
    ("layernorm", lambda x, rng: tt.reduce_sum(tt.layernorm(tt.reshape(x, (2, 6)), tt.constant(rng.normal(size=6)), tt.constant(rng.normal(size=6)))), 12, {}),
    ("softmax", lambda x, rng: tt.reduce_sum(tt.mul(tt.softmax(tt.reshape(x, (2, 4))), tt.constant(rng.normal(size=(2, 4))))), 8, {}),
    ("log_softmax", lambda x, rng: tt.reduce_sum(tt.mul(tt.log_softmax(tt.reshape(x, (2, 4))), tt.constant(rng.normal(size=(2, 4))))), 8, {}),
    ("gelu", lambda x, rng: tt.reduce_sum(tt.gelu(x)), 8, {}),
    ("relu", lambda x, rng: tt.reduce_sum(tt.relu(x)), 8, {"offset": 1.5}),
    ("exp", lambda x, rng: tt.reduce_sum(tt.exp(x)), 8, {}),
    ("log", lambda x, rng: tt.reduce_sum(tt.log(x)), 8, {"offset": 3.0}),
    ("absolute", lambda x, rng: tt.reduce_sum(tt.absolute(x)), 8, {"offset": 2.0}),
    ("clamp_min", lambda x, rng: tt.reduce_sum(tt.clamp_min(x, 0.25)), 8, {"offset": 2.0}),
    ("logsigmoid", lambda x, rng: tt.reduce_sum(tt.logsigmoid(x)), 8, {}),
    ("reshape", lambda x, rng: tt.reduce_sum(tt.mul(tt.reshape(x, (2, 2, 2)), tt.constant(rng.normal(size=(2, 2, 2))))), 8, {}),
    ("transpose", lambda x, rng: tt.reduce_sum(tt.mul(tt.transpose(tt.reshape(x, (2, 4)), (1, 0)), tt.constant(rng.normal(size=(4, 2))))), 8, {}),
    ("slice_axis", lambda x, rng: tt.reduce_sum(tt.slice_axis(tt.reshape(x, (2, 4)), 1, 1, 3)), 8, {}),
    ("reduce_sum_axis", lambda x, rng: tt.reduce_sum(tt.mul(tt.reduce_sum(tt.reshape(x, (2, 4)), axis=1), tt.constant(rng.normal(size=2)))), 8, {}),
    ("reduce_mean", lambda x, rng: tt.reduce_mean(tt.mul(x, x)), 8, {}),
    ("reduce_mean_axis", lambda x, rng: tt.reduce_sum(tt.mul(tt.reduce_mean(tt.reshape(x, (2, 4)), axis=0), tt.constant(rng.normal(size=4)))), 8, {}),
]


@pytest.mark.parametrize("name,f,size,opts", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
def test_primitive_gradients(name, f, size, opts):
    # 20 random draws per primitive, 64-bit, central differences
    for trial in range(20):
        rng = np.random.default_rng(hash((name, trial)) % 2**32)
        x = rand((size,), rng, offset=opts.get("offset", 0.0))
        fixed = np.random.default_rng(trial)
        err = tt.grad_check(lambda t: f(t, np.random.default_rng(trial + 999)), x)
        assert err < 1e-6, f"{name} trial {trial}: rel err {err}"


def test_softmax_rows_normalized():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(5, 9)) * 3)
    p = tt.softmax(x)
    assert np.all(np.abs(p.data.sum(axis=-1) - 1.0) < 1e-6)


def test_log_softmax_matches_log_of_softmax():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(4, 7)))
    assert np.allclose(tt.log_softmax(x).data, np.log(tt.softmax(x).data), atol=1e-6)


def test_double_backward_is_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = tt.reduce_sum(tt.mul(x, x))
    tape.backward(y)
    with pytest.raises(RuntimeError, match="consumed"):
        tape.backward(y)


def test_backward_requires_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = tt.mul(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_shape_mismatch_errors():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2)))
    with pytest.raises(ValueError):
        tt.matmul(a, b)
    with pytest.raises(ValueError):
        tt.add(a, b)
    with pytest.raises(ValueError):
        tt.mul(a, b)


def test_no_general_broadcasting():
    # only bias-add over the last axis is supported
    with pytest.raises(ValueError):
        tt.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))


def test_nonfinite_ops_raise():
    with pytest.raises(FloatingPointError):
        tt.div(Tensor(np.ones(3)), Tensor(np.zeros(3)))
    with pytest.raises(FloatingPointError):
        tt.log(Tensor(np.array([1.0, -1.0])))
    with pytest.raises(FloatingPointError):
        tt.exp(Tensor(np.array([1e9])))


def test_embed_gather_bounds():
    with pytest.raises(ValueError):
        tt.embed_gather(Tensor(np.ones((3, 2))), np.array([3]))


def test_nested_tapes_rejected():
    with Tape():
        with pytest.raises(RuntimeError):
            with Tape():
                pass


def test_deterministic_gradients():
    rng = np.random.default_rng(11)
    data = rng.normal(size=(6, 6))
    grads = []
    for _ in range(2):
        x = Tensor(data.copy(), requires_grad=True)
        with Tape() as tape:
            y = tt.reduce_mean(tt.gelu(tt.matmul(x, tt.layernorm(
                x, tt.constant(np.ones(6)), tt.constant(np.zeros(6))))))
        tape.backward(y)
        grads.append(x.grad.copy())
    assert np.array_equal(grads[0], grads[1])


def test_inference_mode_records_nothing():
    x = Tensor(np.ones(4), requires_grad=True)
    y = tt.mul(x, x)  # no active tape
    assert not y.requires_grad
    with Tape() as tape:
        z = tt.mul(x, x)
    assert z.requires_grad and len(tape) == 1


def test_ce_of_two_layer_net_gradcheck():
    rng = np.random.default_rng(21)
    w2 = tt.constant(rng.normal(size=(5, 3)))
    target = np.array([1, 0])

    def f(x):
        h = tt.gelu(tt.matmul(tt.reshape(x, (2, 5)), tt.constant(rng_w1)))
        logits = tt.matmul(h, w2)
        onehot = np.zeros((2, 3))
        onehot[np.arange(2), target] = 1.0
        return tt.mul(tt.reduce_sum(tt.mul(tt.log_softmax(logits), tt.constant(onehot))), -0.5)

    rng_w1 = rng.normal(size=(5, 5))
    err = tt.grad_check(f, Tensor(rng.normal(size=10)))
    assert err < 1e-4
