import json
import math

import numpy as np
import pytest

from geoworld import autodiff as ad
from geoworld.errors import ContractError, NumericalError
from geoworld.geometry import TWO_PI


def _scalar(tape, fn, x):
    t = tape.param("x", x)
    return t, fn(t)


def test_tanh_value_and_derivative():
    tape = ad.Tape()
    x = tape.param("x", [0.0])
    y = ad.sum_(ad.tanh(x))
    assert float(y.data) == 0.0
    assert ad.backward(tape, y)["x"][0] == 1.0


def test_logsumexp_of_zeros():
    tape = ad.Tape()
    x = tape.param("x", np.zeros((1, 2)))
    y = ad.logsumexp(x)
    assert y.data[0] == pytest.approx(math.log(2.0), abs=1e-12)


def test_logsumexp_is_shift_stable():
    tape = ad.Tape()
    x = tape.param("x", [[1000.0, 1000.0, 1000.0]])
    assert ad.logsumexp(x).data[0] == pytest.approx(1000.0 + math.log(3.0), abs=1e-9)


def test_logsumexp_mask():
    tape = ad.Tape()
    x = tape.param("x", [[0.0, 0.0, 50.0]])
    mask = np.array([[True, True, False]])
    y = ad.logsumexp(x, mask)
    assert y.data[0] == pytest.approx(math.log(2.0))
    g = ad.backward(tape, ad.sum_(y))["x"]
    np.testing.assert_allclose(g, [[0.5, 0.5, 0.0]])
    with pytest.raises(ContractError):
        ad.logsumexp(x, np.zeros((1, 3), dtype=bool))


def test_wrap_passthrough_forward_and_identity_gradient():
    tape = ad.Tape()
    x = tape.param("x", [[7.0]])
    y = ad.wrap_passthrough(x, TWO_PI)
    assert y.data[0, 0] == pytest.approx(7.0 - TWO_PI, abs=1e-12)
    assert ad.backward(tape, ad.sum_(y))["x"][0, 0] == 1.0


def test_wrap_passthrough_skips_infinite_moduli():
    tape = ad.Tape()
    x = tape.param("x", [[7.0, 7.0]])
    y = ad.wrap_passthrough(x, np.array([TWO_PI, np.inf]))
    np.testing.assert_allclose(y.data, [[7.0 - TWO_PI, 7.0]])


def test_backward_sum_linear():
    tape = ad.Tape()
    t = tape.param("theta", [1.0, -2.0, 3.0])
    np.testing.assert_array_equal(ad.backward(tape, ad.sum_(t))["theta"], [1.0, 1.0, 1.0])


def test_backward_square():
    tape = ad.Tape()
    t = tape.param("theta", [3.0])
    assert ad.backward(tape, ad.sum_(ad.square(t)))["theta"][0] == 6.0


def test_backward_disconnected_root_gives_zeros():
    tape = ad.Tape()
    tape.param("theta", [1.0, 2.0])
    root = tape.const(5.0)
    np.testing.assert_array_equal(ad.backward(tape, root)["theta"], [0.0, 0.0])


def test_backward_requires_scalar_root():
    tape = ad.Tape()
    t = tape.param("theta", [1.0, 2.0])
    with pytest.raises(ContractError):
        ad.backward(tape, ad.square(t))


def test_fan_out_accumulates():
    x0 = np.array([[0.3, -1.2], [0.7, 2.0]])

    def f(tape, x):
        return ad.sum_(ad.tanh(ad.square(x)))

    tape = ad.Tape()
    x = tape.param("x", x0)
    two = ad.add(f(tape, x), f(tape, x))
    g_two = ad.backward(tape, two)["x"]
    tape = ad.Tape()
    x = tape.param("x", x0)
    g_one = ad.backward(tape, ad.scale(f(tape, x), 2.0))["x"]
    np.testing.assert_allclose(g_two, g_one, rtol=0, atol=1e-15)


def test_shape_errors():
    tape = ad.Tape()
    a = tape.param("a", np.zeros((2, 3)))
    b = tape.param("b", np.zeros((3, 2)))
    with pytest.raises(ContractError):
        ad.add(a, b)
    with pytest.raises(ContractError):
        ad.matmul(a, a)
    with pytest.raises(ContractError):
        ad.mul(a, b)
    # bias broadcast is the single allowed exception
    assert ad.add(a, tape.const(np.ones(3))).shape == (2, 3)


def test_non_finite_output_names_the_op():
    tape = ad.Tape()
    x = tape.param("x", [0.0])
    with pytest.raises(NumericalError) as info:
        ad.log(x)
    assert info.value.op == "log"


def test_sqrt_gradient_at_zero_is_zero():
    tape = ad.Tape()
    x = tape.param("x", [0.0, 4.0])
    g = ad.backward(tape, ad.sum_(ad.sqrt(x)))["x"]
    np.testing.assert_array_equal(g, [0.0, 0.25])


def test_take_with_repeats_accumulates():
    tape = ad.Tape()
    x = tape.param("x", np.arange(6.0).reshape(3, 2))
    y = ad.take(x, np.array([0, 0, 2]))
    g = ad.backward(tape, ad.sum_(y))["x"]
    np.testing.assert_array_equal(g, [[2, 2], [0, 0], [1, 1]])


def test_grad_check_sum_of_squares():
    rng = np.random.default_rng(0)
    err = ad.grad_check(lambda tape, P: ad.sum_(ad.square(P["t"])), {"t": rng.normal(size=(4, 3))})
    assert err < 1e-6


PRIMITIVE_CASES = {
    "matmul": lambda P: ad.sum_(ad.tanh(ad.matmul(P["a"], P["b"]))),
    "bias": lambda P: ad.sum_(ad.square(ad.add(P["a"], P["c"]))),
    "sub_mul": lambda P: ad.sum_(ad.mul(ad.sub(P["a"], P["a2"]), P["a2"])),
    "exp_log": lambda P: ad.mean(ad.log(ad.add(ad.exp(P["a"]), P["pos"]))),
    "abs_relu": lambda P: ad.sum_(ad.add(ad.abs_(P["a"]), ad.relu(P["a2"]))),
    "sqrt": lambda P: ad.sum_(ad.sqrt(P["pos"])),
    "trig": lambda P: ad.sum_(ad.mul(ad.cos(P["a"]), ad.sin(P["a2"]))),
    "lse": lambda P: ad.sum_(ad.logsumexp(P["a"])),
    "concat_take": lambda P: ad.sum_(ad.square(ad.take(ad.concat([P["a"], P["a2"]], axis=1), np.array([1, 0, 1]), axis=1))),
    "gather_reshape": lambda P: ad.sum_(ad.square(ad.gather2d(ad.reshape(P["a"], (3, 2)), [0, 2, 2], [1, 0, 0]))),
    "mean_axis": lambda P: ad.sum_(ad.square(ad.mean(P["a"], axis=0))),
    "pairwise_l2": lambda P: ad.sum_(ad.pairwise_distance(P["a"], P["a2"], np.array([TWO_PI, np.inf, 3.0]), np.array([True, False, True]), 2)),
    "pairwise_l1": lambda P: ad.sum_(ad.square(ad.pairwise_distance(P["a"], P["a2"], np.array([TWO_PI, np.inf, 3.0]), np.array([True, False, True]), 1))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
@pytest.mark.parametrize("seed", range(3))
def test_primitive_gradients(name, seed):
    rng = np.random.default_rng(seed)
    params = {
        "a": rng.uniform(0.2, 1.4, size=(2, 3)),
        "a2": rng.uniform(0.2, 1.4, size=(2, 3)) + 0.05,
        "b": rng.normal(size=(3, 4)),
        "c": rng.normal(size=3),
        "pos": rng.uniform(0.5, 2.0, size=(2, 3)),
    }
    fn = PRIMITIVE_CASES[name]
    assert ad.grad_check(lambda tape, P: fn(P), params, eps=1e-6) < 1e-6


def test_determinism_bit_identical():
    rng = np.random.default_rng(3)
    params = {"a": rng.normal(size=(5, 4)), "b": rng.normal(size=(4, 2))}

    def f(tape, P):
        return ad.sum_(ad.logsumexp(ad.tanh(ad.matmul(P["a"], P["b"]))))

    v1, g1 = ad.value_and_grad(f, params)
    v2, g2 = ad.value_and_grad(f, params)
    assert v1 == v2
    for k in g1:
        assert g1[k].tobytes() == g2[k].tobytes()


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(11)
    params = {"enc.W0": rng.normal(size=(3, 4)) * 1e-7, "enc.b0": rng.normal(size=4), "x": np.array(np.pi)}
    path = tmp_path / "ckpt.json"
    ad.save_params(path, params, {"note": "x"})
    loaded, meta = ad.load_params(path)
    assert meta == {"note": "x"}
    for k, v in params.items():
        assert loaded[k].shape == v.shape
        assert loaded[k].tobytes() == v.tobytes()
    doc = json.loads(path.read_text())
    assert doc["params"]["enc.W0"]["shape"] == [3, 4]
