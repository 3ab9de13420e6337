import numpy as np
import pytest

from oracles import finite_diff, rel_error
from skynas.genome import NetworkGenome, instantiate
from skynas.model import Model, run_network
from skynas.tensor import ops
from skynas.tensor.ops import ConvWeights
from skynas.tensor.optim import sgd_step
from skynas.tensor.tape import GradTape, TapeError, backward


def test_backward_before_forward():
    with pytest.raises(TapeError):
        backward(GradTape(), np.ones(1))


def test_single_pwconv_sum_loss():
    x = np.arange(8.0).reshape(1, 2, 2, 2)
    spec_w = ConvWeights(ops.POINTWISE, np.ones((3, 2)))
    tape = GradTape()
    s = tape.watch()
    y = ops.pwconv1_forward(x, spec_w)

    def fn(g):
        gx, gw, _ = ops.pwconv1_backward(x, spec_w, g)
        return (gx,), {"w": gw}

    tape.push("pw", [s], fn)
    grads = backward(tape, np.ones_like(y))
    per_in = x.sum(axis=(0, 2, 3))
    np.testing.assert_array_equal(grads["w"], np.tile(per_in, (3, 1)))
    np.testing.assert_array_equal(tape.input_grad, np.full_like(x, 3.0))


def _tiny_model(bypass, seed=0):
    g = NetworkGenome(0, (4, 6, 8), (1, 0, 0), bypass)
    return Model.initialize(instantiate(g, (3, 8, 8)), seed=seed)


@pytest.mark.parametrize("mode", ["train", "infer"])
@pytest.mark.parametrize("bypass", [None, (1, 3)])
def test_network_gradients(backend, mode, bypass):
    m = _tiny_model(bypass)
    rng = np.random.default_rng(1)
    # nudge values away from the relu6 kinks so finite differences are clean
    params = {k: v + rng.normal(0, 0.05, v.shape) for k, v in m.params.items()}
    x = rng.uniform(0.1, 1.0, size=(2, 3, 8, 8))
    r = rng.normal(size=(2, 10, 4, 4))

    def loss():
        y, _ = run_network(m.spec, params, m.state, x, mode)
        return float(np.sum(y * r))

    tape = GradTape()
    run_network(m.spec, params, m.state, x, mode, tape)
    grads = tape.backward(r)
    assert set(grads) == set(params)
    for name in params:
        assert rel_error(grads[name], finite_diff(loss, params[name])) < 1e-4, name
    assert rel_error(tape.input_grad, finite_diff(loss, x)) < 1e-4


def test_sgd_examples():
    p, _ = sgd_step({"p": np.array(1.0)}, {"p": np.array(2.0)}, 0.1)
    assert p["p"] == pytest.approx(0.8)
    p, _ = sgd_step({"p": np.array([1.0, 2.0])}, {"p": np.zeros(2)}, 0.1)
    assert p["p"].tolist() == [1.0, 2.0]


def test_sgd_quadratic_decay():
    p = {"p": np.array(1.0)}
    for _ in range(10):
        p, _ = sgd_step(p, {"p": p["p"]}, 0.1)
    assert float(p["p"]) == pytest.approx(0.9**10, rel=1e-12)


def test_sgd_momentum_and_validation():
    p, v = sgd_step({"p": np.array(1.0)}, {"p": np.array(1.0)}, 0.1, momentum=0.9)
    p, v = sgd_step(p, {"p": np.array(1.0)}, 0.1, momentum=0.9, velocity=v)
    assert float(v["p"]) == pytest.approx(1.9)
    assert float(p["p"]) == pytest.approx(1.0 - 0.1 - 0.19)
    with pytest.raises(ValueError):
        sgd_step({}, {}, 0.0)
