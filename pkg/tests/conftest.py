import numpy as np
import pytest

from mmisnet import tensor as T
from mmisnet.gradcheck import numerical_gradient, relative_error


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tape_grad(fn, *arrays, wrt=0):
    """Analytic gradient of scalar ``fn(*tensors)`` w.r.t. ``arrays[wrt]``."""
    ts = [T.Tensor(a, requires_grad=(i == wrt)) for i, a in enumerate(arrays)]
    with T.Tape() as tape:
        out = fn(*ts)
        tape.backward(out)
    g = ts[wrt].grad
    return np.zeros(arrays[wrt].shape) if g is None else g


def fd_grad(fn, *arrays, wrt=0):
    """Central-difference gradient with kink mask (see gradcheck.numerical_gradient)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[wrt]

    def f():
        with T.no_grad():
            return fn(*[T.Tensor(a) for a in arrays]).data.item()

    return numerical_gradient(f, target)


def assert_grad_matches(fn, *arrays, wrt=0, tol=1e-5):
    analytic = tape_grad(fn, *arrays, wrt=wrt)
    numeric, valid = fd_grad(fn, *arrays, wrt=wrt)
    assert valid.any()
    err = relative_error(analytic, numeric, valid)
    assert err <= tol, err
    return err
