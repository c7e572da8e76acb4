"""Optimizer steps against independent scalar recomputation."""

import numpy as np
import pytest

from foal import optim
from foal.network import ParamSet


def make_params(**arrays):
    return ParamSet.from_arrays({k: np.asarray(v, dtype=float)
                                 for k, v in arrays.items()})


def adam_oracle(p, gs, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Re-derive the trajectory one step at a time on raw floats."""
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(gs, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


class TestSGD:
    def test_single_step_arithmetic(self):
        params = make_params(a=[1.0, 2.0], b=[[3.0]])
        optim.SGD(0.5).step(params, {"a": np.array([2.0, -4.0]),
                                     "b": np.array([[1.0]])})
        assert np.array_equal(params["a"].data, [0.0, 4.0])
        assert np.array_equal(params["b"].data, [[2.5]])

    def test_zero_grad_is_identity(self):
        params = make_params(a=[1.5, -2.5])
        optim.SGD(0.1).step(params, {"a": np.zeros(2)})
        assert np.array_equal(params["a"].data, [1.5, -2.5])

    def test_two_steps_compose(self):
        params = make_params(a=[10.0])
        sgd = optim.SGD(1.0)
        sgd.step(params, {"a": np.array([1.0])})
        sgd.step(params, {"a": np.array([2.0])})
        assert params["a"].data[0] == 7.0

    def test_update_linear_in_grad(self):
        p1 = make_params(a=[1.0])
        p2 = make_params(a=[1.0])
        optim.SGD(0.25).step(p1, {"a": np.array([3.0])})
        optim.SGD(0.25).step(p2, {"a": np.array([6.0])})
        assert (1.0 - p2["a"].data[0]) == pytest.approx(2 * (1.0 - p1["a"].data[0]))

    def test_missing_grad_raises(self):
        params = make_params(a=[1.0], b=[2.0])
        with pytest.raises(optim.MissingGradError, match="'b'"):
            optim.SGD(0.1).step(params, {"a": np.array([1.0])})

    def test_grad_shape_mismatch_raises(self):
        params = make_params(a=[1.0, 2.0])
        with pytest.raises(ValueError, match="shape"):
            optim.SGD(0.1).step(params, {"a": np.zeros(3)})


class TestAdam:
    def test_default_hyperparameters(self):
        ad = optim.Adam(1e-3)
        assert ad.beta1 == 0.9
        assert ad.beta2 == 0.999
        assert ad.eps == 1e-8
        assert ad.step_count == 0

    def test_three_step_trajectory_matches_oracle(self):
        rng = np.random.default_rng(0)
        p0 = rng.normal(size=(2, 3))
        gs = [rng.normal(size=(2, 3)) for _ in range(3)]

        params = make_params(w=p0.copy())
        ad = optim.Adam(0.01)
        for g in gs:
            ad.step(params, {"w": g})
        assert ad.step_count == 3
        assert np.allclose(params["w"].data, adam_oracle(p0, gs, 0.01),
                           rtol=1e-14, atol=1e-14)

    def test_first_step_size_bounded_by_lr(self):
        # after bias correction the first update is lr * g / (|g| + eps),
        # capped by lr for any gradient scale
        for scale in (1e-6, 1.0, 1e6):
            params = make_params(w=[0.0])
            optim.Adam(0.1).step(params, {"w": np.array([scale])})
            got = abs(params["w"].data[0])
            assert got <= 0.1 + 1e-12
            assert got == pytest.approx(0.1 * scale / (scale + 1e-8), rel=1e-12)

    def test_zero_grad_keeps_params(self):
        params = make_params(w=[5.0])
        ad = optim.Adam(0.1)
        ad.step(params, {"w": np.array([0.0])})
        assert params["w"].data[0] == 5.0

    def test_sign_descends(self):
        params = make_params(w=[1.0, 1.0])
        optim.Adam(0.01).step(params, {"w": np.array([4.0, -4.0])})
        assert params["w"].data[0] < 1.0 < params["w"].data[1]

    def test_state_keyed_per_parameter(self):
        params = make_params(a=[0.0], b=[0.0])
        ad = optim.Adam(0.1)
        ad.step(params, {"a": np.array([1.0]), "b": np.array([-1.0])})
        assert not np.array_equal(ad.m["a"], ad.m["b"])
        assert np.array_equal(ad.v["a"], ad.v["b"])

    def test_missing_grad_raises_and_leaves_state_clean(self):
        params = make_params(a=[1.0], b=[2.0])
        ad = optim.Adam(0.1)
        with pytest.raises(optim.MissingGradError):
            ad.step(params, {"b": np.array([1.0])})

    def test_two_optimizers_independent(self):
        pa = make_params(w=[1.0])
        pb = make_params(w=[1.0])
        ada, adb = optim.Adam(0.1), optim.Adam(0.1)
        ada.step(pa, {"w": np.array([1.0])})
        ada.step(pa, {"w": np.array([1.0])})
        adb.step(pb, {"w": np.array([1.0])})
        assert ada.step_count == 2 and adb.step_count == 1
        assert pa["w"].data[0] != pb["w"].data[0]
