from __future__ import annotations

import numpy as np
import pytest

from bitforge import tensor as T
from bitforge.optim import AdamWHyper, NonFiniteGradError, OptimizerState, clip_grad_norm, optimizer_step
from bitforge.tensor import Graph, Tensor

from oracles import adamw_two_step_trace


def test_two_step_hand_trace():
    t = adamw_two_step_trace()
    w = Tensor(t["w0"], requires_grad=True)
    state = OptimizerState()
    hyper = AdamWHyper(t["lr"], t["betas"], t["eps"], t["weight_decay"])
    for g in t["grads"]:
        optimizer_step([w], [np.array(g)], state, hyper)
    np.testing.assert_allclose(w.data, t["final"], rtol=0, atol=1e-14)
    assert state.step == 2


def test_zero_grads_keep_params_and_decay_moments():
    w = Tensor([1.0, 2.0], requires_grad=True)
    state = OptimizerState()
    hyper = AdamWHyper(lr=0.1)
    optimizer_step([w], [np.array([1.0, -1.0])], state, hyper)
    m1, v1 = state.m[0].copy(), state.v[0].copy()
    # with zero gradient the moments shrink geometrically; only the stale
    # first moment still moves the parameter
    for _ in range(3):
        optimizer_step([w], [np.zeros(2)], state, hyper)
    np.testing.assert_allclose(state.m[0], m1 * 0.9 ** 3)
    np.testing.assert_allclose(state.v[0], v1 * 0.999 ** 3)
    fresh = Tensor([1.0, 2.0])
    optimizer_step([fresh], [np.zeros(2)], OptimizerState(), hyper)
    np.testing.assert_array_equal(fresh.data, [1.0, 2.0])


def test_scalar_quadratic_converges():
    w = Tensor([5.0], requires_grad=True)
    state, hyper = OptimizerState(), AdamWHyper(lr=0.05)
    for _ in range(500):
        w.grad = None
        with Graph() as g:
            g.backward(T.sum(T.mul(T.sub(w, 1.5), T.sub(w, 1.5))))
        optimizer_step([w], [w.grad], state, hyper)
    assert abs(w.data[0] - 1.5) < 1e-3


def test_non_finite_rejected_without_mutation():
    w = Tensor([1.0, 2.0])
    v = Tensor([3.0])
    state = OptimizerState()
    with pytest.raises(NonFiniteGradError) as e:
        optimizer_step([v, w], [np.array([0.1]), np.array([np.nan, 0.0])], state, AdamWHyper(lr=0.1))
    assert e.value.step == 1
    assert state.step == 0 and not state.m
    np.testing.assert_array_equal(v.data, [3.0])


def test_clip_grad_norm():
    grads = [np.array([3.0, 0.0]), None, np.array([4.0])]
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(clipped[0], [0.6, 0.0])
    assert clipped[1] is None
    same, _ = clip_grad_norm(grads, 10.0)
    assert same[0] is grads[0]
