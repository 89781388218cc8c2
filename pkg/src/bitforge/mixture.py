"""Fit one Gaussian to a Gaussian mixture under FKL, RKL, JSD or CAKLD.

A one-dimensional picture of mode covering versus mode seeking.  Densities
live on a fixed trapezoid grid over [-8, 8] with 2001 points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .divergence import DivergenceSpec, Kind
from .optim import AdamWHyper, OptimizerState, optimizer_step
from .tensor import Graph, Tensor

__all__ = ["GRID", "fit_gaussian_demo", "DemoResult", "OptimizationError", "mixture_logpdf"]

GRID = np.linspace(-8.0, 8.0, 2001)
_W = np.full(GRID.size, GRID[1] - GRID[0])
_W[0] *= 0.5
_W[-1] *= 0.5
_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


class OptimizationError(FloatingPointError):
    def __init__(self, msg: str, last_state: tuple[float, float]):
        super().__init__(msg)
        self.last_state = last_state


@dataclass
class DemoResult:
    trajectory: list[tuple[int, float, float, float]] = field(default_factory=list)
    mu: float = 0.0
    sigma: float = 1.0
    divergence: float = 0.0

    def rows(self):
        return list(self.trajectory)


def mixture_logpdf(x: np.ndarray, weights, means, sigmas) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    m = np.asarray(means, dtype=np.float64)
    s = np.asarray(sigmas, dtype=np.float64)
    comp = np.log(w) - np.log(s) - _LOG_SQRT_2PI - 0.5 * ((x[:, None] - m) / s) ** 2
    top = comp.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(comp - top).sum(axis=1, keepdims=True)))[:, 0]


def _objective(mu: Tensor, log_sigma: Tensor, logp: np.ndarray, p: np.ndarray, spec: DivergenceSpec) -> Tensor:
    z = T.mul(T.sub(GRID, mu), T.exp(T.neg(log_sigma)))
    logq = T.sub(T.mul(T.mul(z, z), -0.5), T.add(log_sigma, _LOG_SQRT_2PI))
    q = T.exp(logq)

    def fkl():
        return T.sum(T.mul(_W * p, T.sub(logp, logq)))

    def rkl():
        return T.sum(T.mul(T.mul(q, _W), T.sub(logq, logp)))

    if spec.kind is Kind.FKL:
        return fkl()
    if spec.kind is Kind.RKL:
        return rkl()
    if spec.kind is Kind.JSD:
        logm = T.log(T.mul(T.add(q, p), 0.5))
        a = T.sum(T.mul(_W * p, T.sub(logp, logm)))
        b = T.sum(T.mul(T.mul(q, _W), T.sub(logq, logm)))
        return T.mul(T.add(a, b), 0.5)
    gamma = 0.5 if spec.gamma is None else spec.gamma
    return T.add(T.mul(rkl(), gamma), T.mul(fkl(), 1.0 - gamma))


def fit_gaussian_demo(mixture, spec: DivergenceSpec, init=(0.5, 1.0), steps: int = 1500,
                      lr: float = 0.03, record_every: int = 1) -> DemoResult:
    """Adam on (mu, log sigma); returns the full trajectory and final fit."""
    weights, means, sigmas = (np.asarray(a, dtype=np.float64) for a in mixture)
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("mixture weights must sum to 1")
    if (sigmas <= 0).any():
        raise ValueError("mixture sigmas must be positive")
    logp = mixture_logpdf(GRID, weights, means, sigmas)
    p = np.exp(logp)
    mu = Tensor(init[0], requires_grad=True)
    log_sigma = Tensor(math.log(init[1]), requires_grad=True)
    state = OptimizerState()
    hyper = AdamWHyper(lr=lr)
    res = DemoResult()
    last = (float(mu.data), float(init[1]))
    for step in range(steps + 1):
        mu.grad = log_sigma.grad = None
        with Graph() as g:
            loss = _objective(mu, log_sigma, logp, p, spec)
            val = loss.item()
            if not math.isfinite(val):
                raise OptimizationError(f"divergence became non-finite at step {step}", last)
            g.backward(loss)
        last = (float(mu.data), math.exp(float(log_sigma.data)))
        if step % record_every == 0 or step == steps:
            res.trajectory.append((step, last[0], last[1], val))
        if step == steps:
            break
        optimizer_step([mu, log_sigma], [mu.grad, log_sigma.grad], state, hyper)
    res.mu, res.sigma, res.divergence = last[0], last[1], res.trajectory[-1][3]
    return res
