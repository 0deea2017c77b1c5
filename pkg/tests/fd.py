"""Finite-difference helpers shared by the model tests and the acceptance suite."""

import numpy as np

from distmest.models import EIVModel, ExponentialModel, LogisticModel, QuadraticModel
from distmest.rng import stream


def central_diff(f, theta, j):
    h = 1e-5 * (1.0 + abs(theta[j]))
    e = np.zeros_like(theta)
    e[j] = h
    return (f(theta + e) - f(theta - e)) / (2.0 * h)


def rel_err(approx, exact) -> float:
    """Normwise relative error, with the denominator floored at 1."""
    approx, exact = np.asarray(approx), np.asarray(exact)
    return float(np.max(np.abs(approx - exact)) / max(1.0, float(np.max(np.abs(exact)))))


def _logistic_sampler(p):
    def draw(rng):
        x = rng.normal(0.0, 0.75, p)
        return np.concatenate([x, [float(rng.random() < 0.5)]]), rng.uniform(-3, 3, p)

    return draw


def _eiv_sampler(rng):
    return rng.normal(0.0, 2.0, 2), np.array([rng.uniform(-3, 3), rng.uniform(-3, 3)])


def _quadratic_sampler(rng):
    return rng.normal(size=3), rng.uniform(-3, 3, 3)


def _exponential_sampler(rng):
    return rng.exponential(1.0, 1), np.array([rng.uniform(0.3, 5.0)])


MODEL_CASES = [
    ("logistic", LogisticModel(1, 3), _logistic_sampler(4)),
    ("eiv", EIVModel(1.0), _eiv_sampler),
    ("eiv-s2", EIVModel(0.5), _eiv_sampler),
    ("quadratic", QuadraticModel(1, 2, weight=np.array([[2.0, 0.5, 0.0], [0.5, 1.0, 0.2], [0.0, 0.2, 3.0]])), _quadratic_sampler),
    ("exponential", ExponentialModel(), _exponential_sampler),
]


def derivative_chain_errors(model, sampler, draws=100, seed=0) -> dict:
    """Worst relative errors of score/objective, hessian/score and third/hessian."""
    rng = stream(seed, 0)
    worst = {"score": 0.0, "hessian": 0.0, "third": 0.0}
    for _ in range(draws):
        row, theta = sampler(rng)
        p = theta.size
        g = model.score(row, theta)
        H = model.hessian(row, theta)
        T = model.third_derivative(row, theta)
        fd_g = np.array([central_diff(lambda t: model.objective(row, t), theta, j) for j in range(p)])
        fd_H = np.column_stack([central_diff(lambda t: model.score(row, t), theta, j) for j in range(p)])
        fd_T = np.hstack([central_diff(lambda t: model.hessian(row, t), theta, j) for j in range(p)])
        worst["score"] = max(worst["score"], rel_err(fd_g, g))
        worst["hessian"] = max(worst["hessian"], rel_err(fd_H, H))
        worst["third"] = max(worst["third"], rel_err(fd_T, T))
    return worst
