"""M-functions, parameter containers and data blocks.

Every model evaluates on stacked rows: ``rows`` has shape ``(..., n, d)`` and
``theta`` has shape ``(..., p)`` where the leading axes index independent
problems (blocks, replicates). The batch methods return per-row arrays and
never reduce over the leading axes, which lets the solvers fit many blocks
in lockstep. The single-row methods (``objective``, ``score``, ``hessian``,
``third_derivative``) are thin checked wrappers around the batch methods.

Third derivatives use the Kronecker layout: a ``p x p**2`` matrix whose
column block ``j`` is the derivative of the Hessian with respect to
``theta[j]``, so that ``T @ np.kron(u, u)`` is the second directional
derivative of the score along ``u``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ContractViolation, EvaluationDomainError

DEFAULT_BOX_RADIUS = 50.0


@dataclass(frozen=True)
class ParameterVector:
    """A block parameter ``theta_k = (phi, lambda_k)`` with ``phi`` first."""

    common: np.ndarray
    block: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        common = np.atleast_1d(np.asarray(self.common, dtype=float))
        block = np.atleast_1d(np.asarray(self.block, dtype=float)).reshape(-1)
        if common.ndim != 1 or common.size < 1:
            raise ContractViolation("common part must be a non-empty vector")
        object.__setattr__(self, "common", common)
        object.__setattr__(self, "block", block)

    @classmethod
    def from_flat(cls, flat, p1: int) -> "ParameterVector":
        flat = np.asarray(flat, dtype=float).reshape(-1)
        if not 1 <= p1 <= flat.size:
            raise ContractViolation(f"p1={p1} incompatible with length {flat.size}")
        return cls(flat[:p1], flat[p1:])

    @property
    def p1(self) -> int:
        return self.common.size

    @property
    def p2(self) -> int:
        return self.block.size

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.common, self.block])

    def __array__(self, dtype=None, copy=None):
        out = self.flat
        return out if dtype is None else out.astype(dtype)

    def __len__(self):
        return self.p1 + self.p2


@dataclass(frozen=True)
class ParameterBox:
    """Box ``Theta_k`` for a block parameter and box ``Phi`` for the common part."""

    lower: np.ndarray
    upper: np.ndarray
    common_lower: np.ndarray
    common_upper: np.ndarray

    def __post_init__(self):
        for name in ("lower", "upper", "common_lower", "common_upper"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        if self.lower.shape != self.upper.shape or np.any(self.lower >= self.upper):
            raise ContractViolation("box needs lower < upper elementwise")
        p1 = self.common_lower.size
        if self.common_upper.size != p1 or p1 > self.lower.size:
            raise ContractViolation("common box has the wrong dimension")
        if np.any(self.common_lower >= self.common_upper):
            raise ContractViolation("common box needs lower < upper elementwise")
        if np.any(self.common_lower < self.lower[:p1]) or np.any(self.common_upper > self.upper[:p1]):
            raise ContractViolation("common box must lie inside the projection of the block box")

    @classmethod
    def symmetric(cls, p1: int, p2: int, radius: float = DEFAULT_BOX_RADIUS) -> "ParameterBox":
        p = p1 + p2
        return cls(-radius * np.ones(p), radius * np.ones(p), -radius * np.ones(p1), radius * np.ones(p1))

    @property
    def p(self) -> int:
        return self.lower.size

    @property
    def p1(self) -> int:
        return self.common_lower.size

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(np.isfinite(theta)) and np.all(theta >= self.lower) and np.all(theta <= self.upper))

    def contains_common(self, phi) -> bool:
        phi = np.asarray(phi, dtype=float)
        return bool(
            np.all(np.isfinite(phi)) and np.all(phi >= self.common_lower) and np.all(phi <= self.common_upper)
        )

    def clip(self, theta):
        return np.clip(theta, self.lower, self.upper)


@dataclass(frozen=True)
class DataBlock:
    """Observations ``X_{k,1..n_k}`` held by one worker."""

    id: int
    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim == 1:
            rows = rows[:, None]
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise ContractViolation("a data block needs at least one row")
        if not np.all(np.isfinite(rows)):
            raise ContractViolation(f"block {self.id} contains non-finite values")
        object.__setattr__(self, "rows", rows)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]


def read_block_csv(path, block_id: int) -> DataBlock:
    """Read a block from CSV; a non-numeric first line is taken as a header."""
    with open(Path(path), newline="", encoding="utf-8") as fh:
        lines = [line for line in csv.reader(fh) if line and any(cell.strip() for cell in line)]
    if not lines:
        raise ContractViolation(f"{path}: no rows")
    try:
        [float(cell) for cell in lines[0]]
    except ValueError:
        lines = lines[1:]
    try:
        rows = np.array([[float(cell) for cell in line] for line in lines], dtype=float)
    except ValueError as exc:
        raise ContractViolation(f"{path}: {exc}") from None
    return DataBlock(block_id, rows)


def _bouter(a, b):
    return a[..., :, None] * b[..., None, :]


class BlockModel:
    """Base class for an M-function ``M(x; theta)``.

    Subclasses set ``p1``, ``p2``, ``d`` and implement ``values``, ``scores``
    and ``hessians``. ``thirds`` falls back to central differences of
    ``hessians`` when a model has no analytic form.
    """

    name = "model"
    p1: int
    p2: int
    d: int
    analytic_third = True

    @property
    def p(self) -> int:
        return self.p1 + self.p2

    # -- batch interface ---------------------------------------------------

    def values(self, rows, theta):
        raise NotImplementedError

    def scores(self, rows, theta):
        raise NotImplementedError

    def hessians(self, rows, theta):
        raise NotImplementedError

    def thirds(self, rows, theta):
        theta = np.asarray(theta, dtype=float)
        p = self.p
        cols = []
        for j in range(p):
            h = 1e-5 * (1.0 + np.abs(theta[..., j]))
            step = np.zeros_like(theta)
            step[..., j] = h
            diff = self.hessians(rows, theta + step) - self.hessians(rows, theta - step)
            cols.append(diff / (2.0 * h[..., None, None, None]))
        return np.concatenate(cols, axis=-1)

    def mean_hessian(self, rows, theta):
        return self.hessians(rows, theta).mean(axis=-3)

    def hessian_apply(self, rows, theta, vecs):
        """Per-row products ``hessian_i @ vecs_i``."""
        return np.einsum("...nij,...nj->...ni", self.hessians(rows, theta), vecs)

    def mean_third_apply(self, rows, theta, mat):
        """``mean_i T_i @ vec(mat)`` for a ``p x p`` matrix per problem."""
        vec = mat.reshape(mat.shape[:-2] + (-1,))
        return np.einsum("...nik,...k->...i", self.thirds(rows, theta), vec) / rows.shape[-2]

    def initial_theta(self, rows):
        return np.zeros(rows.shape[:-2] + (self.p,))

    # -- single-row interface ---------------------------------------------

    def _check(self, row, theta):
        row = np.asarray(row, dtype=float).reshape(-1)
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if row.size != self.d:
            raise ContractViolation(f"{self.name}: row length {row.size} != {self.d}")
        if theta.size != self.p:
            raise ContractViolation(f"{self.name}: theta length {theta.size} != {self.p}")
        return row[None, :], theta

    @staticmethod
    def _finite(value, what):
        if not np.all(np.isfinite(value)):
            raise EvaluationDomainError(f"non-finite {what}")
        return value

    def objective(self, row, theta) -> float:
        r, t = self._check(row, theta)
        return float(self._finite(self.values(r, t)[0], "objective"))

    def score(self, row, theta) -> np.ndarray:
        r, t = self._check(row, theta)
        return self._finite(self.scores(r, t)[0], "score")

    def hessian(self, row, theta) -> np.ndarray:
        r, t = self._check(row, theta)
        return self._finite(self.hessians(r, t)[0], "hessian")

    def third_derivative(self, row, theta) -> np.ndarray:
        r, t = self._check(row, theta)
        return self._finite(self.thirds(r, t)[0], "third derivative")

    def describe(self) -> dict:
        return {"model": self.name, "p1": self.p1, "p2": self.p2}


class LogisticModel(BlockModel):
    """Negative log-likelihood of logistic regression without intercept.

    A row is ``(x_1, ..., x_p, y)`` with ``y`` in {0, 1}; the common
    parameters are the coefficients of the first ``p1`` covariates.
    """

    name = "logistic"

    def __init__(self, p1: int = 1, p2: int = 0):
        if p1 < 1 or p2 < 0:
            raise ContractViolation("need p1 >= 1 and p2 >= 0")
        self.p1, self.p2 = p1, p2
        self.d = p1 + p2 + 1

    def _parts(self, rows, theta):
        x = rows[..., :-1]
        y = rows[..., -1]
        z = (x @ theta[..., :, None])[..., 0]
        return x, y, z

    def values(self, rows, theta):
        _, y, z = self._parts(rows, theta)
        # y*log(1+e^-z) + (1-y)*log(1+e^z) == log(1+e^z) - y*z, evaluated stably
        return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) - y * z

    def scores(self, rows, theta):
        x, y, z = self._parts(rows, theta)
        return (expit(z) - y)[..., None] * x

    def _weights(self, rows, theta):
        x, _, z = self._parts(rows, theta)
        mu = expit(z)
        return x, mu * (1.0 - mu), mu

    def hessians(self, rows, theta):
        x, w, _ = self._weights(rows, theta)
        return w[..., None, None] * _bouter(x, x)

    def mean_hessian(self, rows, theta):
        x, w, _ = self._weights(rows, theta)
        return np.swapaxes(x * w[..., None], -1, -2) @ x / x.shape[-2]

    def hessian_apply(self, rows, theta, vecs):
        x, w, _ = self._weights(rows, theta)
        return (w * (x * vecs).sum(axis=-1))[..., None] * x

    def thirds(self, rows, theta):
        x, w, mu = self._weights(rows, theta)
        w3 = w * (1.0 - 2.0 * mu)
        xxx = _bouter(x, _bouter(x, x).reshape(x.shape[:-1] + (-1,)))
        return w3[..., None, None] * xxx

    def mean_third_apply(self, rows, theta, mat):
        x, w, mu = self._weights(rows, theta)
        w3 = w * (1.0 - 2.0 * mu)
        quad = ((x @ mat) * x).sum(axis=-1)
        return ((w3 * quad)[..., None, :] @ x)[..., 0, :] / x.shape[-2]


class EIVModel(BlockModel):
    """Errors-in-variables M-function ``(lam*X - (Y - phi))**2 / (2 s2 (1 + lam**2))``.

    Rows are ``(X, Y)``, ``theta = (phi, lam)`` and ``sigma2`` is the known
    measurement-error variance. The function is not jointly convex, so the
    starting point is the closed-form orthogonal-regression fit of the block,
    which is its global minimiser.
    """

    name = "eiv"
    p1, p2, d = 1, 1, 2

    def __init__(self, sigma2: float = 1.0):
        if not sigma2 > 0:
            raise ContractViolation("sigma2 must be positive")
        self.sigma2 = float(sigma2)

    def _g(self, lam):
        c = 0.5 / self.sigma2
        q = 1.0 + lam * lam
        g0 = c / q
        g1 = -2.0 * c * lam / q**2
        g2 = c * (6.0 * lam * lam - 2.0) / q**3
        g3 = 24.0 * c * lam * (1.0 - lam * lam) / q**4
        return g0, g1, g2, g3

    def _parts(self, rows, theta):
        x = rows[..., 0]
        y = rows[..., 1]
        phi = theta[..., 0:1]
        lam = theta[..., 1:2]
        r = lam * x - y + phi
        return x, r, lam

    def values(self, rows, theta):
        _, r, lam = self._parts(rows, theta)
        g0 = self._g(lam)[0]
        return g0 * r * r

    def scores(self, rows, theta):
        x, r, lam = self._parts(rows, theta)
        g0, g1, _, _ = self._g(lam)
        return np.stack([2.0 * g0 * r, g1 * r * r + 2.0 * g0 * r * x], axis=-1)

    def hessians(self, rows, theta):
        x, r, lam = self._parts(rows, theta)
        g0, g1, g2, _ = self._g(lam)
        pp = np.broadcast_to(2.0 * g0, r.shape)
        pl = 2.0 * g1 * r + 2.0 * g0 * x
        ll = g2 * r * r + 4.0 * g1 * r * x + 2.0 * g0 * x * x
        return np.stack([np.stack([pp, pl], -1), np.stack([pl, ll], -1)], -2)

    def thirds(self, rows, theta):
        x, r, lam = self._parts(rows, theta)
        g0, g1, g2, g3 = self._g(lam)
        ppp = np.zeros_like(r)
        ppl = np.broadcast_to(2.0 * g1, r.shape)
        pll = 2.0 * g2 * r + 4.0 * g1 * x
        lll = g3 * r * r + 6.0 * g2 * r * x + 6.0 * g1 * x * x
        # row l, column (j, m) holds d3M / dtheta_l dtheta_j dtheta_m
        return np.stack(
            [np.stack([ppp, ppl, ppl, pll], -1), np.stack([ppl, pll, pll, lll], -1)],
            -2,
        )

    def initial_theta(self, rows):
        x = rows[..., 0]
        y = rows[..., 1]
        xc = x - x.mean(-1, keepdims=True)
        yc = y - y.mean(-1, keepdims=True)
        sxx = (xc * xc).mean(-1)
        syy = (yc * yc).mean(-1)
        sxy = (xc * yc).mean(-1)
        diff = syy - sxx
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (diff + np.sqrt(diff * diff + 4.0 * sxy * sxy)) / (2.0 * sxy)
        lam = np.where(np.abs(sxy) > 1e-300, lam, 0.0)
        phi = y.mean(-1) - lam * x.mean(-1)
        return np.stack([phi, lam], axis=-1)

    def describe(self) -> dict:
        return {**super().describe(), "sigma2": self.sigma2}


class QuadraticModel(BlockModel):
    """Test model ``M = (theta - x)' A (theta - x) / 2`` with rows of length p."""

    name = "quadratic"

    def __init__(self, p1: int = 1, p2: int = 0, weight=None):
        self.p1, self.p2 = p1, p2
        self.d = p1 + p2
        a = np.eye(self.d) if weight is None else np.asarray(weight, dtype=float)
        if a.shape != (self.d, self.d) or not np.allclose(a, a.T):
            raise ContractViolation("weight must be a symmetric p x p matrix")
        self.weight = a

    def values(self, rows, theta):
        diff = theta[..., None, :] - rows
        return 0.5 * np.einsum("...ni,ij,...nj->...n", diff, self.weight, diff)

    def scores(self, rows, theta):
        return (theta[..., None, :] - rows) @ self.weight

    def hessians(self, rows, theta):
        return np.broadcast_to(self.weight, rows.shape[:-1] + (self.d, self.d)).copy()

    def mean_hessian(self, rows, theta):
        return np.broadcast_to(self.weight, rows.shape[:-2] + (self.d, self.d)).copy()

    def thirds(self, rows, theta):
        return np.zeros(rows.shape[:-1] + (self.d, self.d * self.d))

    def mean_third_apply(self, rows, theta, mat):
        return np.zeros(rows.shape[:-2] + (self.d,))


class ExponentialModel(BlockModel):
    """Test model: exponential negative log-likelihood ``M = lam*x - log(lam)``."""

    name = "exponential"
    p1, p2, d = 1, 0, 1

    def values(self, rows, theta):
        lam = theta[..., 0:1]
        with np.errstate(invalid="ignore", divide="ignore"):
            return lam * rows[..., 0] - np.log(lam)

    def scores(self, rows, theta):
        lam = theta[..., 0:1]
        return (rows[..., 0] - 1.0 / lam)[..., None]

    def hessians(self, rows, theta):
        lam = theta[..., 0:1]
        return np.broadcast_to(1.0 / lam**2, rows.shape[:-1])[..., None, None].copy()

    def thirds(self, rows, theta):
        lam = theta[..., 0:1]
        return np.broadcast_to(-2.0 / lam**3, rows.shape[:-1])[..., None, None].copy()

    def initial_theta(self, rows):
        return np.ones(rows.shape[:-2] + (1,))


MODELS = {
    "logistic": LogisticModel,
    "eiv": EIVModel,
    "quadratic": QuadraticModel,
    "exponential": ExponentialModel,
}
