"""Closed-form asymptotic variances and Monte Carlo identity probes.

Block-level inputs are the partial information ``J`` (Schur complement of
the nuisance block in the expected Hessian) and ``Sigma``, the variance of
the efficient score for the common parameter. With fractions ``gamma_k``
as weights the variance functions return ``N * Var``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractViolation
from .models import BlockModel
from .rng import stream


@dataclass(frozen=True)
class BlockAsymptotics:
    J: np.ndarray
    Sigma: np.ndarray
    weight: float

    def __post_init__(self):
        J = np.atleast_2d(np.asarray(self.J, dtype=float))
        S = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        if J.shape != S.shape or J.shape[0] != J.shape[1]:
            raise ContractViolation("J and Sigma must be square matrices of the same size")
        if not self.weight > 0:
            raise ContractViolation("block weight must be positive")
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "Sigma", S)

    @property
    def H(self) -> np.ndarray:
        """``J^-1 Sigma J^-T``, the asymptotic covariance of the local estimate."""
        j_inv = np.linalg.inv(self.J)
        return j_inv @ self.Sigma @ j_inv.T


def partial_information(hessian, outer, p1: int):
    """Return ``(J, Sigma)`` for the common block from full ``p x p`` moments.

    ``hessian`` is the expected Hessian of M and ``outer`` the expected outer
    product of scores. The efficient score is
    ``psi_phi - H_phi,lam H_lam,lam^-1 psi_lam``.
    """
    hessian = np.asarray(hessian, dtype=float)
    outer = np.asarray(outer, dtype=float)
    p = hessian.shape[0]
    if p1 == p:
        return hessian.copy(), outer.copy()
    proj = np.linalg.solve(hessian[p1:, p1:], hessian[p1:, :p1]).T
    J = hessian[:p1, :p1] - proj @ hessian[p1:, :p1]
    S = np.hstack([np.eye(p1), -proj])
    return J, S @ outer @ S.T


def _check_fractions(blocks):
    if not blocks:
        raise ContractViolation("need at least one block")
    total = sum(b.weight for b in blocks)
    if abs(total - 1.0) > 1e-12:
        raise ContractViolation(f"block fractions must sum to 1 (got {total})")


def sac_full_variances(blocks: Sequence[BlockAsymptotics]):
    """Return ``(V_sac, V_full)``, both scaled by ``N``, for fractions ``gamma_k``."""
    _check_fractions(blocks)
    v_sac = sum(b.weight * b.H for b in blocks)
    j_bar = sum(b.weight * b.J for b in blocks)
    s_bar = sum(b.weight * b.Sigma for b in blocks)
    if np.linalg.cond(j_bar) > 1e14:
        raise ContractViolation("weighted partial information is singular")
    j_inv = np.linalg.inv(j_bar)
    return v_sac, j_inv @ s_bar @ j_inv.T


def wd_gmm_asy_var(blocks: Sequence[BlockAsymptotics]) -> np.ndarray:
    """``(sum w_k J_k^T Sigma_k^-1 J_k)^-1``; with fractions as weights this is ``N * Var``."""
    info = sum(b.weight * b.J.T @ np.linalg.solve(b.Sigma, b.J) for b in blocks)
    return np.linalg.inv(info)


def information_gap(blocks: Sequence[BlockAsymptotics]) -> np.ndarray:
    """``sum w J^T Sigma^-1 J - (sum w J)^T (sum w Sigma)^-1 (sum w J)``; always positive semidefinite."""
    info_wd = sum(b.weight * b.J.T @ np.linalg.solve(b.Sigma, b.J) for b in blocks)
    j_bar = sum(b.weight * b.J for b in blocks)
    s_bar = sum(b.weight * b.Sigma for b in blocks)
    return info_wd - j_bar.T @ np.linalg.solve(s_bar, j_bar)


def sandwich_inequality_residual(H, K, X, Y) -> np.ndarray:
    """``X^T H^-1 X + Y^T K^-1 Y - (X+Y)^T (H+K)^-1 (X+Y)``, PSD for PD ``H, K``."""
    H, K = np.atleast_2d(H).astype(float), np.atleast_2d(K).astype(float)
    X, Y = np.atleast_2d(X).astype(float), np.atleast_2d(Y).astype(float)
    Q = X.T @ np.linalg.solve(H, X) + Y.T @ np.linalg.solve(K, Y) - (X + Y).T @ np.linalg.solve(H + K, X + Y)
    return 0.5 * (Q + Q.T)


def min_eig(mat) -> float:
    mat = np.atleast_2d(mat)
    return float(np.linalg.eigvalsh(0.5 * (mat + mat.T)).min())


# ---------------------------------------------------------------------------
# errors-in-variables model

# (mu_Z, var_Z) of the four reference scenarios
EIV_SCENARIOS = {1: (1.0, 0.1), 2: (3.0, 0.5), 3: (0.0, 0.5), 4: (4.0, 0.5)}
EIV_LAMBDAS = {
    1: ((0.25, 3.25), (0.5, 3.5), (0.75, 3.75)),
    2: ((0.25, 2.25), (0.75, 2.75), (1.25, 3.25)),
    3: ((0.25, 2.25), (0.75, 2.75), (1.25, 3.25)),
    4: ((0.5, 0.5), (1.0, 1.0), (1.5, 1.5)),
}


@dataclass(frozen=True)
class EivScenario:
    """``Z ~ N(mu_z, var_z)``, ``X = Z + e``, ``Y = phi + lambda_k Z + f`` with ``e, f ~ N(0, sigma2)``."""

    lambdas: tuple = (0.25, 2.25)
    mu_z: float = 0.0
    var_z: float = 0.5
    sigma2: float = 1.0
    phi: float = 1.0
    N: int = 100_000
    fractions: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(l) for l in self.lambdas))
        if not self.var_z > 0 or not self.sigma2 > 0:
            raise ContractViolation("var_z and sigma2 must be positive")
        if not self.lambdas:
            raise ContractViolation("need at least one block")
        if self.fractions is None:
            K = len(self.lambdas)
            object.__setattr__(self, "fractions", tuple([1.0 / K] * K))
        else:
            object.__setattr__(self, "fractions", tuple(float(g) for g in self.fractions))
        if len(self.fractions) != len(self.lambdas) or abs(sum(self.fractions) - 1.0) > 1e-12:
            raise ContractViolation("fractions must match the blocks and sum to 1")

    @classmethod
    def reference(cls, scenario: int, lambdas=None, **kw) -> "EivScenario":
        mu, var = EIV_SCENARIOS[scenario]
        if lambdas is None:
            lambdas = EIV_LAMBDAS[scenario][0]
        return cls(lambdas=tuple(lambdas), mu_z=mu, var_z=var, **kw)

    @property
    def K(self) -> int:
        return len(self.lambdas)

    def block_sizes(self) -> list:
        """Integer block sizes summing to N, proportional to the fractions."""
        raw = [g * self.N for g in self.fractions]
        sizes = [int(np.floor(r)) for r in raw]
        for i in np.argsort([s - r for s, r in zip(sizes, raw)])[: self.N - sum(sizes)]:
            sizes[i] += 1
        return sizes

    def to_dict(self) -> dict:
        return {
            "lambdas": list(self.lambdas),
            "mu_z": self.mu_z,
            "var_z": self.var_z,
            "sigma2": self.sigma2,
            "phi": self.phi,
            "N": self.N,
            "fractions": list(self.fractions),
        }


def eiv_block_asymptotics(scn: EivScenario) -> list:
    """Analytic ``(J, Sigma)`` per block for the EIV M-function.

    With ``s = sigma2 (1 + lambda^2)``, ``v = var Z`` and ``m2 = E Z^2``:
    ``J = v / (s m2)`` and ``Sigma = v / (s m2) + mu^2 sigma2^2 / (m2^2 s^2)``.
    """
    v = scn.var_z
    m2 = v + scn.mu_z**2
    out = []
    for lam, g in zip(scn.lambdas, scn.fractions):
        s = scn.sigma2 * (1.0 + lam**2)
        J = v / (s * m2)
        Sigma = J + scn.mu_z**2 * scn.sigma2**2 / (m2**2 * s**2)
        out.append(BlockAsymptotics(J=[[J]], Sigma=[[Sigma]], weight=g))
    return out


@dataclass(frozen=True)
class EivVariances:
    """``N * Var`` of the full, SaC and WD estimators and ``ARE = Var_sac / Var_full``."""

    full: float
    sac: float
    wd: float
    are: float
    scenario: EivScenario = field(repr=False, default=None)

    def sd(self, kind: str) -> float:
        """Asymptotic standard deviation at the scenario's N."""
        return float(np.sqrt(getattr(self, kind) / self.scenario.N))

    def to_dict(self) -> dict:
        out = {"N_var_full": self.full, "N_var_sac": self.sac, "N_var_wd": self.wd, "ARE": self.are}
        if self.scenario is not None:
            out["scenario"] = self.scenario.to_dict()
            out["sd_x100"] = {k: 100 * self.sd(k) for k in ("full", "sac", "wd")}
        return out


def eiv_asymptotic_variances(scn: EivScenario) -> EivVariances:
    """Harmonic/arithmetic-mean formulas for the EIV variances plus the WD variance.

    With ``h_k = 1 / (1 + lambda_k^2)``, ``a = sigma2 E Z^2 / var Z`` and
    ``b = sigma2^2 (E Z)^2 / var(Z)^2``::

        N Var_full = a / mean(h) + b mean(h^2) / mean(h)^2
        N Var_sac  = a mean(1/h) + b

    where means are weighted by the block fractions.
    """
    g = np.asarray(scn.fractions)
    h = 1.0 / (1.0 + np.asarray(scn.lambdas) ** 2)
    m2 = scn.var_z + scn.mu_z**2
    a = scn.sigma2 * m2 / scn.var_z
    b = scn.sigma2**2 * scn.mu_z**2 / scn.var_z**2
    mh = float(g @ h)
    full = a / mh + b * float(g @ h**2) / mh**2
    sac = a * float(g @ (1.0 / h)) + b
    wd = float(wd_gmm_asy_var(eiv_block_asymptotics(scn))[0, 0])
    return EivVariances(full=full, sac=sac, wd=wd, are=sac / full, scenario=scn)


# ---------------------------------------------------------------------------
# Bartlett identity probe


def bartlett_residual(
    model: BlockModel,
    theta,
    sampler: Callable[[np.random.Generator, int], np.ndarray],
    n_mc: int,
    seed: int = 0,
):
    """Monte Carlo check of ``E[psi psi^T] = gamma E[grad^2 M]``.

    ``sampler(rng, n)`` returns ``n`` data rows drawn at ``theta``. Returns
    ``(gamma_hat, residual)`` with ``gamma_hat`` the trace ratio and
    ``residual = ||E psi psi^T - gamma_hat E H||_F / ||E H||_F``.
    """
    theta = np.asarray(theta, dtype=float)
    rows = np.asarray(sampler(stream(seed, 0), int(n_mc)), dtype=float)
    scores = model.scores(rows, theta)
    outer = scores.T @ scores / rows.shape[0]
    hess = model.mean_hessian(rows[None], theta[None])[0]
    gamma = float(np.trace(outer) / np.trace(hess))
    resid = float(np.linalg.norm(outer - gamma * hess) / np.linalg.norm(hess))
    return gamma, resid
