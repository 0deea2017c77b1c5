"""Data generators for the two simulation designs.

Each block draws from its own counter-based stream keyed by
``(seed, replicate, block id)``, so a block's rows do not depend on which
other blocks are generated or in what order.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import expit

from ..asymptotics import EivScenario
from ..errors import ContractViolation
from ..models import DataBlock
from ..rng import stream

SIGMA_X = 0.75


def generate_eiv(scn: EivScenario, n_per_block: Sequence[int] = None, seed: int = 0, replicate: int = 0) -> list:
    """Rows ``(X, Y)`` with ``X = Z + e`` and ``Y = phi + lambda_k Z + f``."""
    sizes = scn.block_sizes() if n_per_block is None else [int(n) for n in n_per_block]
    if len(sizes) != scn.K or min(sizes) < 1:
        raise ContractViolation("need one positive block size per lambda")
    sd = np.sqrt(scn.sigma2)
    blocks = []
    for k, (lam, n) in enumerate(zip(scn.lambdas, sizes), start=1):
        rng = stream(seed, replicate, k)
        z = rng.normal(scn.mu_z, np.sqrt(scn.var_z), n)
        noise = rng.normal(0.0, sd, (n, 2))
        blocks.append(DataBlock(k, np.column_stack([z + noise[:, 0], scn.phi + lam * z + noise[:, 1]])))
    return blocks


def logistic_lambdas(K: int, p2: int) -> np.ndarray:
    """``lambda_{k,j} = (-1)^j 10 (1 - 2 (k-1)/(K-1))`` for k = 1..K, j = 1..p2."""
    if K < 2:
        raise ContractViolation("the heterogeneous logistic design needs K >= 2")
    k = np.arange(1, K + 1)[:, None]
    j = np.arange(1, p2 + 1)[None, :]
    return (-1.0) ** j * 10.0 * (1.0 - 2.0 * (k - 1) / (K - 1))


def generate_logistic_blocks(thetas, n, seed: int = 0, replicate: int = 0, sigma_x: float = SIGMA_X) -> list:
    """Logistic blocks with ``X ~ N(0, sigma_x^2 I)`` and ``P(Y=1|X) = expit(X^T theta_k)``.

    ``thetas`` has one row per block; ``n`` is a common size or one size per block.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    K, p = thetas.shape
    sizes = np.broadcast_to(np.asarray(n, dtype=int), (K,))
    blocks = []
    for k in range(1, K + 1):
        rng = stream(seed, replicate, k)
        x = rng.normal(0.0, sigma_x, (sizes[k - 1], p))
        u = rng.random(sizes[k - 1])
        y = (u < expit(x @ thetas[k - 1])).astype(float)
        blocks.append(DataBlock(k, np.column_stack([x, y])))
    return blocks


def generate_logistic(K: int, n, p2: int, phi: float = 1.0, seed: int = 0, replicate: int = 0, sigma_x: float = SIGMA_X) -> list:
    """The heterogeneous logistic design with ``theta_k = (phi, lambda_k)``."""
    lams = logistic_lambdas(K, p2)
    thetas = np.column_stack([np.full(K, float(phi)), lams])
    return generate_logistic_blocks(thetas, n, seed, replicate, sigma_x)
