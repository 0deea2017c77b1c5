"""Per-block M-estimation: Newton fits, sandwich covariance, bias correction.

The public single-block functions follow the worker pipeline one step at a
time. ``analyze_blocks`` runs the same pipeline for many blocks at once by
stacking equal-sized blocks and solving them in lockstep.
"""

from __future__ import annotations

import math
import time
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractViolation, FitFailure
from .models import BlockModel, DataBlock, ParameterBox, ParameterVector
from .rng import stream

EPS = np.finfo(float).eps

SPLIT_STREAM = 1
SUBSAMPLE_STREAM = 2


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-10
    max_iter: int = 100
    shrink: float = 0.5
    armijo: float = 1e-4
    max_halvings: int = 60
    # None uses the model's own starting point
    init: Optional[Callable[[np.ndarray], np.ndarray]] = None
    record_history: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ContractViolation("tolerance must be positive")
        if self.max_iter < 1:
            raise ContractViolation("max_iter must be at least 1")
        if not 0 < self.shrink < 1 or not 0 < self.armijo < 1:
            raise ContractViolation("backtracking parameters must lie in (0, 1)")


@dataclass(frozen=True)
class LocalFit:
    """Result of the worker-side computations on one block.

    ``H_hat_full`` is the un-scaled sandwich matrix, so the covariance of
    ``theta_hat`` is approximately ``H_hat_full / n``. ``status`` is one of
    ``converged``, ``boundary`` (box-constrained optimum on the boundary),
    ``max_iter`` or ``stalled``.
    """

    theta_hat: np.ndarray
    n: int
    p1: int
    iterations: int
    grad_norm: float
    status: str
    block_id: int = 0
    H_hat_full: Optional[np.ndarray] = None
    bias_hat: Optional[np.ndarray] = None
    theta_bc: Optional[np.ndarray] = None
    bias_applied: bool = False
    flags: tuple = ()
    history: Optional[tuple] = None

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def usable(self) -> bool:
        """True for interior roots and box-constrained boundary optima."""
        return self.status in ("converged", "boundary")

    @property
    def H_hat(self) -> Optional[np.ndarray]:
        if self.H_hat_full is None:
            return None
        return self.H_hat_full[: self.p1, : self.p1]

    @property
    def parameter(self) -> ParameterVector:
        return ParameterVector.from_flat(self.theta_hat, self.p1)

    @property
    def phi_hat(self) -> np.ndarray:
        return self.theta_hat[: self.p1]

    @property
    def phi_bc(self) -> Optional[np.ndarray]:
        return None if self.theta_bc is None else self.theta_bc[: self.p1]

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "block_id": self.block_id,
            "n": self.n,
            "p1": self.p1,
            "theta_hat": arr(self.theta_hat),
            "H_hat_full": arr(self.H_hat_full),
            "H_hat": arr(self.H_hat),
            "bias_hat": arr(self.bias_hat),
            "theta_bc": arr(self.theta_bc),
            "bias_applied": self.bias_applied,
            "status": self.status,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LocalFit":
        def arr(a):
            return None if a is None else np.asarray(a, dtype=float)

        return cls(
            theta_hat=arr(data["theta_hat"]),
            n=int(data["n"]),
            p1=int(data["p1"]),
            iterations=int(data["iterations"]),
            grad_norm=float(data["grad_norm"]),
            status=data["status"],
            block_id=int(data.get("block_id", 0)),
            H_hat_full=arr(data.get("H_hat_full")),
            bias_hat=arr(data.get("bias_hat")),
            theta_bc=arr(data.get("theta_bc")),
            bias_applied=bool(data.get("bias_applied", False)),
            flags=tuple(data.get("flags", ())),
        )


@dataclass(frozen=True)
class SplitPair:
    first: DataBlock
    second: DataBlock

    def __iter__(self):
        return iter((self.first, self.second))


# ---------------------------------------------------------------------------
# solver


def _projected_gradient(theta, grad, lower, upper):
    at_lower = (theta <= lower) & (grad > 0)
    at_upper = (theta >= upper) & (grad < 0)
    return np.where(at_lower | at_upper, 0.0, grad), at_lower | at_upper


def _ridge_eps(mat):
    p = mat.shape[-1]
    tr = np.abs(np.trace(mat, axis1=-2, axis2=-1))
    return 1e-8 * np.maximum(tr, 1e-300) / p


def _newton_directions(hess, grad, fixed):
    """Newton directions on the free coordinates, with ridge fallback.

    Returns the directions and a boolean mask of problems where a ridge (or,
    in the last resort, steepest descent) was needed.
    """
    m, p = grad.shape
    eye = np.eye(p)
    free = ~fixed
    hmask = free[:, :, None] & free[:, None, :]
    h = np.where(hmask, hess, 0.0) + np.where(fixed[:, :, None] & (eye > 0), 1.0, 0.0)
    g = np.where(free, grad, 0.0)
    out = np.zeros_like(g)
    ridged = np.zeros(m, dtype=bool)
    pending = np.arange(m)
    lam = np.zeros(m)
    for attempt in range(12):
        hh = h[pending] + lam[pending, None, None] * eye
        ok = np.ones(pending.size, dtype=bool)
        try:
            chol = np.linalg.cholesky(hh)
        except np.linalg.LinAlgError:
            chol = None
        if chol is None or not np.all(np.isfinite(chol)):
            ok[:] = False
            for i, idx in enumerate(pending):
                try:
                    np.linalg.cholesky(hh[i])
                    ok[i] = True
                except np.linalg.LinAlgError:
                    pass
        good = pending[ok]
        if good.size:
            out[good] = -np.linalg.solve(h[good] + lam[good, None, None] * eye, g[good][..., None])[..., 0]
        pending = pending[~ok]
        if pending.size == 0:
            break
        ridged[pending] = True
        base = _ridge_eps(h[pending])
        lam[pending] = np.where(lam[pending] == 0, base, lam[pending] * 100.0)
    if pending.size:
        out[pending] = -g[pending]
    return np.where(free, out, 0.0), ridged


def _mean_values(model, rows, theta):
    with np.errstate(all="ignore"):
        vals = model.values(rows, theta).mean(axis=-1)
    return np.where(np.isfinite(vals), vals, np.inf)


def _newton(model: BlockModel, rows, theta0, box: ParameterBox, opts: SolverOptions):
    """Projected Newton with Armijo backtracking on stacked problems."""
    m = rows.shape[0]
    lower, upper = box.lower, box.upper
    theta = box.clip(np.array(theta0, dtype=float))
    iters = np.zeros(m, dtype=int)
    status = np.array(["max_iter"] * m, dtype=object)
    gnorm = np.full(m, np.inf)
    ridged = np.zeros(m, dtype=bool)
    active = np.arange(m)
    f = _mean_values(model, rows, theta)
    history = [f.copy()] if opts.record_history else None
    for it in range(opts.max_iter + 1):
        r_act = rows[active]
        t_act = theta[active]
        with np.errstate(all="ignore"):
            grad = model.scores(r_act, t_act).mean(axis=-2)
        pg, fixed = _projected_gradient(t_act, grad, lower, upper)
        norms = np.linalg.norm(pg, axis=-1)
        gnorm[active] = norms
        bad = ~np.all(np.isfinite(grad), axis=-1)
        status[active[bad]] = "stalled"
        done = (norms <= opts.tol) & ~bad
        status[active[done]] = "converged"
        keep = ~(done | bad)
        active, r_act, t_act, grad, fixed = active[keep], r_act[keep], t_act[keep], grad[keep], fixed[keep]
        if active.size == 0 or it == opts.max_iter:
            break
        iters[active] += 1
        with np.errstate(all="ignore"):
            hess = model.mean_hessian(r_act, t_act)
        step, used_ridge = _newton_directions(hess, grad, fixed)
        ridged[active] |= used_ridge
        f0 = f[active]
        t = np.ones(active.size)
        accepted = np.zeros(active.size, dtype=bool)
        cand_all = t_act.copy()
        f_new = f0.copy()
        pending = np.arange(active.size)
        for _ in range(opts.max_halvings):
            cand = np.clip(t_act[pending] + t[pending, None] * step[pending], lower, upper)
            fc = _mean_values(model, r_act[pending], cand)
            slope = np.einsum("ij,ij->i", grad[pending], cand - t_act[pending])
            slack = 10.0 * EPS * (np.abs(f0[pending]) + 1.0)
            ok = np.isfinite(fc) & (fc <= f0[pending] + opts.armijo * slope + slack)
            idx = pending[ok]
            cand_all[idx] = cand[ok]
            f_new[idx] = fc[ok]
            accepted[idx] = True
            pending = pending[~ok]
            if pending.size == 0:
                break
            t[pending] *= opts.shrink
        theta[active] = cand_all
        f[active] = f_new
        if pending.size:
            status[active[pending]] = "stalled"
            active = np.delete(active, pending)
        if history is not None:
            history.append(f.copy())
    at_bound = np.any((theta <= lower) | (theta >= upper), axis=-1)
    status = np.where((status == "converged") & at_bound, "boundary", status)
    if history is not None:
        history = np.array(history)
    return theta, iters, gnorm, status, ridged, history


# ---------------------------------------------------------------------------
# stacked building blocks


def _stack(blocks: Sequence[DataBlock]) -> np.ndarray:
    return np.stack([b.rows for b in blocks])


def _inverse_with_ridge(mats):
    """Invert stacked matrices, adding ``eps*I`` where they are singular."""
    p = mats.shape[-1]
    finite = np.all(np.isfinite(mats), axis=(-2, -1))
    safe = np.where(finite[:, None, None], mats, np.eye(p))
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(safe)
    ridged = ~finite | ~np.isfinite(cond) | (cond > 1.0 / (1e3 * EPS))
    safe = safe + np.where(ridged, _ridge_eps(safe), 0.0)[:, None, None] * np.eye(p)
    try:
        out = np.linalg.inv(safe)
    except np.linalg.LinAlgError:
        out = np.full_like(safe, np.nan)
        for i, a in enumerate(safe):
            try:
                out[i] = np.linalg.inv(a)
            except np.linalg.LinAlgError:
                pass
    out[~finite] = np.nan
    return out, ridged


def _sandwich_stack(model: BlockModel, rows, theta):
    n = rows.shape[-2]
    scores = model.scores(rows, theta)
    meat = np.einsum("mni,mnj->mij", scores, scores) / n
    bread = model.mean_hessian(rows, theta)
    binv, ridged = _inverse_with_ridge(bread)
    full = binv @ meat @ np.swapaxes(binv, -1, -2)
    return 0.5 * (full + np.swapaxes(full, -1, -2)), ridged


def _bias_stack(model: BlockModel, rows, theta, centered: bool = False):
    n = rows.shape[-2]
    bread = model.mean_hessian(rows, theta)
    q, ridged = _inverse_with_ridge(-bread)
    scores = model.scores(rows, theta)
    d = np.einsum("mij,mnj->mni", q, scores)
    vd = model.hessian_apply(rows, theta, d).mean(axis=-2)
    if centered:
        vd = vd - np.einsum("mij,mj->mi", bread, d.mean(axis=-2))
    dd = np.einsum("mni,mnj->mij", d, d) / n
    h3 = model.mean_third_apply(rows, theta, dd)
    return np.einsum("mij,mj->mi", q, vd + 0.5 * h3), ridged


def _debias_stack(theta, bias, n, box: ParameterBox):
    cand = theta - bias / n
    inside = np.all(np.isfinite(cand), axis=-1) & np.all(cand >= box.lower, axis=-1) & np.all(cand <= box.upper, axis=-1)
    return np.where(inside[:, None], cand, theta), inside


# ---------------------------------------------------------------------------
# public per-block operations


def _initial(model, rows, opts):
    if opts.init is not None:
        return np.asarray(opts.init(rows), dtype=float)
    return model.initial_theta(rows)


def _check_block(block: DataBlock, model: BlockModel):
    if block.d != model.d:
        raise ContractViolation(f"block {block.id}: rows have {block.d} columns, model expects {model.d}")


def fit_local(block: DataBlock, model: BlockModel, box: ParameterBox, opts: SolverOptions = SolverOptions()) -> LocalFit:
    """Minimise the empirical M-function of one block inside ``box``."""
    _check_block(block, model)
    if block.n < model.p:
        raise ContractViolation(f"block {block.id}: n={block.n} < p={model.p}")
    rows = block.rows[None]
    theta, iters, gnorm, status, ridged, hist = _newton(model, rows, _initial(model, rows, opts), box, opts)
    flags = ("ridge",) if ridged[0] else ()
    return LocalFit(
        theta_hat=theta[0],
        n=block.n,
        p1=model.p1,
        iterations=int(iters[0]),
        grad_norm=float(gnorm[0]),
        status=str(status[0]),
        block_id=block.id,
        flags=flags,
        history=None if hist is None else tuple(hist[:, 0]),
    )


def sandwich_covariance(block: DataBlock, model: BlockModel, theta_hat):
    """Return ``(H_hat_full, H_hat)``; see ``LocalFit`` for the scaling."""
    _check_block(block, model)
    theta = np.asarray(theta_hat, dtype=float).reshape(1, -1)
    full, _ = _sandwich_stack(model, block.rows[None], theta)
    return full[0], full[0][: model.p1, : model.p1]


def bias_estimate(block: DataBlock, model: BlockModel, theta_hat, centered: bool = False) -> np.ndarray:
    """Empirical second-order bias ``B_hat`` (the bias of theta_hat is about ``B_hat / n``).

    With ``centered=True`` the per-row Hessians are centred by their mean
    before multiplying the influence terms ``d_i``.
    """
    _check_block(block, model)
    theta = np.asarray(theta_hat, dtype=float).reshape(1, -1)
    bias, _ = _bias_stack(model, block.rows[None], theta, centered)
    return bias[0]


def debias_local(theta_hat, bias_hat, n_k: int, box: ParameterBox):
    """Subtract ``bias_hat / n_k`` when the result stays inside the box."""
    theta = np.asarray(theta_hat, dtype=float).reshape(1, -1)
    bias = np.asarray(bias_hat, dtype=float).reshape(1, -1)
    if theta.shape != bias.shape or theta.shape[1] != box.p:
        raise ContractViolation("theta, bias and box dimensions differ")
    out, applied = _debias_stack(theta, bias, n_k, box)
    return out[0], bool(applied[0])


def split_halves(block: DataBlock, seed: int, p: Optional[int] = None) -> SplitPair:
    """Split a block into halves of sizes ceil(n/2) and floor(n/2).

    The permutation depends only on ``seed`` and the block id. When ``p`` is
    given each half must hold at least ``p`` rows.
    """
    need = 2 * (p if p is not None else 1)
    if block.n < need:
        raise ContractViolation(f"block {block.id}: n={block.n} too small to split (need {need})")
    perm = stream(seed, block.id, SPLIT_STREAM).permutation(block.n)
    cut = math.ceil(block.n / 2)
    return SplitPair(DataBlock(block.id, block.rows[perm[:cut]]), DataBlock(block.id, block.rows[perm[cut:]]))


def subsample(block: DataBlock, r: float, seed: int, p: int) -> DataBlock:
    """Draw ``floor(r * n)`` rows without replacement."""
    if not 0 < r < 1:
        raise ContractViolation("subsampling rate must lie in (0, 1)")
    size = math.floor(r * block.n)
    if size < p:
        raise ContractViolation(f"block {block.id}: floor(r*n)={size} < p={p}")
    idx = stream(seed, block.id, SUBSAMPLE_STREAM).choice(block.n, size=size, replace=False)
    return DataBlock(block.id, block.rows[idx])


# ---------------------------------------------------------------------------
# batched worker pipeline


@dataclass
class StageTimes:
    fit: float = 0.0
    sandwich: float = 0.0
    bias: float = 0.0

    def __add__(self, other):
        return StageTimes(self.fit + other.fit, self.sandwich + other.sandwich, self.bias + other.bias)


def analyze_blocks(
    blocks: Sequence[DataBlock],
    model: BlockModel,
    box: ParameterBox,
    opts: SolverOptions = SolverOptions(),
    sandwich: bool = True,
    bias: bool = True,
    centered: bool = False,
):
    """Fit, and optionally compute sandwich and bias for, every block.

    Equal-sized blocks are processed as one stack. Returns the fits in input
    order together with per-stage wall times.
    """
    groups = defaultdict(list)
    for pos, block in enumerate(blocks):
        _check_block(block, model)
        if block.n < model.p:
            raise ContractViolation(f"block {block.id}: n={block.n} < p={model.p}")
        groups[block.n].append(pos)
    fits: list = [None] * len(blocks)
    times = StageTimes()
    for n, positions in sorted(groups.items()):
        rows = _stack([blocks[i] for i in positions])
        t0 = time.perf_counter()
        theta, iters, gnorm, status, ridged, _ = _newton(model, rows, _initial(model, rows, opts), box, opts)
        times.fit += time.perf_counter() - t0
        full = bhat = tbc = None
        applied = np.zeros(len(positions), dtype=bool)
        flags = [["ridge"] if r else [] for r in ridged]
        if sandwich:
            t0 = time.perf_counter()
            full, sridge = _sandwich_stack(model, rows, theta)
            times.sandwich += time.perf_counter() - t0
            for i in np.flatnonzero(sridge):
                flags[i].append("sandwich_ridge")
        if bias:
            t0 = time.perf_counter()
            bhat, bridge = _bias_stack(model, rows, theta, centered)
            tbc, applied = _debias_stack(theta, bhat, n, box)
            times.bias += time.perf_counter() - t0
            for i in np.flatnonzero(bridge):
                flags[i].append("bias_ridge")
        for j, pos in enumerate(positions):
            fits[pos] = LocalFit(
                theta_hat=theta[j],
                n=n,
                p1=model.p1,
                iterations=int(iters[j]),
                grad_norm=float(gnorm[j]),
                status=str(status[j]),
                block_id=blocks[pos].id,
                H_hat_full=None if full is None else full[j],
                bias_hat=None if bhat is None else bhat[j],
                theta_bc=None if tbc is None else tbc[j],
                bias_applied=bool(applied[j]),
                flags=tuple(flags[j]),
            )
    return fits, times


def analyze_block(block, model, box, opts=SolverOptions(), centered=False) -> LocalFit:
    """Full worker pipeline for one block: fit, sandwich, bias, debias."""
    fits, _ = analyze_blocks([block], model, box, opts, centered=centered)
    return fits[0]


# ---------------------------------------------------------------------------
# pooled benchmark


@dataclass(frozen=True)
class PooledFit:
    phi: np.ndarray
    lambdas: tuple
    iterations: int
    grad_norm: float
    converged: bool
    at_boundary: bool = False

    def theta(self, k: int) -> np.ndarray:
        return np.concatenate([self.phi, self.lambdas[k]])


def _pooled_pieces(blocks, model, phi, lams):
    """Per-block sums of objective, score and Hessian at ``(phi, lam_k)``."""
    vals, grads, hess = [], [], []
    for block, lam in zip(blocks, lams):
        theta = np.concatenate([phi, lam])
        rows = block.rows
        with np.errstate(all="ignore"):
            vals.append(model.values(rows, theta).sum())
            grads.append(model.scores(rows, theta).sum(axis=0))
            hess.append(model.mean_hessian(rows[None], theta[None])[0] * block.n)
    return np.array(vals), np.array(grads), np.array(hess)


def _pooled_total(blocks, model, phi, lams):
    total = 0.0
    for block, lam in zip(blocks, lams):
        with np.errstate(all="ignore"):
            total += model.values(block.rows, np.concatenate([phi, lam])).sum()
    return total if np.isfinite(total) else np.inf


def fit_pooled(blocks: Sequence[DataBlock], model: BlockModel, box: ParameterBox, opts: SolverOptions = SolverOptions()) -> PooledFit:
    """Full-sample M-estimator with a common ``phi`` and per-block ``lambda_k``.

    The joint Hessian is an arrowhead: each lambda block couples only to
    phi. Newton steps eliminate the lambda blocks and solve the Schur
    complement on phi.
    """
    if not blocks:
        raise ContractViolation("need at least one block")
    p1, p = model.p1, model.p
    for block in blocks:
        _check_block(block, model)
    blocks = sorted(blocks, key=lambda b: b.id)
    starts = np.array([_initial(model, b.rows[None], opts)[0] for b in blocks])
    ns = np.array([b.n for b in blocks], dtype=float)
    N = ns.sum()
    phi = box.clip(np.concatenate([starts[:, :p1].T @ ns / N, np.zeros(p - p1)]))[:p1]
    lams = [box.clip(np.concatenate([phi, s[p1:]]))[p1:] for s in starts]
    f = _pooled_total(blocks, model, phi, lams)
    lo_phi, hi_phi = box.lower[:p1], box.upper[:p1]
    lo_lam, hi_lam = box.lower[p1:], box.upper[p1:]

    def gnorm_of(grads):
        g_phi = np.linalg.norm(grads[:, :p1].sum(axis=0)) / N
        g_lam = max((np.linalg.norm(g[p1:]) / n for g, n in zip(grads, ns)), default=0.0)
        return max(g_phi, g_lam)

    iters = 0
    converged = False
    gn = np.inf
    for iters in range(opts.max_iter + 1):
        _, grads, hess = _pooled_pieces(blocks, model, phi, lams)
        gn = gnorm_of(grads)
        if gn <= opts.tol:
            converged = True
            break
        if iters == opts.max_iter or not np.isfinite(gn):
            break
        a = hess[:, :p1, :p1].sum(axis=0)
        rhs = -grads[:, :p1].sum(axis=0)
        cinv_b, cinv_g = [], []
        for g, h in zip(grads, hess):
            c = h[p1:, p1:]
            if p > p1:
                c = c + (_ridge_eps(c) if np.linalg.cond(c) > 1e12 else 0.0) * np.eye(p - p1)
                sol = np.linalg.solve(c, np.column_stack([h[p1:, :p1], g[p1:]]))
                cb, cg = sol[:, :p1], sol[:, p1]
                a = a - h[:p1, p1:] @ cb
                rhs = rhs + h[:p1, p1:] @ cg
            else:
                cb, cg = np.zeros((0, p1)), np.zeros(0)
            cinv_b.append(cb)
            cinv_g.append(cg)
        if np.linalg.cond(a) > 1e12:
            a = a + _ridge_eps(a) * np.eye(p1)
        d_phi = np.linalg.solve(a, rhs)
        d_lams = [-(cg + cb @ d_phi) for cb, cg in zip(cinv_b, cinv_g)]
        slope = -rhs @ d_phi + sum(g[p1:] @ dl for g, dl in zip(grads, d_lams))
        t = 1.0
        for _ in range(opts.max_halvings):
            phi_c = np.clip(phi + t * d_phi, lo_phi, hi_phi)
            lams_c = [np.clip(l + t * dl, lo_lam, hi_lam) for l, dl in zip(lams, d_lams)]
            fc = _pooled_total(blocks, model, phi_c, lams_c)
            if fc <= f + opts.armijo * t * min(slope, 0.0) + 10 * EPS * (abs(f) + 1.0):
                phi, lams, f = phi_c, lams_c, fc
                break
            t *= opts.shrink
        else:
            break
    at_bound = not box.contains(np.concatenate([phi, lams[0]])) or any(
        np.any(np.concatenate([phi, l]) <= box.lower) or np.any(np.concatenate([phi, l]) >= box.upper) for l in lams
    )
    return PooledFit(phi=phi, lambdas=tuple(lams), iterations=iters, grad_norm=float(gn), converged=converged and not at_bound, at_boundary=at_bound)
