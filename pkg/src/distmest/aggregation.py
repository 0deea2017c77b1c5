"""Coordinator-side combination of block summaries.

Everything here consumes ``BlockSummary``-like records only; the coordinator
never sees data rows. Every fold sorts its inputs by block id first, so the
result does not depend on the order in which summaries arrived.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammainc, gammaincc, gammaln

from .errors import AggregationError, ContractViolation
from .models import ParameterBox

PD_TOL = 1e-10
KINDS = ("SaC", "WD", "dSaC", "dWD", "SAVGM", "full")


def _arr(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float))


def _mat(x, p1: int) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(p1, p1)


def _is_pd(mat: Optional[np.ndarray]) -> bool:
    if mat is None or not np.all(np.isfinite(mat)):
        return False
    scale = max(1.0, float(np.max(np.abs(mat))))
    if np.max(np.abs(mat - mat.T)) > PD_TOL * scale:
        return False
    return bool(np.linalg.eigvalsh(0.5 * (mat + mat.T)).min() > PD_TOL)


@dataclass(frozen=True)
class HalfSummary:
    """One half of a split block: its size, debiased estimate and ``H^-1``."""

    n: int
    phi: np.ndarray
    H_inv: np.ndarray
    degraded: bool = False

    def __post_init__(self):
        phi = _arr(self.phi)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "H_inv", _mat(self.H_inv, phi.size))
        if not self.degraded and not (_is_pd(self.H_inv) and np.all(np.isfinite(phi))):
            object.__setattr__(self, "degraded", True)


@dataclass(frozen=True)
class BlockSummary:
    """What block ``k`` sends to the coordinator.

    ``phi`` is the raw local estimate, or the bias-corrected one when
    ``debiased`` is set. ``H_inv`` is ``H_hat^-1`` for the common block and
    may be absent for summaries that feed only the SaC point estimate.
    ``halves`` carries the two split-sample twins used by dWD. A summary
    whose ``H_inv`` is not symmetric positive definite (within 1e-10) is
    marked ``degraded`` automatically.
    """

    k: int
    n: int
    phi: np.ndarray
    H_inv: Optional[np.ndarray] = None
    debiased: bool = False
    halves: Optional[tuple] = None
    degraded: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ContractViolation(f"block {self.k}: n must be positive")
        phi = _arr(self.phi)
        object.__setattr__(self, "phi", phi)
        if self.H_inv is not None:
            object.__setattr__(self, "H_inv", _mat(self.H_inv, phi.size))
        if self.halves is not None:
            halves = tuple(h if isinstance(h, HalfSummary) else HalfSummary(**h) for h in self.halves)
            if len(halves) != 2:
                raise ContractViolation("a split summary needs exactly two halves")
            object.__setattr__(self, "halves", halves)
        bad = not np.all(np.isfinite(phi))
        if self.H_inv is not None and not _is_pd(self.H_inv):
            bad = True
        if self.halves is not None and any(h.degraded for h in self.halves):
            bad = True
        if bad:
            object.__setattr__(self, "degraded", True)

    @property
    def p1(self) -> int:
        return self.phi.size

    def scalar_count(self) -> int:
        """Number of float scalars this summary puts on the wire."""
        count = self.phi.size
        if self.halves is not None:
            return sum(h.phi.size + h.H_inv.size for h in self.halves)
        if self.H_inv is not None:
            count += self.H_inv.size
        return count

    def to_dict(self) -> dict:
        out = {
            "k": self.k,
            "n": self.n,
            "phi": self.phi.tolist(),
            "debiased": self.debiased,
            "degraded": self.degraded,
        }
        if self.H_inv is not None:
            out["H_inv"] = self.H_inv.tolist()
        if self.halves is not None:
            out["halves"] = [
                {"n": h.n, "phi": h.phi.tolist(), "H_inv": h.H_inv.tolist(), "degraded": h.degraded}
                for h in self.halves
            ]
        return out


@dataclass(frozen=True)
class SavgmSummary:
    """Full-block and subsample estimates of the whole block parameter."""

    k: int
    n: int
    theta: np.ndarray
    theta_r: np.ndarray
    p1: int = 1

    def __post_init__(self):
        object.__setattr__(self, "theta", _arr(self.theta))
        object.__setattr__(self, "theta_r", _arr(self.theta_r))
        if self.theta.shape != self.theta_r.shape:
            raise ContractViolation(f"block {self.k}: theta and theta_r differ in length")

    def scalar_count(self) -> int:
        return self.theta.size + self.theta_r.size


@dataclass(frozen=True)
class AggregateEstimate:
    """A combined estimate of the common parameter.

    ``standardizer`` is the matrix ``S`` of the chi-square statistic
    ``(phi_hat - phi)^T S (phi_hat - phi)``; it is ``None`` for estimators
    without a confidence region.
    """

    phi: np.ndarray
    kind: str
    N: int
    K: int
    standardizer: Optional[np.ndarray] = None
    fallback_used: bool = False
    weights: Optional[tuple] = None
    excluded: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown estimator kind {self.kind!r}")
        object.__setattr__(self, "phi", _arr(self.phi))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "phi": self.phi.tolist(),
            "N": self.N,
            "K": self.K,
            "standardizer": None if self.standardizer is None else np.asarray(self.standardizer).tolist(),
            "fallback_used": self.fallback_used,
            "excluded": list(self.excluded),
        }


@dataclass(frozen=True)
class ConfidenceRegion:
    """Ellipsoid ``{phi : (center - phi)^T shape (center - phi) <= threshold}``."""

    center: np.ndarray
    shape: np.ndarray
    threshold: float
    alpha: float

    def statistic(self, phi) -> float:
        diff = self.center - _arr(phi)
        return float(diff @ self.shape @ diff)

    def contains(self, phi) -> bool:
        return self.statistic(phi) <= self.threshold

    @property
    def half_widths(self) -> np.ndarray:
        """Half-lengths of the ellipsoid's shadow on each coordinate axis."""
        return np.sqrt(self.threshold * np.diag(np.linalg.inv(self.shape)))

    @property
    def interval(self) -> tuple:
        """Endpoints for the first coordinate (the exact interval when p1 = 1)."""
        h = self.half_widths[0]
        return float(self.center[0] - h), float(self.center[0] + h)

    @property
    def width(self) -> float:
        """Mean over coordinates of the projected widths; the interval length when p1 = 1."""
        return float(np.mean(2.0 * self.half_widths))

    def to_dict(self) -> dict:
        out = {
            "center": self.center.tolist(),
            "shape": self.shape.tolist(),
            "threshold": self.threshold,
            "alpha": self.alpha,
            "width": self.width,
        }
        if self.center.size == 1:
            out["interval"] = list(self.interval)
        else:
            out["semi_axes"] = (np.sqrt(self.threshold / np.linalg.eigvalsh(self.shape))).tolist()
        return out


# ---------------------------------------------------------------------------
# chi-square quantile


def chisq_quantile(df: int, alpha: float) -> float:
    """Upper ``alpha`` quantile of the chi-square distribution with ``df`` d.o.f.

    Newton iterations on ``Q(df/2, x/2) = alpha`` (regularized upper
    incomplete gamma; the lower one for alpha > 1/2), started from the
    Wilson-Hilferty approximation.
    """
    if df < 1 or not 0 < alpha < 1:
        raise ContractViolation("need df >= 1 and 0 < alpha < 1")
    a = 0.5 * df
    z = NormalDist().inv_cdf(1.0 - alpha)
    c = 2.0 / (9.0 * df)
    x = df * max(1.0 - c + z * math.sqrt(c), 0.05) ** 3
    # work on the smaller tail to avoid cancellation near alpha = 1
    lower_tail = alpha > 0.5
    for _ in range(100):
        f = (1.0 - alpha) - gammainc(a, 0.5 * x) if lower_tail else gammaincc(a, 0.5 * x) - alpha
        # d/dx Q(a, x/2) = -density of chi2_df at x
        log_dens = (a - 1.0) * math.log(0.5 * x) - 0.5 * x - gammaln(a) - math.log(2.0)
        dens = math.exp(log_dens)
        if dens == 0.0:
            break
        step = f / dens
        x_new = x + step
        if x_new <= 0:
            x_new = 0.5 * x
        if abs(x_new - x) <= 1e-15 * x:
            x = x_new
            break
        x = x_new
    return float(x)


# ---------------------------------------------------------------------------
# folds


def _sorted(summaries):
    out = sorted(summaries, key=lambda s: s.k)
    if not out:
        raise AggregationError("no summaries to aggregate")
    dims = {s.p1 if isinstance(s, SavgmSummary) else s.phi.size for s in out}
    if len(dims) != 1:
        raise ContractViolation("summaries disagree on the common dimension")
    ks = [s.k for s in out]
    if len(set(ks)) != len(ks):
        raise ContractViolation("duplicate block ids among summaries")
    return out


def _size_weighted(phis, ns) -> np.ndarray:
    ns = np.asarray(ns, dtype=float)
    return (ns[:, None] * np.asarray(phis)).sum(axis=0) / ns.sum()


def _sac_standardizer(summaries, N):
    """``N^2 (sum n_k H_k)^-1``, or None when some ``H_inv`` is unavailable."""
    if any(not _is_pd(s.H_inv) for s in summaries):
        return None
    total = sum(s.n * np.linalg.inv(s.H_inv) for s in summaries)
    return N**2 * np.linalg.inv(total)


def _common_box(box):
    if box is None:
        return None
    if isinstance(box, ParameterBox):
        return box.common_lower, box.common_upper
    lo, hi = box
    return _arr(lo), _arr(hi)


def _inside(phi, box) -> bool:
    if box is None:
        return bool(np.all(np.isfinite(phi)))
    lo, hi = box
    return bool(np.all(np.isfinite(phi)) and np.all(phi >= lo) and np.all(phi <= hi))


def _mean_of(summaries, kind: str) -> AggregateEstimate:
    summaries = _sorted(summaries)
    N = sum(s.n for s in summaries)
    return AggregateEstimate(
        phi=_size_weighted([s.phi for s in summaries], [s.n for s in summaries]),
        kind=kind,
        N=N,
        K=len(summaries),
        standardizer=_sac_standardizer(summaries, N),
    )


def sac(summaries: Sequence[BlockSummary]) -> AggregateEstimate:
    """Sample-size weighted average ``N^-1 sum n_k phi_k``."""
    return _mean_of(summaries, "SaC")


def dsac(summaries: Sequence[BlockSummary]) -> AggregateEstimate:
    """SaC applied to bias-corrected local estimates."""
    return _mean_of(summaries, "dSaC")


def _weighted(ns, h_invs, phis):
    """Return ``(A, A^-1 sum n_k H_k^-1 phi_k, [A^-1 n_k H_k^-1])`` with ``A = sum n_k H_k^-1``."""
    ns = np.asarray(ns, dtype=float)
    h_invs = np.asarray(h_invs)
    scaled = ns[:, None, None] * h_invs
    a = scaled.sum(axis=0)
    a_inv = np.linalg.inv(a)
    weights = a_inv[None] @ scaled
    phi = (weights @ np.asarray(phis)[..., None])[..., 0].sum(axis=0)
    return a, phi, weights


def wd_weights(summaries: Sequence[BlockSummary]) -> list:
    """Matrix weights ``(sum n_j H_j^-1)^-1 n_k H_k^-1`` for the non-degraded blocks."""
    good = [s for s in _sorted(summaries) if not s.degraded]
    if not good:
        raise AggregationError("every summary is degraded")
    _, _, w = _weighted([s.n for s in good], [s.H_inv for s in good], [s.phi for s in good])
    return list(w)


def wd(summaries: Sequence[BlockSummary], common_box=None) -> AggregateEstimate:
    """Weighted distributed estimate with the common-box fallback to SaC.

    Degraded summaries are left out of the weighted combination. If the
    weighted estimate falls outside the common box, the SaC value over all
    blocks is returned instead and ``fallback_used`` is set.
    """
    summaries = _sorted(summaries)
    if any(s.H_inv is None for s in summaries):
        raise ContractViolation("WD needs H_inv from every block")
    good = [s for s in summaries if not s.degraded]
    if not good:
        raise AggregationError("every summary is degraded; no weighted combination possible")
    a, phi, weights = _weighted([s.n for s in good], [s.H_inv for s in good], [s.phi for s in good])
    N = sum(s.n for s in summaries)
    fallback = not _inside(phi, _common_box(common_box))
    if fallback:
        phi = _size_weighted([s.phi for s in summaries], [s.n for s in summaries])
    return AggregateEstimate(
        phi=phi,
        kind="WD",
        N=N,
        K=len(summaries),
        standardizer=a,
        fallback_used=fallback,
        weights=tuple(weights),
        excluded=tuple(s.k for s in summaries if s.degraded),
    )


def dwd(summaries: Sequence[BlockSummary], common_box=None) -> AggregateEstimate:
    """Debiased WD from split summaries.

    For split ``s`` the weights come from the ``s``-th halves and multiply
    the bias-corrected estimates of the other halves. Each cross-weighted
    combination falls back to the size-weighted average of the same
    estimates when it leaves the common box. The result is the mean of the
    two combinations. The standardizer is the mean over splits of
    ``sum n_k H_{k,s}^-1`` with the full block sizes ``n_k``.
    """
    summaries = _sorted(summaries)
    if any(s.halves is None for s in summaries):
        raise ContractViolation("dWD needs split summaries from every block")
    good = [s for s in summaries if not s.degraded]
    if not good:
        raise AggregationError("every split summary is degraded; no weighted combination possible")
    box = _common_box(common_box)
    parts, fallbacks, shapes, all_weights = [], [], [], []
    for s in (0, 1):
        other = 1 - s
        ns = [b.halves[s].n for b in good]
        _, phi, weights = _weighted(ns, [b.halves[s].H_inv for b in good], [b.halves[other].phi for b in good])
        fell = not _inside(phi, box)
        if fell:
            phi = _size_weighted([b.halves[other].phi for b in summaries], [b.halves[other].n for b in summaries])
        parts.append(phi)
        fallbacks.append(fell)
        all_weights.append(tuple(weights))
        shapes.append(sum(b.n * b.halves[s].H_inv for b in good))
    return AggregateEstimate(
        phi=0.5 * (parts[0] + parts[1]),
        kind="dWD",
        N=sum(b.n for b in summaries),
        K=len(summaries),
        standardizer=0.5 * (shapes[0] + shapes[1]),
        fallback_used=any(fallbacks),
        weights=tuple(all_weights),
        excluded=tuple(b.k for b in summaries if b.degraded),
    )


def savgm_extrapolate(theta, theta_r, r: float) -> np.ndarray:
    """``(theta - r * theta_r) / (1 - r)``."""
    if not 0 < r < 1:
        raise ContractViolation("subsampling rate must lie in (0, 1)")
    return (np.asarray(theta, dtype=float) - r * np.asarray(theta_r, dtype=float)) / (1.0 - r)


def savgm(summaries: Sequence[SavgmSummary], r: float) -> AggregateEstimate:
    """Subsampled average mixture: per-block extrapolation, then SaC on the common part."""
    summaries = _sorted(summaries)
    if not 0 < r < 1:
        raise ContractViolation("subsampling rate must lie in (0, 1)")
    for s in summaries:
        if math.floor(r * s.n) < s.theta.size:
            raise ContractViolation(f"block {s.k}: floor(r*n)={math.floor(r * s.n)} < p={s.theta.size}")
    p1 = summaries[0].p1
    bars = [savgm_extrapolate(s.theta, s.theta_r, r)[:p1] for s in summaries]
    return AggregateEstimate(
        phi=_size_weighted(bars, [s.n for s in summaries]),
        kind="SAVGM",
        N=sum(s.n for s in summaries),
        K=len(summaries),
    )


def confidence_region(est: AggregateEstimate, alpha: float) -> ConfidenceRegion:
    """Chi-square ellipsoid around ``est.phi`` at level ``1 - alpha``."""
    if not 0 < alpha < 1:
        raise ContractViolation("alpha must lie in (0, 1)")
    shape = est.standardizer
    if shape is None:
        raise AggregationError(f"{est.kind} estimate carries no standardizer")
    shape = np.asarray(shape, dtype=float)
    if not _is_pd(shape):
        raise AggregationError(f"{est.kind} standardizer is not positive definite")
    return ConfidenceRegion(
        center=est.phi.copy(),
        shape=0.5 * (shape + shape.T),
        threshold=chisq_quantile(est.phi.size, alpha),
        alpha=float(alpha),
    )
