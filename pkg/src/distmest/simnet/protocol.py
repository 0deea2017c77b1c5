"""One-round federation: worker pipelines, messages and the coordinator fold.

Workers turn their ``DataBlock`` into a summary and send exactly one
``ProtocolMessage`` each. The coordinator only ever receives messages, so
the aggregation code has no path to the data rows. The pooled ``full``
estimator is the centralised benchmark and sends no messages; its
communication cost is reported as the size of the raw data.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .. import aggregation as agg
from ..aggregation import AggregateEstimate, BlockSummary, HalfSummary, SavgmSummary
from ..errors import FitFailure
from ..local import SolverOptions, analyze_blocks, fit_pooled, split_halves, subsample
from ..models import BlockModel, DataBlock, ParameterBox

ESTIMATORS = ("full", "SaC", "WD", "dSaC", "dWD", "SAVGM")
BYTES_PER_SCALAR = 8
DEFAULT_SAVGM_R = 0.05

_ALIASES = {name.lower(): name for name in ESTIMATORS}


def canonical_kind(name: str) -> str:
    try:
        return _ALIASES[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown estimator {name!r}; choose from {', '.join(ESTIMATORS)}") from None


@dataclass(frozen=True)
class ProtocolMessage:
    """A worker-to-coordinator message.

    ``payload`` is what the estimator needs for its point estimate.
    ``inference`` optionally carries ``H_hat^-1`` for estimators whose
    point estimate does not need it (SaC, dSaC); it is counted separately.
    """

    block_id: int
    kind: str
    payload: object
    inference: Optional[np.ndarray] = None
    direction: str = "worker->coordinator"

    def __post_init__(self):
        if not isinstance(self.payload, (BlockSummary, SavgmSummary)):
            raise TypeError("payloads must be block summaries")

    @property
    def byte_count(self) -> int:
        return self.payload.scalar_count() * BYTES_PER_SCALAR

    @property
    def inference_bytes(self) -> int:
        return 0 if self.inference is None else int(np.size(self.inference)) * BYTES_PER_SCALAR

    def summary(self):
        """The payload, with the inference matrix attached when present."""
        if self.inference is None:
            return self.payload
        return replace(self.payload, H_inv=self.inference)


@dataclass
class CommLog:
    kind: str
    messages: list = field(default_factory=list)
    raw_bytes: int = 0

    def record(self, message: ProtocolMessage):
        self.messages.append(message)

    @property
    def rounds(self) -> int:
        return 1 if self.messages else 0

    @property
    def total_bytes(self) -> int:
        return sum(m.byte_count for m in self.messages) + self.raw_bytes

    @property
    def inference_bytes(self) -> int:
        return sum(m.inference_bytes for m in self.messages)

    def bytes_per_block(self) -> dict:
        return {m.block_id: m.byte_count for m in self.messages}

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "messages": len(self.messages),
            "total_bytes": self.total_bytes,
            "inference_bytes": self.inference_bytes,
        }


@dataclass(frozen=True)
class ProtocolResult:
    estimate: AggregateEstimate
    log: CommLog
    seconds: float


def _inverse(mat) -> np.ndarray:
    with np.errstate(all="ignore"):
        try:
            return np.linalg.inv(mat)
        except np.linalg.LinAlgError:
            return np.full_like(mat, np.nan)


def _check_fits(fits):
    bad = [f.block_id for f in fits if not f.usable]
    if bad:
        raise FitFailure(f"local fit failed on {len(bad)} block(s)", bad)


def _summary(fit, phi, with_h: bool, debiased: bool) -> BlockSummary:
    h_inv = _inverse(fit.H_hat) if with_h else None
    return BlockSummary(
        k=fit.block_id,
        n=fit.n,
        phi=phi,
        H_inv=h_inv,
        debiased=debiased,
        degraded=fit.status == "boundary" and with_h,
    )


def run_protocols(
    kinds: Sequence[str],
    blocks: Sequence[DataBlock],
    model: BlockModel,
    box: ParameterBox,
    opts: SolverOptions = SolverOptions(),
    savgm_r: float = DEFAULT_SAVGM_R,
    seed: int = 0,
    inference: bool = True,
) -> dict:
    """Run several estimators on the same blocks, sharing the worker stages.

    Returns ``{kind: ProtocolResult}``. ``seconds`` counts the worker stages
    each estimator needs plus its coordinator fold, as if run alone. The
    split and subsample permutations derive from ``seed``.
    """
    kinds = [canonical_kind(k) for k in kinds]
    out = {}
    need_whole = {"SaC", "WD", "dSaC", "SAVGM"} & set(kinds)
    need_sandwich = "WD" in kinds or (inference and ({"SaC", "dSaC"} & set(kinds)))
    fits = None
    if need_whole:
        fits, t_whole = analyze_blocks(blocks, model, box, opts, sandwich=bool(need_sandwich), bias="dSaC" in kinds)
        _check_fits(fits)

    def finish(kind, messages, worker_seconds, fold, raw_bytes=0):
        log = CommLog(kind, raw_bytes=raw_bytes)
        for m in messages:
            log.record(m)
        t0 = time.perf_counter()
        est = fold([m.summary() for m in log.messages])
        out[kind] = ProtocolResult(est, log, worker_seconds + time.perf_counter() - t0)

    for kind in ("SaC", "WD", "dSaC"):
        if kind not in kinds:
            continue
        with_inf = inference and kind != "WD"
        messages = []
        for f in fits:
            if kind == "WD":
                messages.append(ProtocolMessage(f.block_id, kind, _summary(f, f.phi_hat, True, False)))
            else:
                phi = f.phi_hat if kind == "SaC" else f.phi_bc
                messages.append(
                    ProtocolMessage(
                        f.block_id,
                        kind,
                        _summary(f, phi, False, kind == "dSaC"),
                        inference=_inverse(f.H_hat) if with_inf else None,
                    )
                )
        seconds = t_whole.fit
        seconds += t_whole.sandwich if (kind == "WD" or with_inf) else 0.0
        seconds += t_whole.bias if kind == "dSaC" else 0.0
        if kind == "WD":
            fold = lambda s: agg.wd(s, box)
        elif kind == "SaC":
            fold = agg.sac
        else:
            fold = agg.dsac
        finish(kind, messages, seconds, fold)

    if "dWD" in kinds:
        pairs = [split_halves(b, seed, model.p) for b in blocks]
        halves = [pr.first for pr in pairs] + [pr.second for pr in pairs]
        hfits, t_half = analyze_blocks(halves, model, box, opts, sandwich=True, bias=True)
        _check_fits(hfits)
        K = len(blocks)
        messages = []
        for b, f1, f2 in zip(blocks, hfits[:K], hfits[K:]):
            hs = tuple(
                HalfSummary(
                    n=f.n,
                    phi=f.phi_bc,
                    H_inv=_inverse(f.H_hat),
                    degraded=f.status == "boundary",
                )
                for f in (f1, f2)
            )
            summary = BlockSummary(k=b.id, n=b.n, phi=0.5 * (hs[0].phi + hs[1].phi), debiased=True, halves=hs)
            messages.append(ProtocolMessage(b.id, "dWD", summary))
        finish("dWD", messages, t_half.fit + t_half.sandwich + t_half.bias, lambda s: agg.dwd(s, box))

    if "SAVGM" in kinds:
        t0 = time.perf_counter()
        subs = [subsample(b, savgm_r, seed, model.p) for b in blocks]
        sfits, t_sub = analyze_blocks(subs, model, box, opts, sandwich=False, bias=False)
        _check_fits(sfits)
        t_draw = time.perf_counter() - t0 - t_sub.fit
        messages = [
            ProtocolMessage(f.block_id, "SAVGM", SavgmSummary(f.block_id, f.n, f.theta_hat, s.theta_hat, model.p1))
            for f, s in zip(fits, sfits)
        ]
        finish("SAVGM", messages, t_whole.fit + t_sub.fit + t_draw, lambda s: agg.savgm(s, savgm_r))

    if "full" in kinds:
        t0 = time.perf_counter()
        pooled = fit_pooled(blocks, model, box, opts)
        if not pooled.converged:
            raise FitFailure("pooled fit did not converge", [b.id for b in blocks])
        est = AggregateEstimate(phi=pooled.phi, kind="full", N=sum(b.n for b in blocks), K=len(blocks))
        raw = sum(b.rows.size for b in blocks) * BYTES_PER_SCALAR
        out["full"] = ProtocolResult(est, CommLog("full", raw_bytes=raw), time.perf_counter() - t0)

    return {k: out[k] for k in kinds}


def run_protocol(
    kind: str,
    blocks: Sequence[DataBlock],
    model: BlockModel,
    box: ParameterBox,
    opts: SolverOptions = SolverOptions(),
    savgm_r: float = DEFAULT_SAVGM_R,
    seed: int = 0,
):
    """Run one estimator end to end; returns ``(AggregateEstimate, CommLog)``."""
    res = run_protocols([kind], blocks, model, box, opts, savgm_r, seed)[canonical_kind(kind)]
    return res.estimate, res.log
