"""Two-point zero-order gradient ascent with a multi-start schedule.

One iteration samples a Gaussian direction u, queries the oracle at the
synthesized images for c-u and c+u (in that order, always), forms the
estimate k*(s_plus - s_minus)/(2*sigma)*u, and steps along it. A full run
does `n_restarts` short climbs from the initial point, keeps the one whose
endpoint scores best (one extra query each), then continues it for
`main_iters` iterations. Query accounting is exact:

    total = n_restarts * (2*restart_iters + 1) + 2*main_iters

All randomness flows from (config.seed, stream): restart r owns stream
STREAM_OPT_RESTART + r and the main phase owns STREAM_OPT_MAIN, so identical
inputs give bit-identical traces and outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .eigenspace import EigenBasis, ImageTensor, synthesize
from .oracle import BudgetExhausted, OracleError, SimilarityOracle
from .rng import STREAM_OPT_MAIN, STREAM_OPT_RESTART, RandomStream

TransferScorer = Callable[[ImageTensor], float]


@dataclass
class OptimizerConfig:
    """Hyperparameters of a reconstruction run.

    `learning_rate=None` selects the default 0.02/rank, which keeps the
    expected update magnitude independent of the subspace rank.
    `init_stddev > 0` draws each restart's starting coordinates from a
    Gaussian instead of the zero vector. `clamp_probes` clips probe images
    to [0, 1] before querying, for oracles that only accept valid images.
    """

    sigma: float = 0.3
    learning_rate: float | None = None
    n_restarts: int = 10
    restart_iters: int = 500
    main_iters: int = 15000
    seed: int = 0
    trace_every: int = 1
    init_stddev: float = 0.0
    clamp_probes: bool = False

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")
        if self.restart_iters < 0 or self.main_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.trace_every < 1:
            raise ValueError("trace_every must be >= 1")
        if self.init_stddev < 0:
            raise ValueError("init_stddev must be >= 0")

    def effective_lr(self, rank: int) -> float:
        return self.learning_rate if self.learning_rate is not None else 0.02 / rank

    def total_queries(self) -> int:
        return self.n_restarts * (2 * self.restart_iters + 1) + 2 * self.main_iters


@dataclass
class GradientEstimate:
    direction_sample: np.ndarray  # u, the sampled perturbation
    s_minus: float                # score at c - u (queried first)
    s_plus: float                 # score at c + u (queried second)
    estimate: np.ndarray          # k * (s_plus - s_minus) / (2*sigma) * u


@dataclass
class TraceRow:
    phase: str        # "restart", "restart_eval", or "main"
    restart: int      # restart index; for main rows, the selected restart
    iteration: int    # 1-based within its phase
    queries_used: int
    score: float      # mean of the two probe scores; oracle score for eval rows
    transfer_score: float | None = None


@dataclass
class RunTrace:
    rows: list[TraceRow] = field(default_factory=list)
    selected_restart: int | None = None
    final_coords: np.ndarray | None = None
    exhausted: bool = False


TRACE_COLUMNS = ("phase", "restart", "iteration", "queries_used", "score")


def write_trace_csv(trace: RunTrace, path) -> None:
    """One row per logged step; a transfer_score column appears when present."""
    with_transfer = any(r.transfer_score is not None for r in trace.rows)
    header = TRACE_COLUMNS + (("transfer_score",) if with_transfer else ())
    lines = [",".join(header)]
    for r in trace.rows:
        cells = [r.phase, str(r.restart), str(r.iteration), str(r.queries_used), repr(r.score)]
        if with_transfer:
            cells.append("" if r.transfer_score is None else repr(r.transfer_score))
        lines.append(",".join(cells))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def _clamp(image: ImageTensor) -> ImageTensor:
    return ImageTensor(
        image.width, image.height, image.channels, np.clip(image.pixels, 0.0, 1.0)
    )


def estimate_gradient(
    coords: np.ndarray,
    basis: EigenBasis,
    oracle: SimilarityOracle,
    target: str,
    sigma: float,
    rng: RandomStream,
    clamp_probes: bool = False,
) -> GradientEstimate:
    """One two-point estimate; consumes exactly two queries, c-u first."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    remaining = oracle.ledger.remaining
    if remaining is not None and remaining < 2:
        raise BudgetExhausted(
            f"need 2 queries for a gradient estimate, {remaining} remaining"
        )
    k = basis.rank
    u = sigma * rng.normals(k)
    probe = synthesize(basis, coords - u)
    s_minus = oracle.query(_clamp(probe) if clamp_probes else probe, target)
    probe = synthesize(basis, coords + u)
    s_plus = oracle.query(_clamp(probe) if clamp_probes else probe, target)
    estimate = (k * (s_plus - s_minus) / (2.0 * sigma)) * u
    return GradientEstimate(u, s_minus, s_plus, estimate)


def ascend(
    coords: np.ndarray,
    basis: EigenBasis,
    oracle: SimilarityOracle,
    target: str,
    config: OptimizerConfig,
    iters: int,
    rng: RandomStream | None = None,
    trace: RunTrace | None = None,
    phase: str = "main",
    restart: int = 0,
    transfer_scorer: TransferScorer | None = None,
) -> tuple[np.ndarray, RunTrace]:
    """Apply `iters` estimate-and-step updates; consumes exactly 2*iters queries.

    On an oracle failure the partial coordinates and trace are attached to the
    raised exception (`partial_coords` / `partial_trace`) before propagating.
    """
    if rng is None:
        rng = RandomStream(config.seed, STREAM_OPT_MAIN)
    if trace is None:
        trace = RunTrace()
    lr = config.effective_lr(basis.rank)
    c = np.array(coords, dtype=np.float64).ravel()
    for i in range(1, iters + 1):
        try:
            g = estimate_gradient(
                c, basis, oracle, target, config.sigma, rng, config.clamp_probes
            )
        except OracleError as exc:
            trace.exhausted = isinstance(exc, BudgetExhausted)
            exc.partial_coords = c
            exc.partial_trace = trace
            raise
        c = c + lr * g.estimate
        if i % config.trace_every == 0 or i == iters:
            transfer = (
                transfer_scorer(synthesize(basis, c)) if transfer_scorer else None
            )
            trace.rows.append(
                TraceRow(
                    phase=phase,
                    restart=restart,
                    iteration=i,
                    queries_used=oracle.ledger.used,
                    score=0.5 * (g.s_minus + g.s_plus),
                    transfer_score=transfer,
                )
            )
    trace.final_coords = c
    return c, trace


def darkerbb(
    basis: EigenBasis,
    oracle: SimilarityOracle,
    target: str,
    config: OptimizerConfig,
    transfer_scorer: TransferScorer | None = None,
) -> tuple[ImageTensor, RunTrace]:
    """Multi-start reconstruction: best of `n_restarts` short climbs, then a long one.

    Rejects runs the budget cannot cover before the first query. If the budget
    is exhausted mid-run anyway (e.g. a shared remote oracle), the best
    coordinates reached so far and the partial trace are returned with
    `trace.exhausted` set instead of discarding the work.
    """
    k = basis.rank
    needed = config.total_queries()
    remaining = oracle.ledger.remaining
    if remaining is not None and remaining < needed:
        raise BudgetExhausted(
            f"schedule needs {needed} queries, budget has {remaining} remaining"
        )

    trace = RunTrace()
    best_score = -np.inf
    best_coords = np.zeros(k)
    best_restart: int | None = None
    in_main = False
    try:
        for r in range(config.n_restarts):
            rng = RandomStream(config.seed, STREAM_OPT_RESTART + r)
            c0 = (
                config.init_stddev * rng.normals(k)
                if config.init_stddev > 0
                else np.zeros(k)
            )
            c, _ = ascend(
                c0, basis, oracle, target, config, config.restart_iters,
                rng=rng, trace=trace, phase="restart", restart=r,
                transfer_scorer=transfer_scorer,
            )
            endpoint = synthesize(basis, c)
            try:
                score = oracle.query(
                    _clamp(endpoint) if config.clamp_probes else endpoint, target
                )
            except OracleError as exc:
                trace.exhausted = isinstance(exc, BudgetExhausted)
                exc.partial_coords = c
                exc.partial_trace = trace
                raise
            transfer = transfer_scorer(endpoint) if transfer_scorer else None
            trace.rows.append(
                TraceRow(
                    phase="restart_eval",
                    restart=r,
                    iteration=config.restart_iters,
                    queries_used=oracle.ledger.used,
                    score=score,
                    transfer_score=transfer,
                )
            )
            if score > best_score:  # ties keep the lowest restart index
                best_score, best_coords, best_restart = score, c, r
        trace.selected_restart = best_restart
        in_main = True
        final, _ = ascend(
            best_coords, basis, oracle, target, config, config.main_iters,
            rng=RandomStream(config.seed, STREAM_OPT_MAIN), trace=trace,
            phase="main", restart=best_restart, transfer_scorer=transfer_scorer,
        )
    except BudgetExhausted as exc:
        # Keep the best work done so far: mid-main progress, else the best
        # evaluated restart, else the interrupted first restart's progress.
        trace.selected_restart = best_restart
        if in_main or best_restart is None:
            final = exc.partial_coords
        else:
            final = best_coords
        trace.final_coords = final
        trace.exhausted = True
        return synthesize(basis, final), trace

    trace.final_coords = final
    return synthesize(basis, final), trace
