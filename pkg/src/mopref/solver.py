"""Weight recovery and the end-to-end elicitation engine.

The ratio matrix stacks the benchmark value on top of one row per basis
policy, each row being (ratio * benchmark value - basis value). The hidden
preference, rescaled so its inner product with the benchmark value is 1,
annihilates every row but the first; solving rows * x = e1 for the minimum
Euclidean norm x therefore recovers that rescaled preference, exactly when
the ratios are exact and stably when they carry binary-search error. The
truncated variant drops trailing rows whose directional magnitudes fall
below a threshold derived from the user's estimated precision, trading bias
for conditioning.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .basis import (
    BasisCache,
    BenchmarkSelection,
    DirectionalBasis,
    RatioEstimates,
    benchmark_steps,
    build_directional_basis,
    default_rank_tol,
    ratio_iteration_cap,
    ratio_phase_steps,
)
from .momdp import (
    MOMDP,
    MixturePolicy,
    Policy,
    do_nothing_policy,
    policy_to_table,
    scalarized_plan,
    vector_value,
)
from .oracle import OracleSession, QueryBuilder, Verdict

DEFAULT_ETA_STOP = 1e-9
DEFAULT_ETA_MIN = 1e-9
RESIDUAL_TOL = 1e-8


class RankDeficientError(RuntimeError):
    """The ratio matrix rows are linearly dependent; the basis is corrupted."""


@dataclass
class RatioMatrix:
    """Rows of the linear system whose e1-solution estimates the preference."""

    rows: np.ndarray  # (d, k)

    @property
    def dimension(self) -> int:
        return self.rows.shape[0]


def assemble_ratio_matrix(basis: DirectionalBasis, ratios: RatioEstimates) -> RatioMatrix:
    if len(ratios.ratios) != basis.dimension - 1:
        raise ValueError(
            f"got {len(ratios.ratios)} ratios for a basis of dimension {basis.dimension}")
    v1 = basis.entries[0].value
    rows = [v1]
    for alpha, entry in zip(ratios.ratios, basis.entries[1:]):
        rows.append(alpha * v1 - entry.value)
    return RatioMatrix(np.array(rows))


@dataclass
class WeightEstimate:
    """Estimated preference direction, normalized against the benchmark value.

    ``d_kept`` is the number of matrix rows the solve actually used (equal to
    the full dimension in full mode). ``residual`` is the max-norm defect of
    the kept rows applied to the weights.
    """

    weights: np.ndarray
    mode: str
    d_kept: int
    residual: float
    delta: float | None = None
    diagnostic_target: np.ndarray | None = None


def _min_norm_solve(rows: np.ndarray, mode: str, delta: float | None) -> WeightEstimate:
    d = rows.shape[0]
    rank = np.linalg.matrix_rank(rows)
    if rank < d:
        raise RankDeficientError(f"matrix rows have rank {rank} < {d}")
    e1 = np.zeros(d)
    e1[0] = 1.0
    solution, *_ = np.linalg.lstsq(rows, e1, rcond=None)
    residual = float(np.max(np.abs(rows @ solution - e1)))
    if residual > RESIDUAL_TOL:
        raise RankDeficientError(f"solve residual {residual} exceeds {RESIDUAL_TOL}")
    return WeightEstimate(
        weights=solution, mode=mode, d_kept=d, residual=residual, delta=delta)


def solve_full(matrix: RatioMatrix) -> WeightEstimate:
    """Minimum-norm solution of rows * x = e1 using every row."""
    return _min_norm_solve(matrix.rows, "full", None)


def truncation_dimension(magnitudes: list[float], delta: float) -> int:
    """Rows to keep: everything before the first non-benchmark magnitude <= delta."""
    for i, m in enumerate(magnitudes[1:], start=2):
        if m <= delta:
            return i - 1
    return len(magnitudes)


def truncate_and_solve(
    matrix: RatioMatrix,
    basis: DirectionalBasis,
    delta: float,
) -> WeightEstimate:
    """Minimum-norm solve on the rows whose directions carry signal above delta.

    The solution lies in the row space of the kept rows, so directions the
    truncation discarded contribute nothing to the estimate.
    """
    d_keep = truncation_dimension(basis.magnitudes(), delta)
    estimate = _min_norm_solve(matrix.rows[:d_keep], "truncated", delta)
    return estimate


@dataclass
class PrecisionResult:
    """User threshold expressed in units of the benchmark's personalized value."""

    eta: float
    iterations: int
    saturated: bool = False
    floored: bool = False


def precision_steps(
    mdp: MOMDP,
    builder: QueryBuilder,
    benchmark: Policy,
    eta_min: float = DEFAULT_ETA_MIN,
):
    """Generator: estimate the indistinguishability threshold by dilution.

    Compares the benchmark against itself diluted by eta toward do-nothing;
    the verdict flips from preferring the benchmark to indistinguishable at
    eta = threshold / personalized benchmark value. A first probe at eta = 1
    detects saturation (threshold at or above the whole benchmark value);
    otherwise the boundary is bisected down to resolution eta_min and the
    largest indistinguishable eta is returned, floored at eta_min.
    """
    pi0 = do_nothing_policy(mdp)

    def probe(eta):
        mixture = MixturePolicy(((1.0 - float(eta), benchmark), (float(eta), pi0)))
        return builder.build("precision", benchmark, mixture)

    verdict = yield probe(1.0)
    iterations = 1
    if verdict is Verdict.INDISTINGUISHABLE:
        return PrecisionResult(eta=1.0, iterations=iterations, saturated=True)
    lo, hi = 0.0, 1.0
    while hi - lo > eta_min:
        mid = (lo + hi) / 2.0
        verdict = yield probe(mid)
        iterations += 1
        if verdict is Verdict.INDISTINGUISHABLE:
            lo = mid
        else:
            hi = mid
    if lo < eta_min:
        return PrecisionResult(eta=eta_min, iterations=iterations, floored=True)
    return PrecisionResult(eta=lo, iterations=iterations)


def estimate_precision(
    mdp: MOMDP,
    oracle: OracleSession,
    benchmark: Policy,
    eta_min: float = DEFAULT_ETA_MIN,
    builder: QueryBuilder | None = None,
) -> PrecisionResult:
    builder = builder or QueryBuilder(mdp)
    gen = precision_steps(mdp, builder, benchmark, eta_min)
    answer = None
    while True:
        try:
            query = gen.send(answer)
        except StopIteration as stop:
            return stop.value
        answer = oracle.ask(query)


def precision_iteration_cap(eta_min: float = DEFAULT_ETA_MIN) -> int:
    return 1 + math.ceil(math.log2(1.0 / eta_min))


def query_budget_cap(
    k: int,
    d: int,
    mode: str,
    eta_stop: float = DEFAULT_ETA_STOP,
    eta_min: float = DEFAULT_ETA_MIN,
) -> int:
    """Worst-case comparison count for a run that found a d-dimensional basis."""
    total = (k - 1) + (d - 1) * ratio_iteration_cap(k, eta_stop)
    if mode == "truncated":
        total += precision_iteration_cap(eta_min)
    return total


@dataclass
class EngineConfig:
    """Knobs for one elicitation run; defaults follow the worst-case analysis.

    cap_alpha defaults to 2k: when the user's threshold is small relative to
    the best achievable personalized value, the benchmark is within a factor
    2k of optimal, so no ratio exceeds 2k.
    """

    mode: str = "full"
    representation: str = "explicit"
    cap_alpha: float | None = None
    eta_stop: float = DEFAULT_ETA_STOP
    eta_min: float = DEFAULT_ETA_MIN
    rank_tol: float | None = None
    basis_cache: BasisCache | None = None

    def __post_init__(self):
        if self.mode not in ("full", "truncated"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.representation not in ("explicit", "trajectory_set"):
            raise ValueError(f"unknown representation {self.representation!r}")


@dataclass
class ElicitationReport:
    estimate: WeightEstimate
    output_policy: Policy
    output_value: np.ndarray
    queries: dict[str, int]
    flags: list[str]
    benchmark: BenchmarkSelection
    basis: DirectionalBasis
    ratios: RatioEstimates | None
    precision: PrecisionResult | None
    diagnostics: dict | None = None

    @property
    def dimension(self) -> int:
        return self.basis.dimension


def elicitation_engine(mdp: MOMDP, config: EngineConfig):
    """Generator running the whole elicitation: yields queries, returns a report.

    Phases: benchmark tournament (k-1 comparisons), query-free directional
    basis construction, one ratio search per extra basis entry, then in
    truncated mode a precision estimate. Suspending between a yielded query
    and the next send() is the only state the engine keeps, so replaying a
    transcript's verdicts reproduces the identical run.
    """
    k = mdp.objectives
    builder = QueryBuilder(mdp, config.representation)
    cap_alpha = 2.0 * k if config.cap_alpha is None else config.cap_alpha
    flags: list[str] = []

    selection = yield from benchmark_steps(mdp, builder)
    basis = build_directional_basis(
        mdp, selection, rank_tol=config.rank_tol, cache=config.basis_cache)

    rank_tol = default_rank_tol(mdp) if config.rank_tol is None else config.rank_tol
    degenerate = float(np.linalg.norm(selection.value)) <= rank_tol

    ratios = None
    ratio_queries = 0
    if basis.dimension > 1:
        ratios = yield from ratio_phase_steps(
            mdp, builder, basis, cap_alpha, config.eta_stop)
        ratio_queries = ratios.queries_used
        if not all(ratios.converged):
            flags.append("unconverged_ratios")

    low_signal = degenerate or (ratios.low_signal if ratios is not None else False)
    precision = None
    precision_queries = 0
    delta = None
    if config.mode == "truncated" and not low_signal:
        precision = yield from precision_steps(
            mdp, builder, selection.policy, config.eta_min)
        precision_queries = precision.iterations
        delta = k ** (5.0 / 3.0) * precision.eta ** (1.0 / 3.0)
        if precision.saturated:
            flags.append("low_signal")
        if precision.floored:
            flags.append("precision_floor")

    if low_signal:
        flags.append("low_signal")
        estimate = _low_signal_fallback(mdp, basis, config)
    else:
        matrix = assemble_ratio_matrix(basis, ratios) if ratios is not None else \
            RatioMatrix(basis.values())
        if config.mode == "truncated":
            estimate = truncate_and_solve(matrix, basis, delta)
        else:
            estimate = solve_full(matrix)

    output_policy, _ = scalarized_plan(mdp, estimate.weights)
    output_value = vector_value(mdp, output_policy)
    queries = {
        "benchmark": selection.comparisons_used,
        "ratio": ratio_queries,
        "precision": precision_queries,
    }
    queries["total"] = sum(queries.values())
    return ElicitationReport(
        estimate=estimate,
        output_policy=output_policy,
        output_value=output_value,
        queries=queries,
        flags=sorted(set(flags)),
        benchmark=selection,
        basis=basis,
        ratios=ratios,
        precision=precision,
    )


def _low_signal_fallback(mdp: MOMDP, basis: DirectionalBasis, config: EngineConfig) -> WeightEstimate:
    """Best-effort estimate when every probe was indistinguishable.

    All personalized values are below the user's threshold, so any output is
    within 2*k*epsilon of optimal; aim along the benchmark value if it is
    nonzero, otherwise treat the objectives evenly.
    """
    v1 = basis.entries[0].value
    tol = default_rank_tol(mdp) if config.rank_tol is None else config.rank_tol
    if float(np.linalg.norm(v1)) > tol:
        return _min_norm_solve(v1[None, :], config.mode, None)
    return WeightEstimate(
        weights=np.ones(mdp.objectives), mode=config.mode, d_kept=0, residual=0.0)


def run_elicitation(mdp: MOMDP, oracle: OracleSession, config: EngineConfig) -> ElicitationReport:
    """Drive the engine against a session that can answer synchronously."""
    gen = elicitation_engine(mdp, config)
    answer = None
    while True:
        try:
            query = gen.send(answer)
        except StopIteration as stop:
            return stop.value
        answer = oracle.ask(query)


def report_to_dict(mdp: MOMDP, report: ElicitationReport) -> dict:
    doc = {
        "schema": "mopref-report-v1",
        "mode": report.estimate.mode,
        "weights": [float(w) for w in report.estimate.weights],
        "delta": report.estimate.delta,
        "d": report.basis.dimension,
        "d_delta": report.estimate.d_kept,
        "residual": report.estimate.residual,
        "queries": dict(report.queries),
        "flags": sorted(set(report.flags)),
        "output_policy": policy_to_table(mdp, report.output_policy),
        "output_value": [float(v) for v in report.output_value],
    }
    if report.diagnostics is not None:
        doc["diagnostics"] = report.diagnostics
    return doc


def report_json_text(mdp: MOMDP, report: ElicitationReport) -> str:
    return canonical_json(report_to_dict(mdp, report))


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
