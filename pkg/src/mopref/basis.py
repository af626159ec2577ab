"""Benchmark selection, directional value basis, and ratio binary search.

The elicitation front end needs three ingredients before any weights can be
solved for: a benchmark policy that approximately maximizes the user's hidden
personalized value among the single-objective optima, a set of policies whose
value vectors span everything any policy can achieve (found by planning along
directions orthogonal to the values collected so far), and per-policy ratios
tying each basis value to the benchmark's, recovered one bit at a time from
comparisons against do-nothing-diluted mixtures.

The algorithmic cores are generators that yield queries and receive verdicts,
so the same code serves a synchronous simulated oracle and the suspend/resume
HTTP session loop.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .momdp import (
    MOMDP,
    MixturePolicy,
    Policy,
    do_nothing_policy,
    policy_digest,
    policy_from_table,
    policy_to_table,
    scalarized_plan,
    vector_value,
)
from .oracle import ComparisonQuery, OracleSession, QueryBuilder, Verdict

DEFAULT_ETA_STOP = 1e-9
RANK_TOL_SCALE = 1e-8


def default_rank_tol(mdp: MOMDP) -> float:
    """Numerical-rank tolerance, scaled to the value bound sqrt(k) * H."""
    return RANK_TOL_SCALE * mdp.value_bound


def ratio_iteration_cap(k: int, eta_stop: float = DEFAULT_ETA_STOP) -> int:
    """Halvings needed to shrink the [0, 4k] search window below eta_stop."""
    return math.ceil(math.log2(4 * k / eta_stop))


@dataclass
class BenchmarkSelection:
    """Winner of the sequential tournament among single-objective optima."""

    policy: Policy
    value: np.ndarray
    candidates: list[tuple[Policy, np.ndarray]]
    incumbent_index: int
    comparisons_used: int


def benchmark_steps(mdp: MOMDP, builder: QueryBuilder):
    """Generator: k-1 comparisons, incumbent replaced only on a strict
    prefer-right for the challenger."""
    candidates = []
    for j in range(mdp.objectives):
        direction = np.zeros(mdp.objectives)
        direction[j] = 1.0
        policy, _ = scalarized_plan(mdp, direction)
        candidates.append((policy, vector_value(mdp, policy)))
    incumbent = 0
    used = 0
    for j in range(1, mdp.objectives):
        verdict = yield builder.build(
            "benchmark", candidates[incumbent][0], candidates[j][0])
        used += 1
        if verdict is Verdict.PREFER_RIGHT:
            incumbent = j
    return BenchmarkSelection(
        policy=candidates[incumbent][0],
        value=candidates[incumbent][1],
        candidates=candidates,
        incumbent_index=incumbent,
        comparisons_used=used,
    )


def select_benchmark(
    mdp: MOMDP,
    oracle: OracleSession,
    builder: QueryBuilder | None = None,
) -> BenchmarkSelection:
    builder = builder or QueryBuilder(mdp)
    return _drive(benchmark_steps(mdp, builder), oracle)


def _drive(gen, oracle: OracleSession):
    answer = None
    while True:
        try:
            query = gen.send(answer)
        except StopIteration as stop:
            return stop.value
        answer = oracle.ask(query)


def orthonormal_complement(values, dim: int, tol: float) -> list[np.ndarray]:
    """Orthonormal basis of the orthogonal complement of span(values) in R^dim.

    Deterministic: standard basis vectors are orthogonalized in ascending
    index order (two Gram-Schmidt passes for stability) and kept when the
    residual norm exceeds tol.
    """
    span: list[np.ndarray] = []
    for v in values:
        r = np.asarray(v, dtype=float).copy()
        for _pass in range(2):
            for b in span:
                r = r - (b @ r) * b
        norm = float(np.linalg.norm(r))
        if norm > tol:
            span.append(r / norm)
    out: list[np.ndarray] = []
    for j in range(dim):
        r = np.zeros(dim)
        r[j] = 1.0
        for _pass in range(2):
            for b in span:
                r = r - (b @ r) * b
            for b in out:
                r = r - (b @ r) * b
        norm = float(np.linalg.norm(r))
        if norm > tol:
            out.append(r / norm)
    return out


@dataclass
class BasisEntry:
    """One basis policy with the direction and magnitude that found it.

    The first entry is the benchmark itself: its direction is the normalized
    benchmark value and its magnitude that value's Euclidean norm.
    """

    policy: Policy
    value: np.ndarray
    direction: np.ndarray
    magnitude: float


@dataclass
class DirectionalBasis:
    benchmark_digest: str
    entries: list[BasisEntry]

    @property
    def dimension(self) -> int:
        return len(self.entries)

    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.entries])

    def magnitudes(self) -> list[float]:
        return [e.magnitude for e in self.entries]


def build_directional_basis(
    mdp: MOMDP,
    benchmark: BenchmarkSelection,
    rank_tol: float | None = None,
    cache: "BasisCache | None" = None,
) -> DirectionalBasis:
    """Greedy directional search for a spanning set of achievable values.

    Starting from the benchmark value, each round plans along every direction
    of the orthogonal complement of the values found so far (and its
    negation), keeps the direction with the largest attained magnitude
    (lowest index on ties, the negated policy on equal-magnitude sign ties),
    and stops when nothing orthogonal is achievable above the rank tolerance.
    Uses no comparison queries, so results are cacheable per benchmark and
    shared across users.
    """
    tol = default_rank_tol(mdp) if rank_tol is None else rank_tol
    bench_digest = policy_digest(mdp, benchmark.policy)
    if cache is not None:
        hit = cache.get(mdp, bench_digest)
        if hit is not None:
            return hit

    v1 = benchmark.value
    norm1 = float(np.linalg.norm(v1))
    if norm1 <= tol:
        basis = DirectionalBasis(
            bench_digest,
            [BasisEntry(benchmark.policy, v1, np.zeros(mdp.objectives), norm1)],
        )
        if cache is not None:
            cache.put(mdp, bench_digest, basis)
        return basis

    entries = [BasisEntry(benchmark.policy, v1, v1 / norm1, norm1)]
    for _i in range(2, mdp.objectives + 1):
        directions = orthonormal_complement([e.value for e in entries],
                                            mdp.objectives, tol)
        if not directions:
            break
        best = None
        for j, rho in enumerate(directions):
            pol_plus, val_plus = scalarized_plan(mdp, rho)
            pol_minus, val_minus = scalarized_plan(mdp, -rho)
            magnitude = max(abs(val_plus), abs(val_minus))
            if best is None or magnitude > best[0]:
                chosen = pol_plus if abs(val_plus) > abs(val_minus) else pol_minus
                best = (magnitude, rho, chosen)
        magnitude, rho, chosen = best
        if magnitude <= tol:
            break
        entries.append(
            BasisEntry(chosen, vector_value(mdp, chosen), rho, float(magnitude)))
    basis = DirectionalBasis(bench_digest, entries)
    if cache is not None:
        cache.put(mdp, bench_digest, basis)
    return basis


class BasisCache:
    """JSON-file cache of directional bases keyed by (instance, benchmark).

    The directional search spends planner calls, not comparisons, so one user's
    basis is directly reusable for every other user sharing the benchmark.
    """

    def __init__(self, path=None):
        self.path = path
        self._data: dict[str, dict[str, dict]] = {}
        if path is not None:
            try:
                with open(path, "r", encoding="utf-8") as fh:
                    self._data = json.load(fh)
            except FileNotFoundError:
                pass

    def get(self, mdp: MOMDP, benchmark_digest: str) -> DirectionalBasis | None:
        doc = self._data.get(mdp.digest, {}).get(benchmark_digest)
        if doc is None:
            return None
        entries = [
            BasisEntry(
                policy=policy_from_table(mdp, e["policy"]),
                value=np.array(e["value"], dtype=float),
                direction=np.array(e["direction"], dtype=float),
                magnitude=float(e["magnitude"]),
            )
            for e in doc["entries"]
        ]
        return DirectionalBasis(benchmark_digest, entries)

    def put(self, mdp: MOMDP, benchmark_digest: str, basis: DirectionalBasis) -> None:
        doc = {
            "entries": [
                {
                    "policy": policy_to_table(mdp, e.policy),
                    "value": [float(v) for v in e.value],
                    "direction": [float(v) for v in e.direction],
                    "magnitude": e.magnitude,
                }
                for e in basis.entries
            ]
        }
        self._data.setdefault(mdp.digest, {})[benchmark_digest] = doc
        if self.path is not None:
            with open(self.path, "w", encoding="utf-8") as fh:
                json.dump(self._data, fh, sort_keys=True)


@dataclass
class RatioResult:
    alpha: float
    iterations: int
    converged: bool
    low_signal: bool = False


@dataclass
class RatioEstimates:
    """Ratios of basis-policy personalized values to the benchmark's.

    ``queries_used`` counts every comparison the phase consumed, including
    guard probes and any search aborted by the low-signal detector.
    """

    cap_alpha: float
    ratios: list[float]
    iterations: list[int]
    converged: list[bool]
    low_signal: bool = False
    queries_used: int = 0

    def __post_init__(self):
        if self.queries_used == 0:
            self.queries_used = sum(self.iterations)
        for a in self.ratios:
            if not (0.0 <= a <= 2 * self.cap_alpha):
                raise ValueError(f"ratio {a} outside [0, {2 * self.cap_alpha}]")


def _dilution(policy: Policy, weight: float, pi0: Policy) -> MixturePolicy:
    """Mixture playing `policy` with probability `weight`, else doing nothing."""
    return MixturePolicy(((float(weight), policy), (1.0 - float(weight), pi0)))


def ratio_search_steps(
    mdp: MOMDP,
    builder: QueryBuilder,
    benchmark: Policy,
    target: Policy,
    cap_alpha: float,
    eta_stop: float = DEFAULT_ETA_STOP,
    guard: bool = False,
):
    """Generator: binary search on [0, 2*cap_alpha] for the value ratio.

    Probes at the midpoint: for alpha <= 1 the target is compared against the
    benchmark diluted to alpha; for alpha > 1 the benchmark is compared
    against the target diluted to 1/alpha. An indistinguishable verdict stops
    the search (converged); otherwise the window halves toward the preferred
    side until it is narrower than eta_stop.

    With ``guard`` set (used for the first ratio), a first-probe
    indistinguishable triggers two extra probes at the window top and at a
    near-zero dilution; all three indistinguishable flags the run as
    low-signal, meaning the benchmark's personalized value is itself below
    the user's threshold and every ratio would be noise.
    """
    pi0 = do_nothing_policy(mdp)
    lo, hi = 0.0, 2.0 * cap_alpha
    cap = math.ceil(math.log2((hi - lo) / eta_stop))
    alpha = cap_alpha
    iterations = 0
    converged = False
    low_signal = False

    def probe(a):
        if a > 1.0:
            return builder.build("ratio", benchmark, _dilution(target, 1.0 / a, pi0))
        return builder.build("ratio", target, _dilution(benchmark, a, pi0))

    while iterations < cap:
        verdict = yield probe(alpha)
        iterations += 1
        if verdict is Verdict.INDISTINGUISHABLE:
            converged = True
            if guard and iterations == 1:
                v_top = yield probe(2.0 * cap_alpha)
                iterations += 1
                if v_top is Verdict.INDISTINGUISHABLE:
                    v_floor = yield probe(eta_stop)
                    iterations += 1
                    if v_floor is Verdict.INDISTINGUISHABLE:
                        low_signal = True
            break
        if alpha > 1.0:
            # left was the benchmark: preferring it means alpha overshoots
            if verdict is Verdict.PREFER_LEFT:
                hi = alpha
            else:
                lo = alpha
        else:
            # left was the target: preferring it means the dilution undershoots
            if verdict is Verdict.PREFER_LEFT:
                lo = alpha
            else:
                hi = alpha
        alpha = (lo + hi) / 2.0
    return RatioResult(float(alpha), iterations, converged, low_signal)


def estimate_ratio(
    mdp: MOMDP,
    oracle: OracleSession,
    benchmark: Policy,
    target: Policy,
    cap_alpha: float,
    eta_stop: float = DEFAULT_ETA_STOP,
    builder: QueryBuilder | None = None,
) -> RatioResult:
    builder = builder or QueryBuilder(mdp)
    return _drive(
        ratio_search_steps(mdp, builder, benchmark, target, cap_alpha, eta_stop),
        oracle,
    )


def ratio_phase_steps(
    mdp: MOMDP,
    builder: QueryBuilder,
    basis: DirectionalBasis,
    cap_alpha: float,
    eta_stop: float = DEFAULT_ETA_STOP,
):
    """Generator: one ratio search per non-benchmark basis entry.

    Aborts the phase as soon as the first search reports low signal; later
    ratios would burn queries without information.
    """
    benchmark = basis.entries[0].policy
    ratios: list[float] = []
    iterations: list[int] = []
    converged: list[bool] = []
    low_signal = False
    used = 0
    for i, entry in enumerate(basis.entries[1:]):
        result = yield from ratio_search_steps(
            mdp, builder, benchmark, entry.policy, cap_alpha, eta_stop,
            guard=(i == 0))
        used += result.iterations
        if result.low_signal:
            low_signal = True
            break
        ratios.append(result.alpha)
        iterations.append(result.iterations)
        converged.append(result.converged)
    return RatioEstimates(
        cap_alpha, ratios, iterations, converged, low_signal, queries_used=used)


def estimate_all_ratios(
    mdp: MOMDP,
    oracle: OracleSession,
    basis: DirectionalBasis,
    cap_alpha: float | None = None,
    eta_stop: float = DEFAULT_ETA_STOP,
    builder: QueryBuilder | None = None,
) -> RatioEstimates:
    builder = builder or QueryBuilder(mdp)
    cap_alpha = 2.0 * mdp.objectives if cap_alpha is None else cap_alpha
    return _drive(
        ratio_phase_steps(mdp, builder, basis, cap_alpha, eta_stop), oracle)
