"""Seeded instance generation, simulated trials, and result aggregation.

Everything here is deterministic in (seed, config): generated instance
documents, trial rows, and both CSV artifacts are byte-identical across runs.
Wall-clock timing is kept on the in-memory rows and the printed table only.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .momdp import (
    MOMDP,
    Policy,
    count_policies,
    enumerate_policies,
    parse_instance,
    vector_value,
)
from .oracle import OracleSession, SimulatedUser
from .solver import ElicitationReport, EngineConfig, run_elicitation

TRIALS_SCHEMA = "# mopref-trials v1"
SUMMARY_SCHEMA = "# mopref-summary v1"
BRUTE_FORCE_LIMIT = 1_000_000


@dataclass(frozen=True)
class InstanceDims:
    states: int
    actions: int
    horizon: int
    objectives: int

    def __post_init__(self):
        for name in ("states", "actions", "horizon", "objectives"):
            if getattr(self, name) < 1:
                raise ValueError(f"dims.{name} must be positive")


def generate_instance(seed: int, dims: InstanceDims) -> tuple[MOMDP, SimulatedUser]:
    """Random instance plus a hidden-preference user, deterministic in the seed.

    States s0..s{n-1}; actions a1..a{m} available everywhere plus the
    do-nothing a0 at s0 only. Transition rows are normalized uniform draws,
    rewards are uniform in [0, 1]^k, and the preference is a nonnegative
    uniform draw rescaled to a Euclidean norm drawn from [1, 2].
    """
    rng = np.random.default_rng(seed)
    states = [f"s{i}" for i in range(dims.states)]
    actions = ["a0"] + [f"a{j}" for j in range(1, dims.actions + 1)]
    transitions: dict = {}
    rewards: dict = {}
    available: dict = {}
    for i, s in enumerate(states):
        acts = actions[1:] if i else actions
        available[s] = list(acts)
        transitions[s] = {}
        rewards[s] = {}
        for a in acts:
            if a == "a0":
                transitions[s][a] = {s: 1.0}
                rewards[s][a] = [0.0] * dims.objectives
                continue
            row = rng.random(dims.states)
            row = row / row.sum()
            transitions[s][a] = {
                states[j]: float(row[j]) for j in range(dims.states)
            }
            rewards[s][a] = [float(v) for v in rng.random(dims.objectives)]
    doc = {
        "k": dims.objectives,
        "horizon": dims.horizon,
        "states": states,
        "actions": actions,
        "initial_state": "s0",
        "do_nothing": {"state": "s0", "action": "a0"},
        "available_actions": available,
        "transitions": transitions,
        "rewards": rewards,
    }
    direction = rng.random(dims.objectives)
    if not direction.any():
        direction = np.ones(dims.objectives)
    target_norm = rng.uniform(1.0, 2.0)
    preference = direction * (target_norm / np.linalg.norm(direction))
    user = SimulatedUser(preference=preference, norm_bound=2.0)
    return parse_instance(doc), user


def _policy_array(mdp: MOMDP, limit: int) -> np.ndarray:
    pols = enumerate_policies(mdp, limit)
    return np.array([p.assignment for p in pols], dtype=np.int64)  # (N, H, S)


def batch_values(mdp: MOMDP, assignments: np.ndarray) -> np.ndarray:
    """Vector values of many policies at once; matches vector_value per policy."""
    n = assignments.shape[0]
    idx = np.arange(mdp.n_states)
    values = np.zeros((n, mdp.n_states, mdp.objectives))
    for h in range(mdp.horizon - 1, -1, -1):
        act = assignments[:, h, :]  # (N, S)
        rew = mdp.reward[idx[None, :], act]          # (N, S, k)
        tra = mdp.transition[idx[None, :], act]      # (N, S, S)
        values = rew + np.einsum("nst,ntk->nsk", tra, values)
    return values[:, mdp.initial_index, :]


def brute_force_best(
    mdp: MOMDP,
    direction,
    limit: int = BRUTE_FORCE_LIMIT,
    chunk: int = 65536,
) -> tuple[float, Policy]:
    """Exact argmax of the scalarized value over every deterministic policy."""
    w = np.asarray(direction, dtype=float)
    if count_policies(mdp) > limit:
        raise ValueError("limit exceeded: instance too large for enumeration")
    best_val = -np.inf
    best_policy = None
    buffer: list[Policy] = []

    def flush():
        nonlocal best_val, best_policy
        if not buffer:
            return
        arr = np.array([p.assignment for p in buffer], dtype=np.int64)
        scal = batch_values(mdp, arr) @ w
        i = int(np.argmax(scal))
        if scal[i] > best_val:
            best_val = float(scal[i])
            best_policy = buffer[i]
        buffer.clear()

    for policy in enumerate_policies(mdp, limit):
        buffer.append(policy)
        if len(buffer) >= chunk:
            flush()
    flush()
    return best_val, best_policy


def optimum_for(mdp: MOMDP, preference, limit: int = BRUTE_FORCE_LIMIT) -> tuple[float, Policy]:
    """Best personalized value: enumerated when feasible, planner-exact otherwise."""
    from .momdp import scalarized_plan

    if count_policies(mdp) <= limit:
        return brute_force_best(mdp, preference, limit)
    policy, _ = scalarized_plan(mdp, preference)
    w = np.asarray(preference, dtype=float)
    return float(w @ vector_value(mdp, policy)), policy


@dataclass
class TrialRow:
    seed: int
    dims: InstanceDims
    epsilon: float
    mode: str
    representation: str
    benchmark_queries: int
    ratio_queries: int
    precision_queries: int
    total_queries: int
    d: int
    d_delta: int
    v_star: float
    achieved: float
    suboptimality: float
    flags: str
    wall_time_s: float


def run_trial(
    mdp: MOMDP,
    user: SimulatedUser,
    epsilon: float,
    mode: str = "full",
    representation: str = "explicit",
    seed: int = 0,
    config: EngineConfig | None = None,
) -> tuple[TrialRow, ElicitationReport]:
    """One simulated elicitation plus ground-truth evaluation of the output."""
    trial_user = replace(user, precision=epsilon, queries_answered=0)
    oracle = OracleSession(answer_fn=trial_user.answer_query)
    config = config or EngineConfig(mode=mode, representation=representation)
    start = time.perf_counter()
    report = run_elicitation(mdp, oracle, config)
    wall = time.perf_counter() - start
    v_star, _ = optimum_for(mdp, trial_user.preference)
    achieved = float(np.asarray(trial_user.preference) @ report.output_value)
    report.diagnostics = {
        "preference": [float(w) for w in trial_user.preference],
        "v_star": v_star,
        "achieved": achieved,
        "suboptimality": v_star - achieved,
    }
    row = TrialRow(
        seed=seed,
        dims=InstanceDims(mdp.n_states, mdp.n_actions - 1, mdp.horizon, mdp.objectives),
        epsilon=epsilon,
        mode=config.mode,
        representation=config.representation,
        benchmark_queries=report.queries["benchmark"],
        ratio_queries=report.queries["ratio"],
        precision_queries=report.queries["precision"],
        total_queries=report.queries["total"],
        d=report.basis.dimension,
        d_delta=report.estimate.d_kept,
        v_star=v_star,
        achieved=achieved,
        suboptimality=v_star - achieved,
        flags="|".join(report.flags),
        wall_time_s=wall,
    )
    return row, report


@dataclass
class ExperimentConfig:
    seed: int
    trials: int
    dims: InstanceDims
    epsilons: tuple[float, ...]
    mode: str = "full"
    representation: str = "explicit"

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be positive")
        if not self.epsilons:
            raise ValueError("epsilons must be nonempty")
        for e in self.epsilons:
            if not e > 0:
                raise ValueError(f"epsilon {e} must be positive")


def run_experiment(config: ExperimentConfig) -> list[TrialRow]:
    """Seeded sweep: one instance per trial index, every epsilon on each."""
    seeds = np.random.SeedSequence(config.seed).generate_state(config.trials)
    rows: list[TrialRow] = []
    for i in range(config.trials):
        instance_seed = int(seeds[i])
        mdp, user = generate_instance(instance_seed, config.dims)
        for eps in config.epsilons:
            row, _report = run_trial(
                mdp, user, eps,
                mode=config.mode,
                representation=config.representation,
                seed=instance_seed,
            )
            rows.append(row)
    rows.sort(key=lambda r: (r.epsilon, r.seed))
    return rows


@dataclass
class ExperimentSummary:
    per_epsilon: list[dict]
    monotone_median: bool


def _relative_suboptimality(row: TrialRow) -> float:
    if row.v_star <= 0.0:
        return 0.0
    return max(0.0, row.suboptimality) / row.v_star


def aggregate(rows: list[TrialRow]) -> ExperimentSummary:
    """Per-epsilon medians and quartiles of suboptimality and query counts."""
    epsilons = sorted({r.epsilon for r in rows})
    per_eps = []
    for eps in epsilons:
        group = [r for r in rows if r.epsilon == eps]
        sub = np.array([max(0.0, r.suboptimality) for r in group])
        rel = np.array([_relative_suboptimality(r) for r in group])
        qs = np.array([r.total_queries for r in group])
        per_eps.append({
            "epsilon": eps,
            "trials": len(group),
            "suboptimality_median": float(np.median(sub)),
            "suboptimality_q25": float(np.quantile(sub, 0.25)),
            "suboptimality_q75": float(np.quantile(sub, 0.75)),
            "relative_suboptimality_median": float(np.median(rel)),
            "queries_median": float(np.median(qs)),
            "queries_max": int(qs.max()),
        })
    medians = [g["relative_suboptimality_median"] for g in reversed(per_eps)]
    monotone = all(a <= b + 0.0 for a, b in zip(medians, medians[1:]))
    return ExperimentSummary(per_epsilon=per_eps, monotone_median=monotone)


_TRIAL_COLUMNS = [
    "seed", "states", "actions", "horizon", "objectives", "epsilon", "mode",
    "representation", "benchmark_queries", "ratio_queries", "precision_queries",
    "total_queries", "d", "d_delta", "v_star", "achieved", "suboptimality", "flags",
]


def trials_to_csv(rows: list[TrialRow]) -> str:
    out = io.StringIO()
    out.write(TRIALS_SCHEMA + "\n")
    out.write(",".join(_TRIAL_COLUMNS) + "\n")
    for r in rows:
        out.write(",".join(str(v) for v in [
            r.seed, r.dims.states, r.dims.actions, r.dims.horizon,
            r.dims.objectives, repr(r.epsilon), r.mode, r.representation,
            r.benchmark_queries, r.ratio_queries, r.precision_queries,
            r.total_queries, r.d, r.d_delta, repr(r.v_star), repr(r.achieved),
            repr(r.suboptimality), r.flags,
        ]) + "\n")
    return out.getvalue()


def summary_to_csv(summary: ExperimentSummary) -> str:
    cols = [
        "epsilon", "trials", "suboptimality_median", "suboptimality_q25",
        "suboptimality_q75", "relative_suboptimality_median", "queries_median",
        "queries_max",
    ]
    out = io.StringIO()
    out.write(SUMMARY_SCHEMA + "\n")
    out.write(",".join(cols) + "\n")
    for g in summary.per_epsilon:
        out.write(",".join(repr(g[c]) if isinstance(g[c], float) else str(g[c])
                           for c in cols) + "\n")
    out.write(f"# monotone_median={str(summary.monotone_median).lower()}\n")
    return out.getvalue()


def format_summary_table(rows: list[TrialRow], summary: ExperimentSummary) -> str:
    """Human-readable sweep overview, including mean wall time per epsilon."""
    lines = [
        f"{'epsilon':>12} {'trials':>7} {'median subopt':>14} "
        f"{'median rel':>11} {'median q':>9} {'mean wall s':>12}"
    ]
    for g in summary.per_epsilon:
        eps_rows = [r for r in rows if r.epsilon == g["epsilon"]]
        wall = sum(r.wall_time_s for r in eps_rows) / max(1, len(eps_rows))
        lines.append(
            f"{g['epsilon']:>12.3e} {g['trials']:>7d} "
            f"{g['suboptimality_median']:>14.6e} "
            f"{g['relative_suboptimality_median']:>11.3e} "
            f"{g['queries_median']:>9.1f} {wall:>12.4f}"
        )
    lines.append(f"median relative suboptimality nonincreasing: "
                 f"{'yes' if summary.monotone_median else 'no'}")
    return "\n".join(lines)


def random_policy(mdp: MOMDP, rng: np.random.Generator) -> Policy:
    rows = []
    for _h in range(mdp.horizon):
        row = []
        for si in range(mdp.n_states):
            choices = mdp.available_indices(si)
            row.append(int(rng.choice(choices)))
        rows.append(tuple(row))
    return Policy(tuple(rows))
