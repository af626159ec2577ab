"""Weighted trajectory-set representations of policy values.

Any policy (or finite mixture) of a k-objective instance can be shown to a
person as at most k+1 full trajectories with simplex weights whose weighted
sum of return vectors equals the policy's expected value vector. Two routes
produce such sets: prefix expansion with repeated convex compression, and a
flow decomposition of the layered occupancy graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .momdp import (
    MOMDP,
    MixturePolicy,
    Policy,
    Trajectory,
    policy_digest,
    trajectory_probability,
    trajectory_return,
    validate_policy,
    vector_value,
)

WEIGHT_FLOOR = 1e-15
SIMPLEX_SUM_TOL = 1e-9
SET_WEIGHT_SUM_TOL = 1e-12
VALUE_TOL = 1e-8
FLOW_ZERO_TOL = 1e-12
_PATH_TOL = 1e-15


class NotASimplexError(ValueError):
    """Input weights are not a probability simplex."""


@dataclass(frozen=True)
class WeightedTrajectorySet:
    """Simplex-weighted trajectories standing in for a policy.

    ``sum(w_i * return(traj_i))`` matches the represented policy's expected
    value vector within 1e-8.
    """

    items: tuple[tuple[float, Trajectory], ...]
    represented_policy: str

    def weights(self) -> np.ndarray:
        return np.array([w for w, _ in self.items])


@dataclass
class SetValidation:
    passed: bool
    failures: list[str]
    value_gap: float


def c4_compress(points, weights) -> tuple[np.ndarray, np.ndarray]:
    """Reduce a convex combination of k-vectors to at most k+1 of them.

    Repeatedly lifts k+2 of the active points by an appended 1-coordinate,
    finds a null-space combination, and shifts weight along it until one
    weight hits zero; the pivot is the index maximizing |x_i| / w_i (lowest
    index on ties), with the sign flipped so the pivot weight decreases.
    Weights at or below 1e-15 are dropped. The weighted mean is preserved up
    to rounding. Returns (kept indices into the input, new weights).
    """
    pts = np.asarray(points, dtype=float)
    w = np.array(weights, dtype=float)
    if pts.ndim != 2 or len(w) != len(pts):
        raise ValueError(f"got {len(w)} weights for {len(pts)} points")
    if len(w) and w.min() < -SET_WEIGHT_SUM_TOL:
        raise NotASimplexError(f"weight {w.min()} is negative")
    if abs(w.sum() - 1.0) > SIMPLEX_SUM_TOL:
        raise NotASimplexError(f"weights sum to {w.sum()}, expected 1")
    k = pts.shape[1]
    if len(w) <= k + 1:
        return np.arange(len(w)), w

    w = np.clip(w, 0.0, None)
    active = [int(i) for i in np.flatnonzero(w > WEIGHT_FLOOR)]
    while len(active) > k + 1:
        sel = active[: k + 2]
        lifted = np.vstack([pts[sel].T, np.ones(len(sel))])  # (k+1, k+2)
        # last column of the full Q factor of lifted.T is orthogonal to every
        # row of `lifted`, i.e. a null-space combination
        q, _ = np.linalg.qr(lifted.T, mode="complete")
        x = q[:, -1]
        pivot = int(np.argmax(np.abs(x) / w[sel]))
        if x[pivot] < 0.0:
            x = -x
        gamma = w[sel[pivot]] / x[pivot]
        w[sel] = w[sel] - gamma * x
        w[sel[pivot]] = 0.0
        w[sel] = np.where(w[sel] <= WEIGHT_FLOOR, 0.0, w[sel])
        active = [i for i in active if w[i] > 0.0]
    kept = np.array(active, dtype=int)
    out = w[kept]
    out = out / out.sum()
    return kept, out


@dataclass
class TailValueTable:
    """``table[m, s]``: expected return of the last m steps started at s.

    Step indices line up with the policy: with m steps remaining the policy
    acts with its step H-m assignment.
    """

    table: np.ndarray  # (H+1, |S|, k)

    def value(self, state_index: int, steps_remaining: int) -> np.ndarray:
        return self.table[steps_remaining, state_index]


def tail_value_table(mdp: MOMDP, policy: Policy) -> TailValueTable:
    idx = np.arange(mdp.n_states)
    table = np.zeros((mdp.horizon + 1, mdp.n_states, mdp.objectives))
    for m in range(1, mdp.horizon + 1):
        act = np.asarray(policy.assignment[mdp.horizon - m])
        table[m] = mdp.reward[idx, act] + mdp.transition[idx, act] @ table[m - 1]
    return TailValueTable(table)


def _expand_compress_stages(mdp: MOMDP, policy: Policy):
    """Yield (t, prefixes, weights, heads) after each expansion+compression.

    A prefix is (states tuple, actions tuple, accumulated return); its head
    vector is accumulated return + tail value at the current state. The
    weighted mean of heads equals the policy value at every stage.
    """
    tails = tail_value_table(mdp, policy)
    s0 = mdp.initial_index
    prefixes = [((s0,), (), np.zeros(mdp.objectives))]
    weights = np.array([1.0])
    heads = np.array([tails.value(s0, mdp.horizon)])
    yield 0, prefixes, weights, heads
    for t in range(mdp.horizon):
        expanded = []
        new_w = []
        new_heads = []
        remaining = mdp.horizon - t - 1
        for (states, actions, ret), beta in zip(prefixes, weights):
            s = states[-1]
            a = policy.assignment[t][s]
            step_ret = ret + mdp.reward[s, a]
            row = mdp.transition[s, a]
            for s2 in np.flatnonzero(row > 0.0):
                s2 = int(s2)
                expanded.append((states + (s2,), actions + (a,), step_ret))
                new_w.append(beta * row[s2])
                new_heads.append(step_ret + tails.value(s2, remaining))
        heads = np.asarray(new_heads)
        kept, weights = c4_compress(heads, np.asarray(new_w))
        prefixes = [expanded[i] for i in kept]
        heads = heads[kept]
        yield t + 1, prefixes, weights, heads


def expand_compress(mdp: MOMDP, policy: Policy) -> WeightedTrajectorySet:
    """Represent a policy as at most k+1 trajectories by stepwise expansion.

    Prefixes grow one transition at a time along positive-probability
    successors; after each step the simplex over head vectors (accumulated
    return plus expected tail) is compressed back to k+1 points, which keeps
    the weighted mean pinned to the policy value throughout.
    """
    validate_policy(mdp, policy)
    for t, prefixes, weights, _heads in _expand_compress_stages(mdp, policy):
        pass
    items = tuple(
        (float(w), Trajectory(states, actions))
        for (states, actions, _ret), w in zip(prefixes, weights)
    )
    return WeightedTrajectorySet(items, policy_digest(mdp, policy))


@dataclass
class LayerFlow:
    """Edge flows of the layered occupancy graph of a policy.

    ``flows[t, s, s2]`` is the probability mass moving s -> s2 at step t;
    ``occupancy[t, s]`` is the mass sitting at s before step t. Flow is
    conserved at every internal vertex and the source emits total mass 1.
    """

    flows: np.ndarray      # (H, |S|, |S|)
    occupancy: np.ndarray  # (H+1, |S|)


def build_layer_flow(mdp: MOMDP, policy: Policy) -> LayerFlow:
    idx = np.arange(mdp.n_states)
    flows = np.zeros((mdp.horizon, mdp.n_states, mdp.n_states))
    occupancy = np.zeros((mdp.horizon + 1, mdp.n_states))
    occupancy[0, mdp.initial_index] = 1.0
    for t in range(mdp.horizon):
        act = np.asarray(policy.assignment[t])
        flows[t] = occupancy[t][:, None] * mdp.transition[idx, act]
        occupancy[t + 1] = flows[t].sum(axis=0)
    return LayerFlow(flows, occupancy)


def flow_decompose(mdp: MOMDP, policy: Policy, compress: bool = True) -> WeightedTrajectorySet:
    """Decompose the policy's occupancy flow into weighted trajectories.

    Repeatedly follows the lowest-index positive-flow successor from the
    source, subtracts the bottleneck along the path (zeroing at least one
    edge exactly), and stops once every edge flow is at most 1e-12. With
    ``compress`` the path set is reduced to at most k+1 trajectories.
    """
    validate_policy(mdp, policy)
    remaining = build_layer_flow(mdp, policy).flows.copy()
    s0 = mdp.initial_index
    raw: list[tuple[float, Trajectory]] = []
    max_rounds = 4 * remaining.size + 8
    for _round in range(max_rounds):
        if remaining.max() <= FLOW_ZERO_TOL:
            break
        states = [s0]
        stuck_at = None
        for t in range(mdp.horizon):
            row = remaining[t, states[-1]]
            positive = np.flatnonzero(row > _PATH_TOL)
            if len(positive):
                states.append(int(positive[0]))
            else:
                best = int(np.argmax(row))
                if row[best] <= 0.0:
                    stuck_at = t
                    break
                states.append(best)
        if stuck_at is not None:
            # conservation dust: zero the stranded edge feeding this vertex
            if stuck_at == 0:
                remaining[0, s0, :] = 0.0
            else:
                remaining[stuck_at - 1, states[-2], states[-1]] = 0.0
            continue
        bottleneck = min(
            remaining[t, states[t], states[t + 1]] for t in range(mdp.horizon)
        )
        actions = tuple(policy.assignment[t][states[t]] for t in range(mdp.horizon))
        for t in range(mdp.horizon):
            remaining[t, states[t], states[t + 1]] -= bottleneck
        raw.append((float(bottleneck), Trajectory(tuple(states), actions)))
    else:
        raise RuntimeError("flow extraction failed to terminate")

    digest = policy_digest(mdp, policy)
    if not compress:
        return WeightedTrajectorySet(tuple(raw), digest)
    returns = np.array([trajectory_return(mdp, tr) for _w, tr in raw])
    weights = np.array([w for w, _tr in raw])
    kept, new_w = c4_compress(returns, weights / weights.sum())
    items = tuple((float(new_w[j]), raw[int(i)][1]) for j, i in enumerate(kept))
    return WeightedTrajectorySet(items, digest)


def represent_mixture(
    mdp: MOMDP,
    mixture: MixturePolicy,
    base_sets=None,
) -> WeightedTrajectorySet:
    """Trajectory set for a policy mixture.

    Each component is represented on its own, component weights scale the item
    weights, zero-weight components are dropped, and the union is compressed
    back to at most k+1 trajectories. ``base_sets`` optionally maps a component
    policy digest to a precomputed set.
    """
    pooled: list[tuple[float, Trajectory]] = []
    for comp_w, comp in mixture.components:
        if comp_w <= 0.0:
            continue
        digest = policy_digest(mdp, comp)
        base = base_sets.get(digest) if base_sets else None
        if base is None:
            base = expand_compress(mdp, comp)
        pooled.extend((comp_w * w, tr) for w, tr in base.items)
    if not pooled:
        raise ValueError("mixture has no positive-weight component")
    returns = np.array([trajectory_return(mdp, tr) for _w, tr in pooled])
    weights = np.array([w for w, _tr in pooled])
    kept, new_w = c4_compress(returns, weights)
    items = tuple((float(new_w[j]), pooled[int(i)][1]) for j, i in enumerate(kept))
    return WeightedTrajectorySet(items, policy_digest(mdp, mixture))


def _mixture_probability(mdp, policy, trajectory) -> float:
    if isinstance(policy, MixturePolicy):
        return sum(
            w * trajectory_probability(mdp, comp, trajectory)
            for w, comp in policy.components
        )
    return trajectory_probability(mdp, policy, trajectory)


def validate_set(
    mdp: MOMDP,
    policy: Policy | MixturePolicy,
    wts: WeightedTrajectorySet,
) -> SetValidation:
    """Check size, simplex weights, support, and exact value of a set."""
    failures = []
    k = mdp.objectives
    if len(wts.items) > k + 1:
        failures.append(f"size: {len(wts.items)} trajectories exceed k+1 = {k + 1}")
    weights = wts.weights()
    if len(weights) and weights.min() < 0.0:
        failures.append(f"simplex: weight {weights.min()} is negative")
    if abs(weights.sum() - 1.0) > SET_WEIGHT_SUM_TOL:
        failures.append(f"simplex: weights sum to {weights.sum()}")
    for i, (_w, tr) in enumerate(wts.items):
        if _mixture_probability(mdp, policy, tr) <= 0.0:
            failures.append(f"support: trajectory {i} has probability 0 under the policy")
    target = vector_value(mdp, policy)
    combined = np.zeros(k)
    for w, tr in wts.items:
        combined += w * trajectory_return(mdp, tr)
    gap = float(np.max(np.abs(combined - target))) if k else 0.0
    if gap > VALUE_TOL:
        failures.append(f"value: weighted return is off by {gap}")
    return SetValidation(passed=not failures, failures=failures, value_gap=gap)


def set_to_dict(mdp: MOMDP, wts: WeightedTrajectorySet) -> dict:
    """JSON-ready form with labels, per-item returns, and the represented value."""
    items = []
    value = np.zeros(mdp.objectives)
    for w, tr in wts.items:
        ret = trajectory_return(mdp, tr)
        value += w * ret
        items.append({
            "weight": float(w),
            "steps": [
                {"state": mdp.states[s], "action": mdp.actions[a]}
                for s, a in zip(tr.states, tr.actions)
            ],
            "terminal_state": mdp.states[tr.states[-1]],
            "return": [float(v) for v in ret],
        })
    return {
        "type": "trajectory_set",
        "represented_policy": wts.represented_policy,
        "value": [float(v) for v in value],
        "items": items,
    }
