"""Finite-horizon multi-objective MDPs: data model, planning, evaluation.

An instance is a finite MDP whose reward is a vector in [0, 1]^k per
state-action pair, together with a designated "do nothing" action that is
available only at the initial state, self-loops there, and pays zero reward.
Policies are time-indexed deterministic maps (step, state) -> action;
stochastic behaviour enters only through finite mixtures of such policies.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

TRANSITION_MASS_TOL = 1e-9
MIXTURE_WEIGHT_TOL = 1e-12


class InstanceError(ValueError):
    """An instance document or derived object failed validation."""


def _canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass
class MOMDP:
    """A validated multi-objective MDP with dense transition/reward arrays.

    Attributes:
        states: state labels, index order is the canonical order everywhere.
        actions: action labels; the do-nothing action is one of these.
        initial_state: label of the start state.
        horizon: number of decision steps H >= 1.
        objectives: number of reward objectives k >= 1.
        transition: float array (|S|, |A|, |S|); rows of unavailable pairs are zero.
        reward: float array (|S|, |A|, k) with entries in [0, 1].
        available: bool array (|S|, |A|).
        do_nothing: (state label, action label) designation.

    Construct through :func:`parse_instance`; arrays are frozen read-only and
    the object is treated as immutable after construction.
    """

    states: tuple[str, ...]
    actions: tuple[str, ...]
    initial_state: str
    horizon: int
    objectives: int
    transition: np.ndarray
    reward: np.ndarray
    available: np.ndarray
    do_nothing: tuple[str, str]
    _digest: str = field(default="", repr=False)

    def __post_init__(self):
        self.transition.setflags(write=False)
        self.reward.setflags(write=False)
        self.available.setflags(write=False)

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def initial_index(self) -> int:
        return self.states.index(self.initial_state)

    @property
    def value_bound(self) -> float:
        """Upper bound sqrt(k) * H on the Euclidean norm of any policy value."""
        return math.sqrt(self.objectives) * self.horizon

    @property
    def digest(self) -> str:
        if not self._digest:
            doc = instance_to_dict(self)
            h = hashlib.sha256(_canonical_json(doc).encode("utf-8")).hexdigest()
            object.__setattr__(self, "_digest", h)
        return self._digest

    def available_indices(self, state_index: int) -> np.ndarray:
        return np.flatnonzero(self.available[state_index])


@dataclass(frozen=True)
class Policy:
    """Time-indexed deterministic policy: ``assignment[h][s]`` is an action index."""

    assignment: tuple[tuple[int, ...], ...]

    @property
    def horizon(self) -> int:
        return len(self.assignment)

    def action(self, step: int, state_index: int) -> int:
        return self.assignment[step][state_index]


@dataclass(frozen=True)
class MixturePolicy:
    """Finite mixture of deterministic policies; one component runs the whole episode.

    Weights must be nonnegative and sum to 1 within 1e-12.
    """

    components: tuple[tuple[float, Policy], ...]

    def __post_init__(self):
        weights = [w for w, _ in self.components]
        if not self.components:
            raise ValueError("mixture components must be nonempty")
        if min(weights) < -MIXTURE_WEIGHT_TOL:
            raise ValueError(f"mixture weight {min(weights)} is negative")
        if abs(sum(weights) - 1.0) > MIXTURE_WEIGHT_TOL:
            raise ValueError(f"mixture weights sum to {sum(weights)}, expected 1")


@dataclass(frozen=True)
class Trajectory:
    """A full episode: H+1 state indices and the H action indices taken."""

    states: tuple[int, ...]
    actions: tuple[int, ...]


def parse_instance(doc: dict) -> MOMDP:
    """Validate an instance document and build the dense-array MDP.

    Raises InstanceError naming the offending field on any violation:
    unknown references, transition rows whose mass is off by more than 1e-9,
    rewards outside [0, 1], or a do-nothing designation that is not an exact
    zero-reward self-loop at the initial state.
    """
    if not isinstance(doc, dict):
        raise InstanceError("instance document must be a JSON object")
    for key in ("k", "horizon", "states", "actions", "initial_state", "do_nothing",
                "transitions", "rewards"):
        if key not in doc:
            raise InstanceError(f"missing field: {key!r}")

    k = doc["k"]
    horizon = doc["horizon"]
    if not isinstance(k, int) or k < 1:
        raise InstanceError(f"k must be a positive integer, got {k!r}")
    if not isinstance(horizon, int) or horizon < 1:
        raise InstanceError(f"horizon must be a positive integer, got {horizon!r}")

    states = list(doc["states"])
    actions = list(doc["actions"])
    if not states or len(set(states)) != len(states):
        raise InstanceError("states must be a nonempty list of unique labels")
    if not actions or len(set(actions)) != len(actions):
        raise InstanceError("actions must be a nonempty list of unique labels")
    s_index = {s: i for i, s in enumerate(states)}
    a_index = {a: i for i, a in enumerate(actions)}

    initial = doc["initial_state"]
    if initial not in s_index:
        raise InstanceError(f"initial_state {initial!r} is not a state")

    dn = doc["do_nothing"]
    if not isinstance(dn, dict) or "state" not in dn or "action" not in dn:
        raise InstanceError("do_nothing must be an object with 'state' and 'action'")
    dn_state, dn_action = dn["state"], dn["action"]
    if dn_state not in s_index:
        raise InstanceError(f"do_nothing state {dn_state!r} is not a state")
    if dn_action not in a_index:
        raise InstanceError(f"do_nothing action {dn_action!r} is not an action")
    if dn_state != initial:
        raise InstanceError(
            f"do_nothing state {dn_state!r} must equal the initial state {initial!r}")

    n_s, n_a = len(states), len(actions)
    available = np.zeros((n_s, n_a), dtype=bool)
    avail_doc = doc.get("available_actions")
    if avail_doc is None:
        # default: everything available, except the do-nothing action which the
        # designation restricts to the initial state
        available[:, :] = True
        available[:, a_index[dn_action]] = False
        available[s_index[dn_state], a_index[dn_action]] = True
    else:
        for s, acts in avail_doc.items():
            if s not in s_index:
                raise InstanceError(f"available_actions references unknown state {s!r}")
            if not acts:
                raise InstanceError(f"available_actions[{s!r}] is empty")
            for a in acts:
                if a not in a_index:
                    raise InstanceError(
                        f"available_actions[{s!r}] references unknown action {a!r}")
                available[s_index[s], a_index[a]] = True
    if not available.any(axis=1).all():
        missing = states[int(np.flatnonzero(~available.any(axis=1))[0])]
        raise InstanceError(f"state {missing!r} has no available action")

    dn_s, dn_a = s_index[dn_state], a_index[dn_action]
    if not available[dn_s, dn_a]:
        raise InstanceError(f"do_nothing action {dn_action!r} not available at {dn_state!r}")
    off_states = [states[i] for i in range(n_s) if i != dn_s and available[i, dn_a]]
    if off_states:
        raise InstanceError(
            f"do_nothing action {dn_action!r} must be available only at {dn_state!r}, "
            f"also found at {off_states[0]!r}")

    transition = np.zeros((n_s, n_a, n_s), dtype=float)
    reward = np.zeros((n_s, n_a, k), dtype=float)
    tr_doc, rw_doc = doc["transitions"], doc["rewards"]
    for s, si in s_index.items():
        for a, ai in a_index.items():
            if not available[si, ai]:
                continue
            try:
                row = tr_doc[s][a]
            except (KeyError, TypeError):
                raise InstanceError(f"missing transitions[{s!r}][{a!r}]") from None
            total = 0.0
            for s2, p in row.items():
                if s2 not in s_index:
                    raise InstanceError(
                        f"transitions[{s!r}][{a!r}] references unknown state {s2!r}")
                p = float(p)
                if p < 0:
                    raise InstanceError(
                        f"transition mass: transitions[{s!r}][{a!r}][{s2!r}] = {p} is negative")
                transition[si, ai, s_index[s2]] = p
                total += p
            if abs(total - 1.0) > TRANSITION_MASS_TOL:
                raise InstanceError(
                    f"transition mass: transitions[{s!r}][{a!r}] sums to {total}")
            try:
                vec = rw_doc[s][a]
            except (KeyError, TypeError):
                raise InstanceError(f"missing rewards[{s!r}][{a!r}]") from None
            if len(vec) != k:
                raise InstanceError(
                    f"rewards[{s!r}][{a!r}] has length {len(vec)}, expected k = {k}")
            for i, v in enumerate(vec):
                v = float(v)
                if v < 0.0 or v > 1.0:
                    raise InstanceError(
                        f"reward range: rewards[{s!r}][{a!r}][{i}] = {v}")
                reward[si, ai, i] = v

    if transition[dn_s, dn_a, dn_s] != 1.0:
        raise InstanceError(
            "do_nothing: transition must self-loop with probability exactly 1")
    if np.any(reward[dn_s, dn_a] != 0.0):
        raise InstanceError("do_nothing: reward must be the zero vector")

    return MOMDP(
        states=tuple(states),
        actions=tuple(actions),
        initial_state=initial,
        horizon=horizon,
        objectives=k,
        transition=transition,
        reward=reward,
        available=available,
        do_nothing=(dn_state, dn_action),
    )


def load_instance(path) -> MOMDP:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InstanceError(f"malformed JSON: {exc}") from None
    return parse_instance(doc)


def instance_to_dict(mdp: MOMDP) -> dict:
    """Canonical round-trippable document; zero transition entries are dropped."""
    transitions = {}
    rewards = {}
    available = {}
    for si, s in enumerate(mdp.states):
        avail = [mdp.actions[ai] for ai in mdp.available_indices(si)]
        available[s] = avail
        transitions[s] = {}
        rewards[s] = {}
        for a in avail:
            ai = mdp.actions.index(a)
            row = mdp.transition[si, ai]
            transitions[s][a] = {
                mdp.states[j]: float(row[j]) for j in np.flatnonzero(row > 0.0)
            }
            rewards[s][a] = [float(v) for v in mdp.reward[si, ai]]
    return {
        "k": mdp.objectives,
        "horizon": mdp.horizon,
        "states": list(mdp.states),
        "actions": list(mdp.actions),
        "initial_state": mdp.initial_state,
        "do_nothing": {"state": mdp.do_nothing[0], "action": mdp.do_nothing[1]},
        "available_actions": available,
        "transitions": transitions,
        "rewards": rewards,
    }


def instance_json_text(mdp: MOMDP) -> str:
    return _canonical_json(instance_to_dict(mdp)) + "\n"


def validate_policy(mdp: MOMDP, policy: Policy) -> None:
    if policy.horizon != mdp.horizon:
        raise InstanceError(
            f"policy has {policy.horizon} steps, instance horizon is {mdp.horizon}")
    for h, row in enumerate(policy.assignment):
        if len(row) != mdp.n_states:
            raise InstanceError(f"policy step {h} covers {len(row)} states")
        for si, ai in enumerate(row):
            if not (0 <= ai < mdp.n_actions) or not mdp.available[si, ai]:
                raise InstanceError(
                    f"policy assigns unavailable action at step {h}, "
                    f"state {mdp.states[si]!r}")


def policy_to_table(mdp: MOMDP, policy: Policy) -> dict:
    return {
        "assignment": {
            str(h): {mdp.states[si]: mdp.actions[ai] for si, ai in enumerate(row)}
            for h, row in enumerate(policy.assignment)
        }
    }


def policy_from_table(mdp: MOMDP, table: dict) -> Policy:
    doc = table.get("assignment", table)
    if "policy" in table and isinstance(table["policy"], dict):
        doc = table["policy"].get("assignment", doc)
    rows = []
    for h in range(mdp.horizon):
        key = str(h)
        if key not in doc:
            raise InstanceError(f"policy table missing step {h}")
        step = doc[key]
        row = []
        for s in mdp.states:
            if s not in step:
                raise InstanceError(f"policy table step {h} missing state {s!r}")
            a = step[s]
            if a not in mdp.actions:
                raise InstanceError(f"policy table references unknown action {a!r}")
            row.append(mdp.actions.index(a))
        rows.append(tuple(row))
    policy = Policy(tuple(rows))
    validate_policy(mdp, policy)
    return policy


def policy_digest(mdp: MOMDP, policy: Policy | MixturePolicy) -> str:
    if isinstance(policy, MixturePolicy):
        body = {
            "mdp": mdp.digest,
            "mixture": [[w, [list(r) for r in p.assignment]] for w, p in policy.components],
        }
    else:
        body = {"mdp": mdp.digest, "assignment": [list(r) for r in policy.assignment]}
    return hashlib.sha256(_canonical_json(body).encode("utf-8")).hexdigest()


def do_nothing_policy(mdp: MOMDP) -> Policy:
    """The policy that does nothing at the start state; its value is exactly zero.

    States other than s0 are unreachable under it, so they get the lowest
    available action index.
    """
    dn_a = mdp.actions.index(mdp.do_nothing[1])
    row = []
    for si in range(mdp.n_states):
        if si == mdp.initial_index:
            row.append(dn_a)
        else:
            row.append(int(mdp.available_indices(si)[0]))
    return Policy(tuple(tuple(row) for _ in range(mdp.horizon)))


def scalarized_plan(mdp: MOMDP, direction) -> tuple[Policy, float]:
    """Backward induction for the scalar reward <direction, r(s, a)>.

    Ties at each (step, state) break toward the lowest action index. Returns
    the optimal time-indexed deterministic policy and its scalar value from
    the initial state.
    """
    w = np.asarray(direction, dtype=float)
    if w.shape != (mdp.objectives,):
        raise ValueError(
            f"direction has shape {w.shape}, expected ({mdp.objectives},)")
    scal = mdp.reward @ w  # (S, A)
    masked_bias = np.where(mdp.available, 0.0, -np.inf)
    values = np.zeros(mdp.n_states)
    rows = []
    for _h in range(mdp.horizon):
        q = scal + mdp.transition @ values + masked_bias
        best = np.argmax(q, axis=1)  # first max index = lowest action on ties
        rows.append(tuple(int(a) for a in best))
        values = q[np.arange(mdp.n_states), best]
    rows.reverse()
    policy = Policy(tuple(rows))
    return policy, float(values[mdp.initial_index])


def vector_value(mdp: MOMDP, policy: Policy | MixturePolicy) -> np.ndarray:
    """Expected k-vector return from the initial state.

    Mixture values are the convex combination of component values, accumulated
    in component order so repeated calls are bit-identical.
    """
    if isinstance(policy, MixturePolicy):
        total = np.zeros(mdp.objectives)
        for w, comp in policy.components:
            total = total + w * vector_value(mdp, comp)
        return total
    values = np.zeros((mdp.n_states, mdp.objectives))
    idx = np.arange(mdp.n_states)
    for h in range(mdp.horizon - 1, -1, -1):
        act = np.asarray(policy.assignment[h])
        values = mdp.reward[idx, act] + mdp.transition[idx, act] @ values
    return values[mdp.initial_index].copy()


def trajectory_return(mdp: MOMDP, trajectory: Trajectory) -> np.ndarray:
    """Sum of reward vectors along the trajectory, in time order."""
    _check_trajectory(mdp, trajectory)
    total = np.zeros(mdp.objectives)
    for s, a in zip(trajectory.states, trajectory.actions):
        total += mdp.reward[s, a]
    return total


def trajectory_probability(mdp: MOMDP, policy: Policy, trajectory: Trajectory) -> float:
    """Probability of the trajectory under the policy; zero on any action mismatch."""
    _check_trajectory(mdp, trajectory)
    prob = 1.0
    for h, (s, a) in enumerate(zip(trajectory.states, trajectory.actions)):
        if policy.assignment[h][s] != a:
            return 0.0
        prob *= mdp.transition[s, a, trajectory.states[h + 1]]
        if prob == 0.0:
            return 0.0
    return prob


def _check_trajectory(mdp: MOMDP, trajectory: Trajectory) -> None:
    if len(trajectory.states) != mdp.horizon + 1 or len(trajectory.actions) != mdp.horizon:
        raise InstanceError(
            f"trajectory has {len(trajectory.actions)} steps, expected {mdp.horizon}")
    if trajectory.states[0] != mdp.initial_index:
        raise InstanceError("trajectory does not start at the initial state")
    for s in trajectory.states:
        if not (0 <= s < mdp.n_states):
            raise InstanceError(f"trajectory references unknown state index {s}")
    for h, a in enumerate(trajectory.actions):
        if not (0 <= a < mdp.n_actions) or not mdp.available[trajectory.states[h], a]:
            raise InstanceError(f"trajectory uses unavailable action at step {h}")


def count_policies(mdp: MOMDP) -> int:
    per_state = [len(mdp.available_indices(si)) for si in range(mdp.n_states)]
    return math.prod(per_state) ** mdp.horizon


def enumerate_policies(mdp: MOMDP, limit: int = 1_000_000):
    """Yield every time-indexed deterministic policy exactly once.

    Order is deterministic: row-major over (step, state) with ascending action
    indices. Raises ValueError when the count exceeds `limit`.
    """
    total = count_policies(mdp)
    if total > limit:
        raise ValueError(f"limit exceeded: {total} policies > limit {limit}")
    slots = []
    for _h in range(mdp.horizon):
        for si in range(mdp.n_states):
            slots.append([int(a) for a in mdp.available_indices(si)])
    n = mdp.n_states
    for combo in itertools.product(*slots):
        rows = tuple(tuple(combo[h * n:(h + 1) * n]) for h in range(mdp.horizon))
        yield Policy(rows)


def enumerate_trajectories(mdp: MOMDP, policy: Policy):
    """Yield (trajectory, probability) over the policy's support, depth-first
    with ascending successor indices."""
    def walk(h, states, actions, prob):
        if h == mdp.horizon:
            yield Trajectory(tuple(states), tuple(actions)), prob
            return
        s = states[-1]
        a = policy.assignment[h][s]
        row = mdp.transition[s, a]
        for s2 in np.flatnonzero(row > 0.0):
            yield from walk(h + 1, states + [int(s2)], actions + [a], prob * row[s2])

    yield from walk(0, [mdp.initial_index], [], 1.0)
