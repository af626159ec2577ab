"""Comparative feedback: queries, verdicts, the simulated user, and sessions.

A comparison shows two policies (or mixtures) and collects one of three
verdicts. The simulated user holds a hidden nonnegative preference vector and
a precision threshold: it prefers the left side when the preference-weighted
value gap exceeds the threshold, the right side when it falls below the
negated threshold, and reports the pair indistinguishable otherwise. Verdicts
are computed from exact value vectors, never from sampled rollouts, so a
query's presentation payload (explicit map or trajectory set) never changes
the answer.
"""

from __future__ import annotations

import enum
import itertools
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .momdp import (
    MOMDP,
    MixturePolicy,
    Policy,
    policy_digest,
    policy_to_table,
    vector_value,
)
from .trajectories import expand_compress, represent_mixture, set_to_dict


class Verdict(enum.Enum):
    PREFER_LEFT = "left"
    PREFER_RIGHT = "right"
    INDISTINGUISHABLE = "indistinguishable"


ComparisonAnswer = Verdict


class OracleError(RuntimeError):
    pass


class AlreadyPendingError(OracleError):
    """post_query while a query is already awaiting an answer."""


class NotPendingError(OracleError):
    """receive_answer with no query outstanding."""


class UnknownQueryError(OracleError):
    """receive_answer with a query_id other than the pending one."""


class BudgetExhaustedError(OracleError):
    """post_query beyond the session's query budget."""


@dataclass
class SimulatedUser:
    """Threshold user with hidden linear preference over objectives.

    Attributes:
        preference: nonnegative weight per objective.
        precision: indistinguishability threshold, strictly positive.
        norm_bound: stored Euclidean bound on the preference norm; informational.
        queries_answered: running count, incremented by every answer.
    """

    preference: np.ndarray
    precision: float = 1e-6
    norm_bound: float | None = None
    queries_answered: int = 0

    def __post_init__(self):
        self.preference = np.asarray(self.preference, dtype=float)
        if self.preference.ndim != 1:
            raise ValueError("preference must be a vector")
        if self.preference.min() < 0.0:
            raise ValueError(f"preference component {self.preference.min()} is negative")
        if not self.precision > 0.0:
            raise ValueError(f"precision must be positive, got {self.precision}")

    def answer_query(self, query: "ComparisonQuery") -> Verdict:
        return simulated_answer(self, query.left.value, query.right.value)


def simulated_answer(user: SimulatedUser, left_value, right_value) -> Verdict:
    left = np.asarray(left_value, dtype=float)
    right = np.asarray(right_value, dtype=float)
    if left.shape != user.preference.shape or right.shape != user.preference.shape:
        raise ValueError(
            f"value shapes {left.shape}/{right.shape} do not match preference "
            f"shape {user.preference.shape}")
    gap = float(user.preference @ (left - right))
    user.queries_answered += 1
    if gap > user.precision:
        return Verdict.PREFER_LEFT
    if gap < -user.precision:
        return Verdict.PREFER_RIGHT
    return Verdict.INDISTINGUISHABLE


@dataclass(frozen=True)
class ComparisonSide:
    """One side of a query: the target, its exact value, and a display payload."""

    target: Policy | MixturePolicy
    value: np.ndarray
    payload: dict


@dataclass(frozen=True)
class ComparisonQuery:
    query_id: str
    phase: str  # benchmark | ratio | precision
    left: ComparisonSide
    right: ComparisonSide


class QueryBuilder:
    """Materializes queries with stable ids and representation payloads.

    Ids are deterministic ("q0001", "q0002", ...) so a replayed run emits the
    identical sequence. Trajectory-set payloads are cached per component
    policy, which keeps successive mixture probes cheap.
    """

    def __init__(self, mdp: MOMDP, representation: str = "explicit"):
        if representation not in ("explicit", "trajectory_set"):
            raise ValueError(f"unknown representation {representation!r}")
        self.mdp = mdp
        self.representation = representation
        self._counter = itertools.count(1)
        self._sets: dict[str, object] = {}

    def build(self, phase: str, left, right) -> ComparisonQuery:
        qid = f"q{next(self._counter):04d}"
        return ComparisonQuery(qid, phase, self._side(left), self._side(right))

    def _side(self, target) -> ComparisonSide:
        value = vector_value(self.mdp, target)
        if self.representation == "trajectory_set":
            payload = set_to_dict(self.mdp, self._trajectory_set(target))
        elif isinstance(target, MixturePolicy):
            payload = {
                "type": "explicit_mixture",
                "components": [
                    {"weight": float(w), **policy_to_table(self.mdp, comp)}
                    for w, comp in target.components
                ],
            }
        else:
            payload = {"type": "explicit", **policy_to_table(self.mdp, target)}
        return ComparisonSide(target, value, payload)

    def _trajectory_set(self, target):
        if isinstance(target, MixturePolicy):
            for _w, comp in target.components:
                self._component_set(comp)
            return represent_mixture(self.mdp, target, base_sets=self._sets)
        return self._component_set(target)

    def _component_set(self, policy: Policy):
        digest = policy_digest(self.mdp, policy)
        if digest not in self._sets:
            self._sets[digest] = expand_compress(self.mdp, policy)
        return self._sets[digest]


@dataclass
class TranscriptRecord:
    query_id: str
    phase: str
    left_value: list[float]
    right_value: list[float]
    verdict: str
    timestamp: float

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "phase": self.phase,
            "left_value": self.left_value,
            "right_value": self.right_value,
            "verdict": self.verdict,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TranscriptRecord":
        return cls(
            query_id=doc["query_id"],
            phase=doc["phase"],
            left_value=[float(v) for v in doc["left_value"]],
            right_value=[float(v) for v in doc["right_value"]],
            verdict=doc["verdict"],
            timestamp=float(doc["timestamp"]),
        )


class OracleSession:
    """Query/answer exchange with an append-only transcript.

    The session is a two-state machine: Ready (no query outstanding) and
    AwaitingAnswer. ``post_query`` moves Ready -> AwaitingAnswer and enforces
    the optional query budget; ``receive_answer`` validates the query id,
    appends a transcript record, and returns to Ready. ``ask`` is the
    synchronous convenience for callers that supply an ``answer_fn``; the HTTP
    service instead drives post/receive around its own request cycle.
    """

    def __init__(self, answer_fn=None, budget: int | None = None):
        if budget is not None and budget < 1:
            raise ValueError(f"budget must be positive, got {budget}")
        self.answer_fn = answer_fn
        self.budget = budget
        self.transcript: list[TranscriptRecord] = []
        self.pending: ComparisonQuery | None = None
        self.posted = 0

    @property
    def state(self) -> str:
        return "awaiting_answer" if self.pending is not None else "ready"

    def post_query(self, query: ComparisonQuery) -> None:
        if self.pending is not None:
            raise AlreadyPendingError(
                f"query {self.pending.query_id} is still awaiting an answer")
        if self.budget is not None and self.posted >= self.budget:
            raise BudgetExhaustedError(f"query budget {self.budget} exhausted")
        self.pending = query
        self.posted += 1

    def receive_answer(
        self,
        query_id: str,
        verdict: Verdict,
        timestamp: float | None = None,
    ) -> TranscriptRecord:
        if self.pending is None:
            raise NotPendingError("no query is awaiting an answer")
        if query_id != self.pending.query_id:
            raise UnknownQueryError(
                f"answer for {query_id!r}, pending query is {self.pending.query_id!r}")
        if not isinstance(verdict, Verdict):
            raise ValueError(f"unknown verdict {verdict!r}")
        record = TranscriptRecord(
            query_id=query_id,
            phase=self.pending.phase,
            left_value=[float(v) for v in self.pending.left.value],
            right_value=[float(v) for v in self.pending.right.value],
            verdict=verdict.value,
            timestamp=time.time() if timestamp is None else timestamp,
        )
        self.transcript.append(record)
        self.pending = None
        return record

    def ask(self, query: ComparisonQuery) -> Verdict:
        if self.answer_fn is None:
            raise OracleError("session has no answer_fn; drive it asynchronously")
        self.post_query(query)
        verdict = self.answer_fn(query)
        self.receive_answer(query.query_id, verdict)
        return verdict

    def verdicts(self) -> list[str]:
        return [r.verdict for r in self.transcript]


def scripted_answerer(verdicts):
    """answer_fn replaying a fixed verdict sequence (strings or Verdicts)."""
    queue = [v if isinstance(v, Verdict) else Verdict(v) for v in verdicts]
    it = iter(queue)

    def answer(_query: ComparisonQuery) -> Verdict:
        try:
            return next(it)
        except StopIteration:
            raise OracleError("scripted verdicts exhausted") from None

    return answer


def write_transcript(path, records) -> None:
    """Append-only JSON lines, fsynced so a crash never loses an answered query."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def read_transcript(path) -> list[TranscriptRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(TranscriptRecord.from_dict(json.loads(line)))
    return records
