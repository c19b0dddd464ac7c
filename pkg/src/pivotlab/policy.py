"""Tabular softmax policies over tree nodes.

Logits are stored sparsely: a node without an explicit vector has all-zero
logits (the uniform distribution).  This keeps policies over very large
complete trees cheap while still defining a logit vector for every internal
node.
"""
from __future__ import annotations

import json
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .env import Environment, ExplicitTree
from .errors import ContractError, DomainError

FORMAT_VERSION = 1
MAX_MATERIALIZED = 2_000_000


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z))
    return e / e.sum()


class LogitTable:
    """Read-side of a policy: distributions, cached per node."""

    def __init__(self, env: Environment, logits: dict[int, np.ndarray] | None = None):
        self.env = env
        self.logits: dict[int, np.ndarray] = {}
        # node -> (probs, cdf as list, log-probs as list)
        self._rows: dict[int, tuple[np.ndarray, list[float], list[float]]] = {}
        self._touched: set[int] | None = None
        for node, vec in (logits or {}).items():
            self._check(node, vec)
            self.logits[int(node)] = np.array(vec, dtype=np.float64)

    @property
    def env_id(self) -> str:
        return self.env.env_id

    def _check(self, node: int, vec) -> None:
        if not self.env.contains(node) or self.env.is_leaf(node):
            raise DomainError(f"node {node} is not internal")
        if len(vec) != self.env.arity(node):
            raise DomainError(f"logit vector of length {len(vec)} for arity {self.env.arity(node)}")

    def vector(self, node: int) -> np.ndarray:
        vec = self.logits.get(node)
        if vec is None:
            if self.env.is_leaf(node):
                raise DomainError(f"node {node} is a leaf")
            return np.zeros(self.env.arity(node))
        return vec.copy()

    def _row(self, node: int):
        row = self._rows.get(node)
        if row is None:
            vec = self.logits.get(node)
            if vec is None:
                if not self.env.contains(node) or self.env.is_leaf(node):
                    raise DomainError(f"node {node} is not internal")
                vec = np.zeros(self.env.arity(node))
            p = softmax(vec)
            with np.errstate(divide="ignore"):
                logp = np.log(p)
            row = (p, np.cumsum(p).tolist(), logp.tolist())
            self._rows[node] = row
        return row

    def probs(self, node: int) -> np.ndarray:
        return self._row(node)[0]

    def touched(self) -> set[int]:
        """Nodes with explicit logits, closed under taking ancestors."""
        if self._touched is None:
            out: set[int] = set()
            for node in self.logits:
                while node is not None and node not in out:
                    out.add(node)
                    node = self.env.parent(node)
            self._touched = out
        return self._touched

    def same_logits(self, other: "LogitTable") -> bool:
        nodes = set(self.logits) | set(other.logits)
        return all(np.array_equal(self.vector(n), other.vector(n)) for n in nodes)


class Policy(LogitTable):
    """Mutable policy; ``theta`` is the logit table."""

    def set_logits(self, node: int, vec) -> None:
        self._check(node, vec)
        if node not in self.logits:
            self._touched = None
        self.logits[node] = np.array(vec, dtype=np.float64)
        self._rows.pop(node, None)

    def add(self, node: int, delta: np.ndarray) -> None:
        vec = self.logits.get(node)
        if vec is None:
            self.set_logits(node, np.zeros(self.env.arity(node)) + delta)
        else:
            vec += delta
            self._rows.pop(node, None)

    def copy(self) -> "Policy":
        return Policy(self.env, {n: v.copy() for n, v in self.logits.items()})


class ReferencePolicy(LogitTable):
    """Frozen copy of a policy's logits, used for the KL penalty."""

    def __init__(self, env, logits=None):
        super().__init__(env, logits)
        for vec in self.logits.values():
            vec.flags.writeable = False


def snapshot(policy: LogitTable) -> ReferencePolicy:
    return ReferencePolicy(policy.env, {n: v.copy() for n, v in policy.logits.items()})


def init_policy(env: Environment, mode: str = "uniform", scale: float = 1.0, seed: int = 0) -> Policy:
    """``mode`` is one of ``uniform``, ``seeded-random`` or ``fixture-matched``."""
    if mode == "uniform":
        return Policy(env)
    if mode == "seeded-random":
        nodes = list(env.internal_nodes()) if env.n_nodes <= 2 * MAX_MATERIALIZED else None
        if nodes is None or len(nodes) > MAX_MATERIALIZED:
            raise DomainError("tree too large to materialize a random logit table")
        rng = np.random.default_rng(seed)
        return Policy(env, {n: rng.uniform(-scale, scale, env.arity(n)) for n in nodes})
    if mode == "fixture-matched":
        if not isinstance(env, ExplicitTree) or not env.edge_probs:
            raise DomainError("environment has no bundled edge probabilities")
        return Policy(env, {n: np.log(np.asarray(p)) for n, p in env.edge_probs.items()})
    raise DomainError(f"unknown init mode {mode!r}")


def action_distribution(policy: LogitTable, node: int) -> np.ndarray:
    return policy.probs(node).copy()


@dataclass
class Trajectory:
    prompt_id: int
    actions: list[tuple[int, int]] = field(default_factory=list)
    behavior_logprobs: list[float] = field(default_factory=list)
    reward: int | None = None
    origin: str = "main"
    prefix_len: int = 0
    leaf: int | None = None

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def suffix_len(self) -> int:
        return len(self.actions) - self.prefix_len

    def state_at(self, offset: int) -> int:
        """Node occupied after ``offset`` tokens."""
        if offset == len(self.actions):
            return self.leaf
        return self.actions[offset][0]


def sample_trajectory(
    policy: LogitTable,
    env: Environment,
    rng: np.random.Generator,
    start: tuple[int, Trajectory] | None = None,
    prompt_id: int = 0,
) -> Trajectory:
    """Roll out to a leaf by inverse-CDF sampling, one uniform draw per token.

    With ``start=(node, parent)``, the parent's tokens up to ``node`` are
    copied verbatim (with their behavior log-probs) and sampling resumes at
    ``node``.
    """
    if start is None:
        node = env.root
        traj = Trajectory(prompt_id=prompt_id)
    else:
        node, parent = start
        offset = next((i for i, (n, _) in enumerate(parent.actions) if n == node), None)
        if offset is None:
            raise DomainError(f"node {node} is not an internal state of the parent trajectory")
        traj = Trajectory(
            prompt_id=parent.prompt_id,
            actions=list(parent.actions[:offset]),
            behavior_logprobs=list(parent.behavior_logprobs[:offset]),
            origin="auxiliary",
            prefix_len=offset,
        )
    if env.is_leaf(node):
        raise DomainError("cannot start a rollout at a leaf")
    draws = rng.random(env.depth - env.node_depth(node)).tolist()
    child = env.child
    row = policy._row
    i = 0
    while True:
        _, cdf, logp = row(node)
        a = min(bisect_right(cdf, draws[i]), len(cdf) - 1)
        traj.actions.append((node, a))
        traj.behavior_logprobs.append(logp[a])
        node = child(node, a)
        i += 1
        if env.is_leaf(node):
            break
    traj.leaf = node
    traj.reward = int(env.is_correct(node))
    return traj


def greedy_trajectory(policy: LogitTable, env: Environment, prompt_id: int = 0) -> Trajectory:
    """Argmax rollout; ties go to the lowest child index."""
    traj = Trajectory(prompt_id=prompt_id, origin="eval")
    node = env.root
    while not env.is_leaf(node):
        p, _, logp = policy._row(node)
        a = int(np.argmax(p))
        traj.actions.append((node, a))
        traj.behavior_logprobs.append(logp[a])
        node = env.child(node, a)
    traj.leaf = node
    traj.reward = int(env.is_correct(node))
    return traj


def log_prob(policy: LogitTable, trajectory: Trajectory) -> np.ndarray:
    out = np.empty(len(trajectory.actions))
    for t, (node, a) in enumerate(trajectory.actions):
        logp = policy._row(node)[2]
        if not 0 <= a < len(logp):
            raise DomainError(f"action {a} out of range at node {node}")
        out[t] = logp[a]
    return out


def entropy(policy: LogitTable, node: int) -> float:
    p = policy.probs(node)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def kl_to_ref(policy: LogitTable, ref: LogitTable, node: int, action: int) -> float:
    """Per-token k3 penalty ``x - log x - 1`` with ``x = pi_ref(a) / pi(a)``."""
    if policy.env.arity(node) != ref.env.arity(node):
        raise DomainError("arity mismatch between policy and reference")
    lr = ref._row(node)[2][action] - policy._row(node)[2][action]
    return math.expm1(lr) - lr


def exact_kl(policy: LogitTable, ref: LogitTable, node: int) -> float:
    """Categorical KL(pi || pi_ref) at ``node``."""
    p = policy.probs(node)
    q = ref.probs(node)
    mask = p > 0
    return float((p[mask] * (np.log(p[mask]) - np.log(q[mask]))).sum())


def check_on_policy(policy: LogitTable, trajectories: Iterable[Trajectory], tol: float = 1e-12) -> None:
    for traj in trajectories:
        cur = log_prob(policy, traj)
        if np.max(np.abs(cur - np.asarray(traj.behavior_logprobs)), initial=0.0) > tol:
            raise ContractError("trajectory is not on-policy for the current parameters")


def save_policy(policy: LogitTable, path: str | Path) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "env_id": policy.env_id,
        "logits": {str(n): policy.logits[n].tolist() for n in sorted(policy.logits)},
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_policy(path: str | Path, env: Environment) -> Policy:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise DomainError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    if doc["env_id"] != env.env_id:
        raise DomainError("checkpoint is bound to a different environment")
    return Policy(env, {int(n): v for n, v in doc["logits"].items()})
