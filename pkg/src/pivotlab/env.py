"""Synthetic token-tree environments and exact enumeration oracles.

A trajectory is a root-to-leaf walk; the action at an internal node is the
index of the chosen child.  The reward is 1 at a correct leaf and 0 elsewhere.

Two concrete trees are provided:

* :class:`PlantedTree` -- a complete ``arity``-ary tree stored implicitly in
  heap order (children of node ``i`` are ``arity*i + 1 .. arity*i + arity``),
  with a sparse set of correct leaves.
* :class:`ExplicitTree` -- an arbitrary (possibly irregular) tree given by
  child lists.  Fixtures use this form.
"""
from __future__ import annotations

import hashlib
import json
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterator, Protocol, Sequence

import numpy as np

from .errors import DomainError, FixtureNotFound, SizeError, TerminalError

LEAF_CAP = 2**24
FORMAT_VERSION = 1
FIXTURES = {"appendix-a": "appendix_a.json"}


class Environment:
    """Common interface of token trees.  Instances are immutable."""

    root: int = 0
    depth: int

    def children(self, node: int) -> Sequence[int]:
        raise NotImplementedError

    def parent(self, node: int) -> int | None:
        raise NotImplementedError

    def is_leaf(self, node: int) -> bool:
        raise NotImplementedError

    def is_correct(self, leaf: int) -> bool:
        raise NotImplementedError

    def node_depth(self, node: int) -> int:
        raise NotImplementedError

    def subtree_leaves(self, node: int) -> int:
        raise NotImplementedError

    def uniform_success(self, node: int) -> float:
        """Success probability from ``node`` under the uniform policy."""
        raise NotImplementedError

    def internal_nodes(self) -> Iterator[int]:
        raise NotImplementedError

    def correct_leaves(self) -> Iterator[int]:
        raise NotImplementedError

    @property
    def env_id(self) -> str:
        raise NotImplementedError

    def arity(self, node: int) -> int:
        return len(self.children(node))

    def contains(self, node: int) -> bool:
        return 0 <= node < self.n_nodes

    def label(self, node: int) -> str:
        return str(node)

    def path_to(self, node: int) -> list[tuple[int, int]]:
        """(node, action) pairs leading from the root to ``node``."""
        path = []
        while node != self.root:
            par = self.parent(node)
            path.append((par, list(self.children(par)).index(node)))
            node = par
        return path[::-1]


class PlantedTree(Environment):
    def __init__(self, depth: int, arity: int, correct_positions: np.ndarray):
        self.depth = int(depth)
        self.k = int(arity)
        self.first_leaf = (self.k**self.depth - 1) // (self.k - 1)
        self.n_nodes = (self.k ** (self.depth + 1) - 1) // (self.k - 1)
        self.n_leaves = self.k**self.depth
        self.correct_positions = np.unique(np.asarray(correct_positions, dtype=np.int64))
        self._correct_ids = frozenset((self.correct_positions + self.first_leaf).tolist())
        self._level_start = [(self.k**d - 1) // (self.k - 1) for d in range(self.depth + 2)]

    def children(self, node):
        if node >= self.first_leaf:
            return ()
        base = self.k * node + 1
        return range(base, base + self.k)

    def child(self, node: int, action: int) -> int:
        return self.k * node + 1 + action

    def arity(self, node):
        return 0 if node >= self.first_leaf else self.k

    def parent(self, node):
        return None if node == 0 else (node - 1) // self.k

    def is_leaf(self, node):
        return node >= self.first_leaf

    def is_correct(self, leaf):
        return leaf in self._correct_ids

    def node_depth(self, node):
        d = 0
        while node >= self._level_start[d + 1]:
            d += 1
        return d

    def subtree_leaves(self, node):
        return self.k ** (self.depth - self.node_depth(node))

    def _leaf_range(self, node: int) -> tuple[int, int]:
        d = self.node_depth(node)
        span = self.k ** (self.depth - d)
        start = (node - self._level_start[d]) * span
        return start, start + span

    def uniform_success(self, node):
        lo, hi = self._leaf_range(node)
        pos = self.correct_positions
        count = np.searchsorted(pos, hi) - np.searchsorted(pos, lo)
        return float(count) / (hi - lo)

    def internal_nodes(self):
        return iter(range(self.first_leaf))

    def correct_leaves(self):
        return iter(sorted(self._correct_ids))

    @cached_property
    def env_id(self):
        h = hashlib.sha256(f"planted:{self.depth}:{self.k}:".encode())
        h.update(self.correct_positions.tobytes())
        return h.hexdigest()[:16]

    def __repr__(self):
        return f"PlantedTree(depth={self.depth}, arity={self.k}, correct={len(self.correct_positions)})"


class ExplicitTree(Environment):
    """Tree given by ordered child lists; node 0 is the root."""

    def __init__(
        self,
        children: Sequence[Sequence[int]],
        correct: set[int] | frozenset[int],
        labels: Sequence[str] | None = None,
        edge_probs: dict[int, Sequence[float]] | None = None,
        name: str | None = None,
    ):
        self._children = tuple(tuple(int(c) for c in ch) for ch in children)
        self.n_nodes = len(self._children)
        self._correct = frozenset(int(c) for c in correct)
        self.labels = tuple(labels) if labels is not None else tuple(str(i) for i in range(self.n_nodes))
        self.edge_probs = {int(k): tuple(float(p) for p in v) for k, v in (edge_probs or {}).items()}
        self.name = name
        self._validate()
        self._uniform_cache: dict[int, float] = {}

    def _validate(self):
        if self.n_nodes == 0:
            raise DomainError("empty tree")
        parent = [None] * self.n_nodes
        for n, ch in enumerate(self._children):
            if len(ch) == 1:
                raise DomainError(f"internal node {n} has a single child")
            for c in ch:
                if not 0 < c < self.n_nodes:
                    raise DomainError(f"child id {c} out of range")
                if parent[c] is not None:
                    raise DomainError(f"node {c} has two parents")
                parent[c] = n
        self._parent = tuple(parent)
        depth = [0] * self.n_nodes
        seen = 1
        stack = [0]
        while stack:
            n = stack.pop()
            for c in self._children[n]:
                depth[c] = depth[n] + 1
                seen += 1
                stack.append(c)
        if seen != self.n_nodes:
            raise DomainError("node graph is not a rooted tree")
        self._depth = tuple(depth)
        self.depth = max(depth)
        leaves = {n for n in range(self.n_nodes) if not self._children[n]}
        if not self._correct <= leaves:
            raise DomainError("correct set contains internal nodes")
        self.n_leaves = len(leaves)
        for n, probs in self.edge_probs.items():
            if len(probs) != len(self._children[n]):
                raise DomainError(f"edge probabilities of node {n} do not match its arity")
            if abs(sum(probs) - 1.0) > 1e-12 or min(probs) <= 0:
                raise DomainError(f"edge probabilities of node {n} are not a distribution")

    def children(self, node):
        return self._children[node]

    def child(self, node: int, action: int) -> int:
        return self._children[node][action]

    def parent(self, node):
        return self._parent[node]

    def is_leaf(self, node):
        return not self._children[node]

    def is_correct(self, leaf):
        return leaf in self._correct

    def node_depth(self, node):
        return self._depth[node]

    def subtree_leaves(self, node):
        if self.is_leaf(node):
            return 1
        return sum(self.subtree_leaves(c) for c in self._children[node])

    def uniform_success(self, node):
        if node not in self._uniform_cache:
            ch = self._children[node]
            if not ch:
                val = float(node in self._correct)
            else:
                val = sum(self.uniform_success(c) for c in ch) / len(ch)
            self._uniform_cache[node] = val
        return self._uniform_cache[node]

    def internal_nodes(self):
        return (n for n in range(self.n_nodes) if self._children[n])

    def correct_leaves(self):
        return iter(sorted(self._correct))

    def label(self, node):
        return self.labels[node]

    def node(self, label: str) -> int:
        return self.labels.index(label)

    @cached_property
    def env_id(self):
        payload = json.dumps([self._children, sorted(self._correct)]).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    def to_dict(self) -> dict:
        nodes = []
        for n in range(self.n_nodes):
            entry = {"id": n, "label": self.labels[n], "children": list(self._children[n])}
            if n in self.edge_probs:
                entry["probs"] = list(self.edge_probs[n])
            nodes.append(entry)
        return {
            "format_version": FORMAT_VERSION,
            "name": self.name,
            "nodes": nodes,
            "correct": sorted(self._correct),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ExplicitTree":
        if doc.get("format_version") != FORMAT_VERSION:
            raise DomainError(f"unsupported tree format_version {doc.get('format_version')!r}")
        nodes = sorted(doc["nodes"], key=lambda e: e["id"])
        if [e["id"] for e in nodes] != list(range(len(nodes))):
            raise DomainError("node ids must be 0..n-1")
        return cls(
            children=[e["children"] for e in nodes],
            correct=set(doc["correct"]),
            labels=[e.get("label", str(e["id"])) for e in nodes],
            edge_probs={e["id"]: e["probs"] for e in nodes if "probs" in e},
            name=doc.get("name"),
        )

    def __repr__(self):
        return f"ExplicitTree(name={self.name!r}, nodes={self.n_nodes}, depth={self.depth})"


def build_planted_tree(
    depth: int, arity: int, correct_fraction: float, seed: int, leaf_cap: int = LEAF_CAP
) -> PlantedTree:
    """Complete tree whose leaves are each correct with probability ``correct_fraction``.

    If no leaf is drawn correct, one leaf chosen uniformly (from the same
    stream) is made correct.
    """
    if depth < 1 or arity < 2:
        raise DomainError("need depth >= 1 and arity >= 2")
    if not 0.0 < correct_fraction <= 1.0:
        raise DomainError(f"correct_fraction must lie in (0, 1], got {correct_fraction}")
    n_leaves = arity**depth
    if n_leaves > leaf_cap:
        raise SizeError(f"{n_leaves} leaves exceeds cap {leaf_cap}")
    rng = np.random.default_rng(seed)
    positions = np.flatnonzero(rng.random(n_leaves) < correct_fraction)
    if positions.size == 0:
        positions = np.array([rng.integers(n_leaves)])
    return PlantedTree(depth, arity, positions)


def read_tree(path: str | Path) -> ExplicitTree:
    return ExplicitTree.from_dict(json.loads(Path(path).read_text()))


def write_tree(env: ExplicitTree, path: str | Path) -> None:
    Path(path).write_text(json.dumps(env.to_dict(), indent=1) + "\n")


def load_fixture(name: str):
    """Return ``(env, policy)`` for a bundled fixture.

    The policy is the fixture's bundled edge distribution expressed as logits.
    """
    from .policy import init_policy

    if name not in FIXTURES:
        raise FixtureNotFound(name)
    doc = json.loads(resources.files("pivotlab.fixtures").joinpath(FIXTURES[name]).read_text())
    env = ExplicitTree.from_dict(doc)
    return env, init_policy(env, "fixture-matched")


def step(env: Environment, node: int, action: int) -> int:
    if not env.contains(node):
        raise DomainError(f"unknown node {node}")
    if env.is_leaf(node):
        raise TerminalError(f"node {node} is a leaf")
    ch = env.children(node)
    if not 0 <= action < len(ch):
        raise DomainError(f"action {action} out of range for arity {len(ch)}")
    return ch[action]


def terminal_reward(env: Environment, leaf: int) -> int:
    if not env.contains(leaf) or not env.is_leaf(leaf):
        raise DomainError(f"node {leaf} is not a leaf")
    return int(env.is_correct(leaf))


class _Probs(Protocol):
    def probs(self, node: int) -> np.ndarray: ...

    def touched(self) -> set[int]: ...


def exact_success_probability(
    env: Environment, policy: _Probs, node: int | None = None, leaf_cap: int = LEAF_CAP
) -> float:
    """Probability that a rollout started at ``node`` ends at a correct leaf.

    Walks only the nodes whose subtree carries explicit logits; any other
    subtree is governed by the uniform policy and is resolved by counting its
    correct leaves.
    """
    node = env.root if node is None else node
    if env.subtree_leaves(node) > leaf_cap:
        raise SizeError(f"subtree of {node} exceeds leaf cap {leaf_cap}")
    touched = policy.touched()

    def rec(n: int) -> float:
        if env.is_leaf(n):
            return 1.0 if env.is_correct(n) else 0.0
        if n not in touched:
            return env.uniform_success(n)
        p = policy.probs(n)
        return float(sum(p[a] * rec(c) for a, c in enumerate(env.children(n))))

    return rec(node)


def reach_probability(env: Environment, policy: _Probs, node: int, start: int | None = None) -> float:
    """Product of action probabilities on the path from ``start`` (default root) to ``node``."""
    start = env.root if start is None else start
    prob = 1.0
    while node != start:
        par = env.parent(node)
        if par is None:
            raise DomainError(f"node {start} is not an ancestor")
        prob *= float(policy.probs(par)[list(env.children(par)).index(node)])
        node = par
    return prob
