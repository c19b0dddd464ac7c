"""Main-chain groups, segmentation, pivot selection and local branching."""
from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .env import Environment, PlantedTree, exact_success_probability
from .errors import DomainError
from .policy import LogitTable, Trajectory, sample_trajectory

RngSource = Union[np.random.Generator, Callable[[int], np.random.Generator]]

DEGENERATE_MASS = 1e-12


def _stream(rng: RngSource, i: int) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else rng(i)


@dataclass
class Group:
    prompt_id: int
    trajectories: list[Trajectory]

    @property
    def G(self) -> int:
        return len(self.trajectories)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.trajectories], dtype=np.float64)

    @property
    def failed(self) -> list[int]:
        return [i for i, t in enumerate(self.trajectories) if t.reward == 0]


def sample_group(policy: LogitTable, env: Environment, G: int, rng: RngSource, prompt_id: int = 0) -> Group:
    """``G`` independent root rollouts.

    ``rng`` is either one generator shared sequentially, or a callable mapping
    the trajectory index to its own sub-stream.
    """
    if G < 2:
        raise DomainError("group size must be at least 2")
    trajs = [sample_trajectory(policy, env, _stream(rng, i), prompt_id=prompt_id) for i in range(G)]
    return Group(prompt_id, trajs)


@dataclass(frozen=True)
class SegmentIndex:
    """Candidate branching offsets of one trajectory.

    ``boundaries[t-1]`` is the token offset of candidate ``t``.  Normalized
    depth divides by ``n_segments`` (trailing partial chunk included), so
    every candidate has depth strictly inside (0, 1).
    """

    boundaries: tuple[int, ...]
    segment_len: int
    n_segments: int

    @property
    def T(self) -> int:
        return len(self.boundaries)

    def depths(self) -> np.ndarray:
        return np.arange(1, self.T + 1) / self.n_segments


def segment(trajectory: Trajectory, segment_len: int) -> SegmentIndex | None:
    """Fixed-length chunking; ``None`` when no interior boundary exists."""
    if segment_len < 1:
        raise DomainError("segment_len must be positive")
    n = len(trajectory)
    bounds = tuple(range(segment_len, n, segment_len))
    if not bounds:
        return None
    return SegmentIndex(bounds, segment_len, math.ceil(n / segment_len))


def pivot_distribution(index: SegmentIndex, estimator, gamma: float) -> np.ndarray:
    """Sampling weights over candidates: recoverability times ``(t/T)**gamma``."""
    if not math.isfinite(gamma):
        raise DomainError("gamma must be finite")
    r = index.depths()
    bias = r**gamma
    w = np.array([estimator.predict(x) for x in r]) * bias
    total = w.sum()
    if not total >= DEGENERATE_MASS:
        w = bias
    # Scaling by the max first makes equal weights exactly 1.0, so ties give exactly 1/T.
    w = w / w.max()
    return w / w.sum()


def sample_pivot(Q: np.ndarray, rng: np.random.Generator) -> int:
    """Categorical draw; returns the 1-based candidate index."""
    cdf = np.cumsum(Q).tolist()
    return min(bisect_right(cdf, rng.random() * cdf[-1]), len(cdf) - 1) + 1


def sample_pivots(Q: np.ndarray, rng: np.random.Generator, n: int) -> list[int]:
    """``n`` distinct candidates drawn without replacement, renormalizing after each draw."""
    Q = np.array(Q, dtype=np.float64)
    out: list[int] = []
    for _ in range(min(n, int(np.count_nonzero(Q)))):
        t = sample_pivot(Q / Q.sum(), rng)
        out.append(t)
        Q[t - 1] = 0.0
    return out


@dataclass(frozen=True)
class PivotPlan:
    trajectory: Trajectory
    t_star: int
    normalized_depth: float
    prefix_len: int


@dataclass
class AuxiliarySet:
    plan: PivotPlan
    branches: list[Trajectory]

    @property
    def K(self) -> int:
        return len(self.branches)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([b.reward for b in self.branches], dtype=np.float64)

    @property
    def recovery_label(self) -> int:
        return int(any(b.reward == 1 for b in self.branches))

    @property
    def suffix_tokens(self) -> int:
        return sum(b.suffix_len for b in self.branches)


def branch(
    policy: LogitTable,
    env: Environment,
    parent: Trajectory,
    t_star: int,
    K: int,
    rng: RngSource,
    index: SegmentIndex,
) -> AuxiliarySet:
    """``K`` completions resampled from the state at candidate ``t_star`` of ``parent``."""
    if not 1 <= t_star <= index.T:
        raise DomainError(f"t_star={t_star} outside 1..{index.T}")
    if K < 1:
        raise DomainError("K must be positive")
    offset = index.boundaries[t_star - 1]
    node = parent.state_at(offset)
    plan = PivotPlan(parent, t_star, t_star / index.n_segments, offset)
    branches = [sample_trajectory(policy, env, _stream(rng, k), start=(node, parent)) for k in range(K)]
    return AuxiliarySet(plan, branches)


def expected_recovery(env: Environment, policy: LogitTable, depth: int, K: int) -> float:
    """Exact ``P(y = 1)`` for a pivot at prefix ``depth`` of a failed rollout.

    Averages ``1 - (1 - s)^K`` over the depth-``depth`` states of rollouts
    that end at an incorrect leaf, where ``s`` is the state's exact success
    probability.  Returns ``nan`` when no rollout can fail past that depth.
    """
    if depth < 0 or K < 1:
        raise DomainError("depth must be non-negative and K positive")
    touched = policy.touched()
    num = den = 0.0

    def block(n: int, d: int, rho: float) -> None:
        # Untouched planted subtree: uniform policy, count correct leaves per state.
        nonlocal num, den
        lo, hi = env._leaf_range(n)
        pos = env.correct_positions
        pos = pos[np.searchsorted(pos, lo):np.searchsorted(pos, hi)]
        span = env.k ** (env.depth - depth)
        den += rho * (1.0 - len(pos) / (hi - lo))
        if len(pos):
            _, counts = np.unique(pos // span, return_counts=True)
            s = counts / span
            num += rho * float(env.k ** -(depth - d)) * float(np.sum((1.0 - s) * (1.0 - (1.0 - s) ** K)))

    def rec(n: int, d: int, rho: float) -> None:
        nonlocal num, den
        if d == depth:
            s = exact_success_probability(env, policy, n)
            num += rho * (1.0 - s) * (1.0 - (1.0 - s) ** K)
            den += rho * (1.0 - s)
        elif env.is_leaf(n):
            return
        elif isinstance(env, PlantedTree) and n not in touched:
            block(n, d, rho)
        else:
            for p, c in zip(policy.probs(n), env.children(n)):
                if p > 0:
                    rec(c, d + 1, rho * float(p))

    rec(env.root, 0, 1.0)
    return num / den if den > 0 else float("nan")
