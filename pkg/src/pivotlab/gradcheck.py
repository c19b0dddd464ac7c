"""Random frozen batches for checking both stream gradients against finite differences."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env import build_planted_tree
from .optim import (
    LOSS_NORMS,
    AdvantageSet,
    FDReport,
    OptimConfig,
    Term,
    accumulate,
    aux_terms,
    finite_difference_check,
    main_terms,
    normalized_advantages,
    surrogate,
)
from .policy import Policy, ReferencePolicy, Trajectory, init_policy, snapshot
from .sampler import AuxiliarySet, branch, sample_group, segment

# Perturbed ratios are kept this far from the clip corners 1 - eps and 1 + eps.
KINK_MARGIN = 1e-3


@dataclass
class FrozenBatch:
    policy: Policy
    ref: ReferencePolicy
    config: OptimConfig
    main: list[Term]
    aux: list[Term]
    main_tokens: int
    aux_tokens: int
    aux_sets: list[AuxiliarySet]


def _advantages(rewards, stream: str, rng: np.random.Generator) -> AdvantageSet:
    adv = normalized_advantages(rewards, stream)
    if adv.degenerate:
        # A degenerate set would make the batch trivially zero; substitute standardized noise.
        adv = normalized_advantages(rng.normal(size=len(rewards)), stream)
    return adv


def _perturb(traj: Trajectory, rng: np.random.Generator, start: int, eps: float, scale: float) -> None:
    for t in range(start, len(traj.behavior_logprobs)):
        while True:
            shift = float(rng.normal(0.0, scale))
            rho = math.exp(-shift)
            if min(abs(rho - (1 - eps)), abs(rho - (1 + eps))) > KINK_MARGIN:
                break
        traj.behavior_logprobs[t] += shift


def random_frozen_batch(rng: np.random.Generator, max_depth: int = 4, max_arity: int = 3,
                        max_G: int = 4, max_K: int = 4, off_policy: float = 0.3) -> FrozenBatch:
    """A small planted tree with a random policy, one main group and its auxiliary sets.

    Behavior log-probabilities are shifted by Gaussian noise (``off_policy``)
    so the ratio and clip paths are exercised, not only the on-policy point.
    The KL form and loss normalization are drawn at random.
    """
    depth = int(rng.integers(2, max_depth + 1))
    arity = int(rng.integers(2, max_arity + 1))
    env = build_planted_tree(depth, arity, 0.4, int(rng.integers(2**31)))
    policy = init_policy(env, "seeded-random", 1.0, int(rng.integers(2**31)))
    ref = snapshot(init_policy(env, "seeded-random", 0.5, int(rng.integers(2**31))))
    config = OptimConfig(
        beta=float(rng.uniform(0.01, 0.5)),
        kl=str(rng.choice(["k3", "exact"])),
        loss_norm=str(rng.choice(LOSS_NORMS)),
        advantage_filter="keep-all",
    )
    G, K = int(rng.integers(2, max_G + 1)), int(rng.integers(2, max_K + 1))
    group = sample_group(policy, env, G, rng)
    aux_sets = []
    parents = group.failed or list(range(G))
    for i in parents:
        index = segment(group.trajectories[i], 1)
        if index is None:
            continue
        t_star = int(rng.integers(1, index.T + 1))
        aux_sets.append(branch(policy, env, group.trajectories[i], t_star, K, rng, index))
    for traj in group.trajectories:
        _perturb(traj, rng, 0, config.epsilon, off_policy)
    for s in aux_sets:
        for b in s.branches:
            _perturb(b, rng, b.prefix_len, config.epsilon, off_policy)
    m_terms, m_tokens = main_terms([group], [_advantages(group.rewards, "global", rng)], config)
    a_advs = [_advantages(s.rewards, "local", rng) for s in aux_sets]
    a_terms, a_tokens = aux_terms(aux_sets, a_advs, config)
    return FrozenBatch(policy, ref, config, m_terms, a_terms, m_tokens, a_tokens, aux_sets)


def check_batch(batch: FrozenBatch, step: float = 1e-6, tolerance: float = 1e-5) -> dict[str, FDReport]:
    out = {}
    for name, terms, tokens in (("main", batch.main, batch.main_tokens), ("aux", batch.aux, batch.aux_tokens)):
        analytic = accumulate(batch.policy, batch.ref, terms, batch.config, tokens)
        out[name] = finite_difference_check(
            lambda p, terms=terms: surrogate(p, batch.ref, terms, batch.config),
            batch.policy, analytic, step, tolerance,
        )
    return out


def random_gradcheck(rng: np.random.Generator, **kwargs) -> dict[str, FDReport]:
    return check_batch(random_frozen_batch(rng, **kwargs))


__all__ = ["FrozenBatch", "check_batch", "random_frozen_batch", "random_gradcheck"]
