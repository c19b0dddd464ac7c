"""Group advantages, clipped surrogate objectives and their analytic gradients.

Sign convention: every objective here is *maximized*.  Gradients are ascent
directions and :func:`apply_update` adds ``eta * (g_main + lam * g_aux)`` to
the logits, so actions with positive advantage gain probability.

Both streams reduce to a list of :class:`Term` s -- a trajectory, the first
token that receives gradient, its advantage and a per-token weight that
carries the loss normalization.  The value (:func:`surrogate`) and the
gradient (:func:`accumulate`) are evaluated independently from the same
terms, which is what the finite-difference check compares.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, NumericError
from .policy import LogitTable, Policy, Trajectory
from .sampler import AuxiliarySet, Group

LOSS_NORMS = ("batch-token-mean", "per-trajectory-mean")
FILTERS = ("drop-zero", "keep-all")
KL_MODES = ("k3", "exact")


@dataclass(frozen=True)
class OptimConfig:
    epsilon: float = 0.2
    beta: float = 1e-4
    lam: float = 1.0
    eta: float = 0.05
    loss_norm: str = "batch-token-mean"
    advantage_filter: str = "drop-zero"
    kl: str = "k3"
    strict: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise DomainError("epsilon must be positive")
        if not all(math.isfinite(v) for v in (self.epsilon, self.beta, self.lam, self.eta)):
            raise DomainError("epsilon, beta, lam and eta must be finite")
        if min(self.beta, self.lam, self.eta) < 0:
            raise DomainError("beta, lam and eta must be non-negative")
        if self.loss_norm not in LOSS_NORMS:
            raise DomainError(f"loss_norm must be one of {LOSS_NORMS}")
        if self.advantage_filter not in FILTERS:
            raise DomainError(f"advantage_filter must be one of {FILTERS}")
        if self.kl not in KL_MODES:
            raise DomainError(f"kl must be one of {KL_MODES}")


@dataclass
class AdvantageSet:
    values: np.ndarray
    stream: str
    degenerate: bool


def normalized_advantages(rewards: Sequence[float], stream: str = "global") -> AdvantageSet:
    """``(R - mean) / std`` with the population std; all zeros when std is 0."""
    r = np.asarray(rewards, dtype=np.float64)
    sigma = r.std() if r.size else 0.0
    # Spreads that underflow to 0 are treated like all-equal rewards.
    if r.size == 0 or np.all(r == r[0]) or not sigma > 0:
        return AdvantageSet(np.zeros_like(r), stream, True)
    return AdvantageSet((r - r.mean()) / sigma, stream, False)


def global_advantages(group: Group) -> AdvantageSet:
    if group.G < 2:
        raise DomainError("group size must be at least 2")
    return normalized_advantages(group.rewards, "global")


def local_advantages(aux: AuxiliarySet) -> AdvantageSet:
    return normalized_advantages(aux.rewards, "local")


def clipped_term(rho: float, A: float, epsilon: float) -> float:
    return min(rho * A, min(max(rho, 1.0 - epsilon), 1.0 + epsilon) * A)


@dataclass(frozen=True)
class Term:
    traj: Trajectory
    start: int
    advantage: float
    weight: float


class GradientAccumulator:
    """Sparse per-node gradient table congruent with a policy's logits."""

    def __init__(self, env, token_count: int = 0):
        self.env = env
        self.grads: dict[int, np.ndarray] = {}
        self.token_count = token_count

    def add(self, node: int, vec: np.ndarray) -> None:
        g = self.grads.get(node)
        if g is None:
            self.grads[node] = np.array(vec, dtype=np.float64)
        else:
            g += vec

    def __getitem__(self, node: int) -> np.ndarray:
        g = self.grads.get(node)
        return np.zeros(self.env.arity(node)) if g is None else g

    def nodes(self) -> set[int]:
        return set(self.grads)

    def flat(self, nodes: Iterable[int]) -> np.ndarray:
        return np.concatenate([self[n] for n in nodes])


def _kept(advs: AdvantageSet, config: OptimConfig) -> bool:
    return not (advs.degenerate and config.advantage_filter == "drop-zero")


def main_terms(groups: Sequence[Group], advantages: Sequence[AdvantageSet], config: OptimConfig,
               normalizer: float | None = None) -> tuple[list[Term], int]:
    """Terms of the main-chain loss.  ``normalizer`` overrides the batch denominator."""
    kept = [(g, a) for g, a in zip(groups, advantages) if _kept(a, config)]
    pairs = [(t, float(v)) for g, a in kept for t, v in zip(g.trajectories, a.values)]
    tokens = sum(len(t) for t, _ in pairs)
    if config.loss_norm == "batch-token-mean":
        denom = normalizer if normalizer is not None else tokens
        terms = [Term(t, 0, v, 1.0 / denom) for t, v in pairs]
    else:
        denom = normalizer if normalizer is not None else len(pairs)
        terms = [Term(t, 0, v, 1.0 / (denom * len(t))) for t, v in pairs]
    return terms, tokens


def aux_terms(aux_sets: Sequence[AuxiliarySet], advantages: Sequence[AdvantageSet], config: OptimConfig,
              normalizer: float | None = None) -> tuple[list[Term], int]:
    """Terms of the auxiliary loss; only suffix tokens are counted or differentiated."""
    kept = [(s, a) for s, a in zip(aux_sets, advantages) if _kept(a, config)]
    tokens = sum(s.suffix_tokens for s, _ in kept)
    terms = []
    if config.loss_norm == "batch-token-mean":
        denom = normalizer if normalizer is not None else tokens
        for s, a in kept:
            terms += [Term(b, b.prefix_len, float(v), 1.0 / denom) for b, v in zip(s.branches, a.values)]
    else:
        denom = normalizer if normalizer is not None else len(kept)
        for s, a in kept:
            terms += [Term(b, b.prefix_len, float(v), 1.0 / (denom * s.K * b.suffix_len))
                      for b, v in zip(s.branches, a.values)]
    return terms, tokens


def accumulate(policy: LogitTable, ref: LogitTable, terms: Sequence[Term], config: OptimConfig,
               token_count: int = 0) -> GradientAccumulator:
    """Analytic gradient of :func:`surrogate` with respect to every logit."""
    acc = GradientAccumulator(policy.env, token_count)
    eps, beta = config.epsilon, config.beta
    exact = config.kl == "exact"
    for term in terms:
        traj, A, wt = term.traj, term.advantage, term.weight
        for t in range(term.start, len(traj.actions)):
            node, a = traj.actions[t]
            p, _, logp = policy._row(node)
            if a >= len(logp) or ref.env.arity(node) != len(logp):
                raise DomainError(f"arity mismatch at node {node}")
            if config.strict and abs(logp[a] - traj.behavior_logprobs[t]) > 1e-12:
                raise ContractError(f"off-policy token at node {node}")
            rho = math.exp(logp[a] - traj.behavior_logprobs[t])
            clipped = min(max(rho, 1.0 - eps), 1.0 + eps)
            coef = rho * A if rho * A <= clipped * A else 0.0
            if exact:
                q = ref.probs(node)
                with np.errstate(divide="ignore", invalid="ignore"):
                    lr = np.where(p > 0, np.log(p) - np.log(q), 0.0)
                kl = float((p * lr).sum())
                g = -coef * p
                g[a] += coef
                g -= beta * p * (lr - kl)
            else:
                x = math.exp(ref._row(node)[2][a] - logp[a])
                coef -= beta * (1.0 - x)
                g = -coef * p
                g[a] += coef
            acc.add(node, wt * g)
    return acc


def surrogate(policy: LogitTable, ref: LogitTable, terms: Sequence[Term], config: OptimConfig) -> float:
    """Scalar clipped-surrogate objective of a frozen batch."""
    vals = []
    for term in terms:
        traj = term.traj
        for t in range(term.start, len(traj.actions)):
            node, a = traj.actions[t]
            z = policy.vector(node)
            logz = np.log(np.sum(np.exp(z - z.max()))) + z.max()
            lp = z[a] - logz
            rho = math.exp(lp - traj.behavior_logprobs[t])
            if config.kl == "exact":
                zr = ref.vector(node)
                lq = zr - (np.log(np.sum(np.exp(zr - zr.max()))) + zr.max())
                lpv = z - logz
                pen = float(np.sum(np.exp(lpv) * (lpv - lq)))
            else:
                zr = ref.vector(node)
                lq = zr[a] - (np.log(np.sum(np.exp(zr - zr.max()))) + zr.max())
                d = lq - lp
                pen = math.exp(d) - d - 1.0
            vals.append(term.weight * (clipped_term(rho, term.advantage, config.epsilon) - config.beta * pen))
    return math.fsum(vals)


def main_stream_gradient(policy, ref, groups, advantages, config: OptimConfig, normalizer=None) -> GradientAccumulator:
    terms, tokens = main_terms(groups, advantages, config, normalizer)
    return accumulate(policy, ref, terms, config, tokens)


def aux_stream_gradient(policy, ref, aux_sets, advantages, config: OptimConfig, normalizer=None) -> GradientAccumulator:
    terms, tokens = aux_terms(aux_sets, advantages, config, normalizer)
    return accumulate(policy, ref, terms, config, tokens)


def apply_update(policy: Policy, g_main: GradientAccumulator, g_aux: GradientAccumulator | None,
                 config: OptimConfig) -> Policy:
    """One ascent step ``theta += eta * (g_main + lam * g_aux)``, in place."""
    nodes = g_main.nodes() | (g_aux.nodes() if g_aux is not None else set())
    deltas = {}
    for node in sorted(nodes):
        d = g_main[node] if g_aux is None else g_main[node] + config.lam * g_aux[node]
        if not np.all(np.isfinite(d)) or not np.all(np.isfinite(config.eta * d)):
            raise NumericError(f"non-finite gradient at node {node}: main={g_main[node]}, "
                               f"aux={None if g_aux is None else g_aux[node]}")
        deltas[node] = d
    for node, d in deltas.items():
        policy.add(node, config.eta * d)
    return policy


@dataclass
class FDReport:
    max_rel: float
    mean_rel: float
    n_coords: int
    tolerance: float
    offenders: list[tuple[int, int, float, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel <= self.tolerance


def relative_error(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0.0 else abs(a - b) / scale


def finite_difference_check(
    objective: Callable[[Policy], float],
    policy: Policy,
    analytic: GradientAccumulator,
    step: float = 1e-6,
    tolerance: float = 1e-5,
    nodes: Iterable[int] | None = None,
) -> FDReport:
    """Compare ``analytic`` with central differences of ``objective`` at every logit.

    ``objective`` receives a working copy of ``policy``; the original is not
    modified.
    """
    if not step > 0:
        raise DomainError("step must be positive")
    work = policy.copy()
    nodes = sorted(policy.env.internal_nodes() if nodes is None else nodes)
    errs = []
    offenders = []
    for node in nodes:
        base = work.vector(node)
        for i in range(len(base)):
            plus, minus = base.copy(), base.copy()
            plus[i] += step
            minus[i] -= step
            work.set_logits(node, plus)
            fp = objective(work)
            work.set_logits(node, minus)
            fm = objective(work)
            fd = (fp - fm) / (2 * step)
            an = float(analytic[node][i])
            rel = relative_error(an, fd)
            errs.append(rel)
            if rel > tolerance:
                offenders.append((node, i, an, fd, rel))
        work.set_logits(node, base)
    errs = np.array(errs) if errs else np.zeros(1)
    return FDReport(float(errs.max()), float(errs.mean()), len(errs), tolerance, offenders)
