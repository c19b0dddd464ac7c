"""Training loop for GRPO, pivot-branching variants and the tree-dispersed baseline."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import rng as rngmod
from ..env import Environment, build_planted_tree, exact_success_probability, load_fixture
from ..estimator import EstimatorState
from ..optim import (
    AdvantageSet,
    accumulate,
    apply_update,
    aux_terms,
    global_advantages,
    local_advantages,
    main_terms,
    normalized_advantages,
)
from ..policy import LogitTable, Policy, entropy, greedy_trajectory, init_policy, sample_trajectory, snapshot
from ..sampler import (
    AuxiliarySet,
    Group,
    branch,
    pivot_distribution,
    sample_group,
    sample_pivots,
    segment,
)
from .config import RunConfig, budget
from .metrics import MetricsRecord, export_metrics

log = logging.getLogger(__name__)


class _ConstantEstimator:
    def predict(self, r: float) -> float:
        return 0.5


@dataclass
class StepBatch:
    groups: list[Group]
    group_advs: list[AdvantageSet]
    aux_sets: list[AuxiliarySet] = field(default_factory=list)
    aux_advs: list[AdvantageSet] = field(default_factory=list)
    rollouts: int = 0


@dataclass
class RunResult:
    config: RunConfig
    seed: int
    envs: list[Environment]
    policies: list[Policy]
    estimator: EstimatorState
    records: list[MetricsRecord]
    aux_rollouts: list[int]
    rollout_log: list[dict] = field(default_factory=list)
    theta_history: list[list[dict[int, np.ndarray]]] | None = None
    total_rollouts: int = 0

    @property
    def final_eval(self) -> float:
        return self.records[-1].eval_success_rate if self.records else float("nan")

    @property
    def mean_aux_rollouts(self) -> float:
        return float(np.mean(self.aux_rollouts)) if self.aux_rollouts else 0.0

    def compact(self) -> "RunResult":
        """Copy that keeps records and budgets but drops policies, environments and logs."""
        return replace(self, envs=[], policies=[], rollout_log=[], theta_history=None,
                       estimator=EstimatorState(capacity=1, w=self.estimator.w, b=self.estimator.b))

    def metadata(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config.to_dict(),
            "mean_aux_rollouts_per_step": self.mean_aux_rollouts,
            "mean_rollouts_per_step": self.config.root_rollouts + self.mean_aux_rollouts,
            "total_rollouts": self.total_rollouts,
            "budget_parity": "rollout count",
        }


def make_envs(config: RunConfig, seed: int) -> list[Environment]:
    if config.env_kind == "fixture":
        return [load_fixture(config.fixture)[0]]
    base = seed if config.env_seed is None else config.env_seed
    envs = []
    for p in range(config.n_prompts):
        s = base if p == 0 else int(np.random.SeedSequence([base, p]).generate_state(1)[0])
        envs.append(build_planted_tree(config.depth, config.arity, config.correct_fraction, s))
    return envs


def evaluate(policy: LogitTable, env: Environment, mode: str = "greedy", n: int = 64,
             rng: np.random.Generator | None = None) -> float:
    """Success rate of ``policy``: one greedy rollout, ``n`` sampled rollouts, or the exact probability."""
    if mode == "greedy":
        return float(greedy_trajectory(policy, env).reward)
    if mode == "sample":
        rng = rng if rng is not None else np.random.default_rng(0)
        return float(np.mean([sample_trajectory(policy, env, rng).reward for _ in range(n)]))
    if mode == "exact":
        return exact_success_probability(env, policy)
    raise ValueError(f"unknown eval mode {mode!r}")


def _collect(config: RunConfig, step: int, p: int, env: Environment, policy: Policy,
             estimator: EstimatorState, streams: rngmod.Streams) -> StepBatch:
    group = sample_group(policy, env, config.root_rollouts, lambda i: streams.main(step, p, i), prompt_id=p)
    batch = StepBatch([group], [global_advantages(group)], rollouts=group.G)
    if config.strategy == "tree-dispersed":
        return _collect_tree(config, step, p, env, policy, streams, batch)
    if not config.branching:
        return batch
    chooser = estimator if config.learns_estimator else _ConstantEstimator()
    gamma = config.effective_gamma
    selected = range(group.G) if config.strategy == "expand-all" else group.failed
    for i in selected:
        traj = group.trajectories[i]
        index = segment(traj, config.segment_len)
        if index is None:
            continue
        Q = pivot_distribution(index, chooser, gamma)
        for j, t in enumerate(sample_pivots(Q, streams.pivot(step, p, i), config.pivots)):
            aux = branch(policy, env, traj, t, config.K, lambda k, i=i, j=j: streams.aux(step, p, i, j, k), index)
            batch.aux_sets.append(aux)
            batch.aux_advs.append(local_advantages(aux))
            batch.rollouts += aux.K
    return batch


def _collect_tree(config, step, p, env, policy, streams, batch: StepBatch) -> StepBatch:
    """Branch every main chain at several uniform pivots; pool all rewards into one baseline."""
    group = batch.groups[0]
    pooled = list(group.trajectories)
    for i, traj in enumerate(group.trajectories):
        index = segment(traj, config.segment_len)
        if index is None:
            continue
        Q = np.full(index.T, 1.0 / index.T)
        for j, t in enumerate(sample_pivots(Q, streams.pivot(step, p, i), config.tree_pivots)):
            aux = branch(policy, env, traj, t, config.tree_branches,
                         lambda k, i=i, j=j: streams.aux(step, p, i, j, k), index)
            batch.aux_sets.append(aux)
            batch.rollouts += aux.K
            pooled += aux.branches
    # Unmasked: branch trajectories enter the main loss with their prefixes.
    merged = Group(p, pooled)
    batch.groups = [merged]
    batch.group_advs = [normalized_advantages(merged.rewards, "pooled")]
    return batch


def run_training(config: RunConfig, seed: int | None = None, keep_theta: bool = False) -> RunResult:
    """Run one seed of ``config``.

    Each step samples main chains, branches the selected trajectories, takes
    exactly one on-policy update and refits the recoverability estimator.
    """
    seed = config.seeds[0] if seed is None else int(seed)
    envs = make_envs(config, seed)
    policies = [init_policy(e, config.policy_init, config.init_scale, seed) for e in envs]
    refs = [snapshot(pol) for pol in policies]
    estimator = EstimatorState(capacity=config.estimator_capacity)
    streams = rngmod.Streams(seed)
    ocfg = config.optim
    records: list[MetricsRecord] = []
    aux_rollouts: list[int] = []
    rollout_log: list[dict] = []
    history = [] if keep_theta else None
    tokens_main = tokens_aux = 0
    rollouts = 0
    t_start = time.perf_counter()

    for step in range(1, config.steps + 1):
        batches = [_collect(config, step, p, env, pol, estimator, streams)
                   for p, (env, pol) in enumerate(zip(envs, policies))]
        groups = [g for b in batches for g in b.groups]
        advs = [a for b in batches for a in b.group_advs]
        aux_sets = [s for b in batches for s in b.aux_sets]
        aux_advs = [a for b in batches for a in b.aux_advs]

        mains = [t for b in batches for t in b.groups[0].trajectories if t.origin == "main"]
        tokens_main += sum(len(t) for t in mains)
        step_aux_tokens = sum(s.suffix_tokens for s in aux_sets)
        tokens_aux += step_aux_tokens
        aux_rollouts.append(sum(s.K for s in aux_sets))
        rollouts += sum(b.rollouts for b in batches)
        capped = config.max_rollouts is not None and rollouts >= config.max_rollouts

        if config.learns_estimator:
            for s in aux_sets:
                estimator.record(s.plan.normalized_depth, s.recovery_label)

        m_terms, m_tokens = main_terms(groups, advs, ocfg)
        a_terms, a_tokens = aux_terms(aux_sets, aux_advs, ocfg) if config.branching else ([], 0)
        for p, pol in enumerate(policies):
            g_main = accumulate(pol, refs[p], [t for t in m_terms if t.traj.prompt_id == p], ocfg, m_tokens)
            g_aux = None
            if config.branching:
                g_aux = accumulate(pol, refs[p], [t for t in a_terms if t.traj.prompt_id == p], ocfg, a_tokens)
            try:
                apply_update(pol, g_main, g_aux, ocfg)
            except ArithmeticError as exc:
                raise type(exc)(f"step {step}: {exc}") from exc
        if history is not None:
            history.append([{n: v.copy() for n, v in pol.logits.items()} for pol in policies])

        if config.learns_estimator and step % config.estimator_every == 0:
            estimator.update(config.estimator_epochs, config.estimator_lr)

        if config.rollout_log:
            for t in mains:
                rollout_log.append({"step": step, "prompt_id": t.prompt_id, "origin": "main", "t_star": None,
                                    "reward": t.reward, "suffix_tokens": len(t)})
            for s in aux_sets:
                for b in s.branches:
                    rollout_log.append({"step": step, "prompt_id": b.prompt_id, "origin": "auxiliary",
                                        "t_star": s.plan.t_star, "reward": b.reward, "suffix_tokens": b.suffix_len})

        if step % config.eval_every == 0 or step == config.steps or capped:
            evals = [evaluate(pol, env, config.eval_mode, config.eval_samples, streams.eval(step, p))
                     for p, (env, pol) in enumerate(zip(envs, policies))]
            ents = [entropy(policies[t.prompt_id], node) for t in mains for node, _ in t.actions]
            records.append(MetricsRecord(
                step=step,
                train_success_rate=float(np.mean([t.reward for t in mains])),
                eval_success_rate=float(np.mean(evals)),
                entropy=float(np.mean(ents)),
                mean_length=float(np.mean([len(t) for t in mains])),
                unrecoverable_pivots=sum(1 for s in aux_sets if s.recovery_label == 0),
                tokens_main=tokens_main,
                tokens_aux=tokens_aux,
                estimator_w=estimator.w,
                estimator_b=estimator.b,
                wall_ms=round((time.perf_counter() - t_start) * 1000.0, 3) if config.record_wall_time else 0.0,
            ))
            log.debug("seed %d step %d eval %.6g", seed, step, records[-1].eval_success_rate)
        if capped:
            break

    result = RunResult(config, seed, envs, policies, estimator, records, aux_rollouts, rollout_log, history,
                       total_rollouts=rollouts)
    if config.metrics_path:
        export_metrics(records, config.metrics_path, config.metrics_format)
    if config.rollout_log:
        Path(config.rollout_log).write_text("".join(json.dumps(r) + "\n" for r in rollout_log))
    return result


def run_baseline_tree_dispersed(config: RunConfig, seed: int | None = None) -> RunResult:
    return run_training(replace(config, strategy="tree-dispersed"), seed)


def save_checkpoint(result: RunResult, path: str | Path) -> None:
    doc = {
        "format_version": 1,
        "metadata": result.metadata(),
        "policies": [
            {"env_id": pol.env_id, "logits": {str(n): pol.logits[n].tolist() for n in sorted(pol.logits)}}
            for pol in result.policies
        ],
        "estimator": result.estimator.to_dict(),
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_checkpoint(path: str | Path, envs: list[Environment]) -> tuple[list[Policy], EstimatorState]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != 1:
        raise ValueError("unsupported checkpoint format")
    policies = []
    for entry, env in zip(doc["policies"], envs):
        if entry["env_id"] != env.env_id:
            raise ValueError("checkpoint bound to a different environment")
        policies.append(Policy(env, {int(n): v for n, v in entry["logits"].items()}))
    return policies, EstimatorState.from_dict(doc["estimator"])


def matched_budget(deep: RunResult) -> int:
    """Extra root rollouts per step that match ``deep``'s observed auxiliary budget."""
    return int(round(deep.mean_aux_rollouts))


__all__ = [
    "RunResult",
    "budget",
    "evaluate",
    "make_envs",
    "matched_budget",
    "run_baseline_tree_dispersed",
    "run_training",
    "save_checkpoint",
    "load_checkpoint",
]
