"""Acceptance gate.  Each test checks one criterion at its stated tolerance and
records a PASS/FAIL line that is repeated in the terminal summary.

Criteria 8-11 share one set of multi-seed runs on the default planted tree
(module fixture ``experiments``); expect several minutes for those.
"""
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import wilcoxon

from pivotlab.cli import main, verify_fixture
from pivotlab.env import build_planted_tree, exact_success_probability
from pivotlab.estimator import EstimatorState, init_estimator
from pivotlab.gradcheck import check_batch, random_frozen_batch
from pivotlab.harness.metrics import read_metrics, export_metrics
from pivotlab.harness.sweep import budget_comparison, declined, desk_config, final_entropy, strategy_comparison
from pivotlab.harness.train import run_training
from pivotlab.optim import accumulate, normalized_advantages
from pivotlab.policy import Policy, init_policy, sample_trajectory
from pivotlab.sampler import SegmentIndex, expected_recovery, pivot_distribution, segment

SEEDS = range(10)


# 1 -------------------------------------------------------------------------

def test_c01_fixture_exactness(acceptance, capsys):
    t0 = time.perf_counter()
    checks = verify_fixture("appendix-a")
    code = main(["fixture", "verify", "appendix-a"])
    elapsed = time.perf_counter() - t0
    worst = max(abs(got - want) for _, got, want, _ in checks)
    ok = all(c[3] for c in checks) and code == 0 and worst <= 1e-12 and elapsed < 1.0
    assert acceptance(1, ok, f"{len(checks)} quoted values, max |error| {worst:.1e} (tol 1e-12), "
                             f"exit {code}, {elapsed * 1e3:.1f} ms")


# 2 -------------------------------------------------------------------------

def test_c02_advantage_properties(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_mean = worst_std = 0.0
    n_deg = bad_deg = 0
    for i in range(1000):
        G = int(rng.integers(2, 17))
        kind = i % 4
        if kind == 0:
            r = rng.integers(0, 2, G).astype(float)
        elif kind == 1:
            r = rng.normal(size=G)
        elif kind == 2:
            r = np.full(G, float(rng.integers(0, 2)))
        else:
            r = rng.uniform(-100, 100, G).round(int(rng.integers(0, 3)))
        a = normalized_advantages(r)
        if np.all(r == r[0]):
            n_deg += 1
            bad_deg += not (a.degenerate and np.all(a.values == 0.0))
        else:
            worst_mean = max(worst_mean, abs(a.values.mean()))
            worst_std = max(worst_std, abs(a.values.std() - 1.0))
    elapsed = time.perf_counter() - t0
    ok = worst_mean <= 1e-9 and worst_std <= 1e-9 and bad_deg == 0 and elapsed < 1.0
    assert acceptance(2, ok, f"|mean| {worst_mean:.1e}, |std-1| {worst_std:.1e}, "
                             f"{n_deg} degenerate ({bad_deg} wrong), {elapsed * 1e3:.0f} ms")


# 3 -------------------------------------------------------------------------

def test_c03_pivot_distribution(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    negative = uniform_bad = mono_bad = 0
    for _ in range(1000):
        T = int(rng.integers(1, 65))
        idx = SegmentIndex(tuple(range(1, T + 1)), 1, T + 1)
        est = EstimatorState(w=float(rng.normal(0, 10)), b=float(rng.normal(0, 5)))
        q = pivot_distribution(idx, est, float(rng.uniform(-8, 8)))
        worst = max(worst, abs(q.sum() - 1.0))
        negative += int(np.any(q < 0))
        const = EstimatorState(w=0.0, b=float(rng.normal(0, 3)))
        u = pivot_distribution(idx, const, 0.0)
        uniform_bad += int(not np.all(u == 1.0 / T))
        if T > 1:
            m = pivot_distribution(idx, const, float(rng.uniform(1e-3, 8)))
            mono_bad += int(not np.all(np.diff(m) > 0))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and negative == 0 and uniform_bad == 0 and mono_bad == 0 and elapsed < 1.0
    assert acceptance(3, ok, f"|sum-1| {worst:.1e}, negatives {negative}, non-uniform {uniform_bad}, "
                             f"non-monotone {mono_bad}, {elapsed * 1e3:.0f} ms")


# 4 -------------------------------------------------------------------------

def test_c04_gradient_correctness(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = {"main": 0.0, "aux": 0.0}
    mask_bad = 0
    for _ in range(20):
        batch = random_frozen_batch(rng, max_depth=4, max_arity=3, max_G=4, max_K=4)
        for name, rep in check_batch(batch).items():
            worst[name] = max(worst[name], rep.max_rel)
        g_aux = accumulate(batch.policy, batch.ref, batch.aux, batch.config)
        prefix = {n for s in batch.aux_sets for b in s.branches for n, _ in b.actions[:b.prefix_len]}
        suffix = {n for s in batch.aux_sets for b in s.branches for n, _ in b.actions[b.prefix_len:]}
        mask_bad += sum(int(np.any(g_aux[n] != 0.0)) for n in prefix - suffix)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-5 and mask_bad == 0 and elapsed < 30
    assert acceptance(4, ok, f"max rel error main {worst['main']:.1e}, aux {worst['aux']:.1e} (tol 1e-5); "
                             f"nonzero prefix-only entries {mask_bad}; {elapsed:.1f} s")


# 5 -------------------------------------------------------------------------

def test_c05_grpo_reduction(acceptance):
    t0 = time.perf_counter()
    base = desk_config(steps=100, eval_every=100)
    grpo = run_training(replace(base, strategy="grpo"), seed=0, keep_theta=True)
    deep = run_training(desk_config(steps=100, eval_every=100, strategy="deep-grpo", **{"lambda": 0.0}),
                        seed=0, keep_theta=True)
    drift = 0.0
    for ta, tb in zip(grpo.theta_history, deep.theta_history):
        for pa, pb in zip(ta, tb):
            for n in set(pa) | set(pb):
                drift = max(drift, float(np.max(np.abs(pa.get(n, 0.0) - pb.get(n, 0.0)))))
    elapsed = time.perf_counter() - t0
    ok = len(grpo.theta_history) == 100 and deep.mean_aux_rollouts > 0 and drift <= 1e-12 and elapsed < 30
    assert acceptance(5, ok, f"max |theta drift| {drift:.1e} over 100 steps "
                             f"(aux rollouts/step {deep.mean_aux_rollouts:.1f}); {elapsed:.1f} s")


# 6 -------------------------------------------------------------------------

def test_c06_monte_carlo_vs_enumeration(acceptance):
    t0 = time.perf_counter()
    rows = []
    for i in range(5):
        env = build_planted_tree(6, 3, 0.15, 60 + i)
        pol = init_policy(env, "seeded-random", 1.5, 60 + i)
        p = exact_success_probability(env, pol)
        rng = np.random.default_rng(600 + i)
        n = 100_000
        hits = sum(sample_trajectory(pol, env, rng).reward for _ in range(n))
        z = (hits - n * p) / np.sqrt(n * p * (1 - p))
        rows.append(z)
    elapsed = time.perf_counter() - t0
    ok = all(abs(z) <= 3 for z in rows) and elapsed < 60
    assert acceptance(6, ok, "z-scores " + ", ".join(f"{z:+.2f}" for z in rows) + f" (|z| <= 3); {elapsed:.1f} s")


# 7 -------------------------------------------------------------------------

def _frozen_training_policy():
    """Policy of the seed-0 deep-grpo run at the first step whose exact success reaches 0.05."""
    run = run_training(desk_config(strategy="deep-grpo", steps=200, eval_every=200), seed=0, keep_theta=True)
    env = run.envs[0]
    for theta in run.theta_history:
        pol = Policy(env, theta[0])
        if exact_success_probability(env, pol) >= 0.05:
            return env, pol
    raise AssertionError("no intermediate policy found")


def test_c07_estimator_fidelity(acceptance):
    env, pol = _frozen_training_policy()
    t0 = time.perf_counter()
    K, n_samples = 8, 5000
    rng = np.random.default_rng(7)
    success_cache: dict[int, float] = {}
    est = init_estimator(n_samples)
    while len(est.buffer) < n_samples:
        traj = sample_trajectory(pol, env, rng)
        if traj.reward:
            continue
        idx = segment(traj, 1)
        t = int(rng.integers(1, idx.T + 1))
        node = traj.state_at(idx.boundaries[t - 1])
        if node not in success_cache:
            success_cache[node] = exact_success_probability(env, pol, node)
        y = int(rng.random() < 1.0 - (1.0 - success_cache[node]) ** K)
        est.record(t / idx.n_segments, y)
    est.update(epochs=500)
    depths = np.arange(0, env.depth + 1)
    curve_pts = np.array([expected_recovery(env, pol, int(d), K) if 0 < d < env.depth else np.nan for d in depths])
    grid = np.arange(1, 10) / 10
    exact = np.interp(grid * env.depth, depths[1:-1], curve_pts[1:-1])
    fitted = np.array([est.predict(r) for r in grid])
    mae = float(np.mean(np.abs(fitted - exact)))

    sep = init_estimator()
    mixed = init_estimator()
    for i in range(50):
        sep.record(0.2, 1), sep.record(0.8, 0)
        mixed.record(0.2, int(i < 40)), mixed.record(0.8, int(i < 10))
    sep.update(epochs=500, lr=0.5)
    mixed.update(epochs=500, lr=0.5)
    two_point = (sep.predict(0.2) >= 0.95 and sep.predict(0.8) <= 0.05
                 and abs(mixed.predict(0.2) - 0.8) <= 0.02 and abs(mixed.predict(0.8) - 0.2) <= 0.02)
    elapsed = time.perf_counter() - t0
    ok = mae <= 0.15 and two_point and elapsed < 30
    assert acceptance(7, ok, f"MAE {mae:.3f} (tol 0.15; exact curve {exact[0]:.3f}..{exact[-1]:.3f}); "
                             f"two-point fixtures {'hold' if two_point else 'fail'}; {elapsed:.1f} s")


# 8-11 ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def experiments():
    base = desk_config()
    t0 = time.perf_counter()
    strat = strategy_comparison(base, SEEDS)
    t1 = time.perf_counter()
    budget = budget_comparison(base, SEEDS, p1b8=strat["gamma=2"])
    t2 = time.perf_counter()
    tree = [run_training(replace(base, strategy="tree-dispersed"), s).compact() for s in SEEDS]
    t3 = time.perf_counter()
    return {"strategy": strat, "budget": budget, "tree": tree,
            "times": {"strategy": t1 - t0, "budget": t2 - t1 + (t1 - t0) / 4, "tree": t3 - t2}}


def _finals(runs):
    return np.array([r.final_eval for r in runs])


@pytest.mark.slow
def test_c08_strategy_ordering(acceptance, experiments):
    s = experiments["strategy"]
    m = {k: _finals(v).mean() for k, v in s.items()}
    p = wilcoxon(_finals(s["gamma=2"]), _finals(s["root-only"]), alternative="greater").pvalue
    order = m["gamma=2"] >= m["gamma=1"] >= m["uniform"] >= m["root-only"]
    elapsed = experiments["times"]["strategy"]
    ok = order and p < 0.05 and elapsed <= 1800
    assert acceptance(8, ok, "means " + ", ".join(f"{k} {v:.5f}" for k, v in m.items())
                      + f"; ordering {'holds' if order else 'violated'}; Wilcoxon p {p:.4f}; {elapsed:.0f} s")


@pytest.mark.slow
def test_c09_budget_ordering(acceptance, experiments):
    b = experiments["budget"]
    m = {k: _finals(v).mean() for k, v in b.items()}
    rollouts = {k: np.mean([r.total_rollouts for r in v]) for k, v in b.items()}
    ok = m["P1B8"] >= m["P2B4"] >= m["P1B4"] and m["P1B8"] >= m["P1B8-expand-all"]
    elapsed = experiments["times"]["budget"]
    ok = ok and elapsed <= 1800
    assert acceptance(9, ok, "means " + ", ".join(f"{k} {v:.5f}" for k, v in m.items())
                      + f"; mean total rollouts P1B8 {rollouts['P1B8']:.0f}, "
                        f"expand-all {rollouts['P1B8-expand-all']:.0f}; {elapsed:.0f} s")


@pytest.mark.slow
def test_c10_entropy(acceptance, experiments):
    s = experiments["strategy"]
    deep = [final_entropy(r) for r in s["gamma=2"]]
    grpo = [final_entropy(r) for r in s["root-only"]]
    wins = sum(a >= b for a, b in zip(deep, grpo))
    ok = wins >= 7
    assert acceptance(10, ok, f"deep-grpo entropy >= matched grpo on {wins}/10 seeds (need 7); "
                              f"median {np.median(deep):.4f} vs {np.median(grpo):.4f} nats")


@pytest.mark.slow
def test_c11_tree_pathology(acceptance, experiments):
    tree = sum(declined(r) for r in experiments["tree"])
    deep = sum(declined(r) for r in experiments["strategy"]["gamma=2"])
    ok = tree >= 6 and deep <= 2
    assert acceptance(11, ok, f"final <= 0.9 x peak: tree-dispersed {tree}/10 (need >= 6), "
                              f"deep-grpo {deep}/10 (need <= 2); tree mean final {_finals(experiments['tree']).mean():.3f}")


# 12 --------------------------------------------------------------------------

def test_c12_determinism_and_io(acceptance, tmp_path):
    cfg = desk_config(strategy="deep-grpo", steps=60)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run_training(replace(cfg, metrics_path=str(a)), seed=5)
    run_training(replace(cfg, metrics_path=str(b)), seed=5)
    same = a.read_bytes() == b.read_bytes()
    recs = read_metrics(a)
    jl = export_metrics(recs, tmp_path / "a.jsonl", "jsonl")
    csv2 = export_metrics(read_metrics(jl, "jsonl"), tmp_path / "c.csv")
    roundtrip = read_metrics(jl, "jsonl") == recs and csv2.read_bytes() == a.read_bytes()
    ok = same and roundtrip and len(recs) > 0
    assert acceptance(12, ok, f"repeat runs byte-identical: {same}; CSV/JSON-lines round-trip lossless: {roundtrip}")
