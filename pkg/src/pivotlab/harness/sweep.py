"""Parameter sweeps and the desk-scale comparison protocols."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import RunConfig, override
from .metrics import export_metrics
from .train import RunResult, matched_budget, run_training

log = logging.getLogger(__name__)

# Step size for the desk-scale experiments; see the decisions ledger for how it was chosen.
DESK_ETA = 50.0
DESK_SEEDS = tuple(range(10))


def desk_config(**overrides) -> RunConfig:
    """Default experiment: depth-12 arity-4 planted tree, G=K=8, exact-mode eval."""
    config = override(RunConfig(eval_mode="exact", seeds=DESK_SEEDS), "eta", DESK_ETA)
    for key, value in overrides.items():
        config = override(config, key, value)
    return config


@dataclass
class SweepRow:
    axis: str
    value: object
    finals: list[float]
    paths: list[Path] = field(default_factory=list)
    results: list[RunResult] = field(default_factory=list, repr=False)

    @property
    def mean(self) -> float:
        return float(np.mean(self.finals))

    @property
    def std(self) -> float:
        return float(np.std(self.finals))


def _metrics_path(out_dir: Path, axis: str, value, seed: int, fmt: str) -> Path:
    return out_dir / f"{axis}={value}" / f"seed{seed}.{'csv' if fmt == 'csv' else 'jsonl'}"


def sweep(base: RunConfig, axis: str, values: Sequence, out_dir: str | Path | None = None,
          seeds: Iterable[int] | None = None, keep_results: bool = False) -> list[SweepRow]:
    """Run ``base`` with ``axis`` set to each of ``values`` over every seed.

    With ``out_dir`` each run's metrics go to ``<axis>=<value>/seed<s>.csv``
    and the per-variant summary to ``summary.csv``.
    """
    seeds = tuple(base.seeds if seeds is None else seeds)
    out = Path(out_dir) if out_dir is not None else None
    if values:
        override(base, axis, values[0])  # fail on a bad axis before any run
    rows = []
    for value in values:
        config = override(base, axis, value)
        row = SweepRow(axis, value, [])
        for seed in seeds:
            result = run_training(config, seed)
            row.finals.append(result.final_eval)
            if out is not None:
                path = _metrics_path(out, axis, value, seed, config.metrics_format)
                export_metrics(result.records, path, config.metrics_format)
                row.paths.append(path)
            if keep_results:
                row.results.append(result.compact())
            log.info("%s=%s seed %d final %.6g", axis, value, seed, result.final_eval)
        rows.append(row)
    if out is not None:
        write_summary(rows, out / "summary.csv")
    return rows


def write_summary(rows: Sequence[SweepRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["axis", "value", "n_seeds", "mean_final_eval", "std_final_eval"])
        for row in rows:
            writer.writerow([row.axis, row.value, len(row.finals), repr(row.mean), repr(row.std)])
    return path


def format_summary(rows: Sequence[SweepRow]) -> str:
    width = max([len(str(r.value)) for r in rows] + [5])
    lines = [f"{'value':<{width}}  mean_final  std_final  n"]
    for r in rows:
        lines.append(f"{str(r.value):<{width}}  {r.mean:10.6f}  {r.std:9.6f}  {len(r.finals)}")
    return "\n".join(lines)


def strategy_comparison(base: RunConfig, seeds: Iterable[int]) -> dict[str, list[RunResult]]:
    """Depth-bias variants plus root-only sampling granted the gamma=2 run's extra rollouts.

    The root-only run for each seed receives ``round(mean aux rollouts per step)``
    of that seed's gamma=2 run as extra root samples.
    """
    variants = {
        "gamma=2": replace(base, strategy="deep-grpo", gamma=2.0),
        "gamma=1": replace(base, strategy="deep-grpo", gamma=1.0),
        "uniform": replace(base, strategy="uniform-pivot"),
    }
    out: dict[str, list[RunResult]] = {name: [] for name in (*variants, "root-only")}
    for seed in seeds:
        for name, config in variants.items():
            out[name].append(run_training(config, seed).compact())
        extra = matched_budget(out["gamma=2"][-1])
        out["root-only"].append(run_training(replace(base, strategy="root-only-extra", extra=extra), seed).compact())
    return out


def budget_comparison(base: RunConfig, seeds: Iterable[int],
                      p1b8: Sequence[RunResult] | None = None) -> dict[str, list[RunResult]]:
    """P1B8, P2B4, P1B4 at equal step counts; expand-all capped at P1B8's total rollouts.

    ``p1b8`` may pass in existing gamma=2 P1B8 runs (one per seed, same order).
    """
    seeds = list(seeds)
    deep = replace(base, strategy="deep-grpo", gamma=2.0)
    out: dict[str, list[RunResult]] = {"P1B8": [], "P2B4": [], "P1B4": [], "P1B8-expand-all": []}
    for n, seed in enumerate(seeds):
        ref = p1b8[n] if p1b8 is not None else run_training(replace(deep, pivots=1, K=8), seed).compact()
        out["P1B8"].append(ref)
        out["P2B4"].append(run_training(replace(deep, pivots=2, K=4), seed).compact())
        out["P1B4"].append(run_training(replace(deep, pivots=1, K=4), seed).compact())
        capped = replace(deep, strategy="expand-all", pivots=1, K=8, max_rollouts=ref.total_rollouts)
        out["P1B8-expand-all"].append(run_training(capped, seed).compact())
    return out


def declined(result: RunResult, ratio: float = 0.9) -> bool:
    """True if the final eval is at most ``ratio`` times the best eval seen during the run."""
    evals = [r.eval_success_rate for r in result.records]
    return bool(evals) and evals[-1] <= ratio * max(evals)


def final_entropy(result: RunResult) -> float:
    return result.records[-1].entropy


__all__ = [
    "DESK_ETA",
    "DESK_SEEDS",
    "SweepRow",
    "budget_comparison",
    "declined",
    "desk_config",
    "final_entropy",
    "format_summary",
    "strategy_comparison",
    "sweep",
    "write_summary",
]
