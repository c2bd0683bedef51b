"""Drive a full experiment: rounds, metrics CSV, checkpoints and the summary JSON."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .federation import RoundMetrics, run_round, setup
from .models import parse_levels, save_checkpoint

log = logging.getLogger(__name__)

CSV_HEADER = ["round", "global_acc", "local_acc_mean", "distill_loss", "ortho_residual", "seconds"]


def _fmt(value: float) -> str:
    return f"{value:.9g}"


def metrics_row(m: RoundMetrics, wall_clock: bool) -> list[str]:
    seconds = _fmt(m.seconds) if wall_clock else "nan"
    return [str(m.round), _fmt(m.global_acc), _fmt(m.local_acc_mean),
            _fmt(m.distill_loss), _fmt(m.ortho_residual), seconds]


def summarize(accs, targets) -> dict:
    accs = np.asarray(accs, dtype=np.float64)
    reached = {}
    for target in targets:
        hits = np.flatnonzero(accs >= target)
        reached[str(target)] = int(hits[0]) + 1 if hits.size else None
    if accs.size == 0:
        return {"final_acc": None, "best_acc": None, "last10_mean": None,
                "last10_std": None, "rounds_to_target": reached}
    tail = accs[-10:]
    return {"final_acc": float(accs[-1]), "best_acc": float(accs.max()),
            "last10_mean": float(tail.mean()), "last10_std": float(tail.std()),
            "rounds_to_target": reached}


def run_experiment(config: ExperimentConfig, out_dir=None) -> dict:
    """Run ``config.rounds`` rounds, writing ``metrics.csv`` row by row.

    Rows are flushed as they are produced, so a failure mid-run leaves the
    completed rounds on disk.
    """
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = setup(config)
    levels = parse_levels(config.levels, config.level_decay)
    accs = []
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        fh.flush()
        for _ in range(config.rounds):
            state, metrics = run_round(state)
            writer.writerow(metrics_row(metrics, config.wall_clock_in_csv))
            fh.flush()
            accs.append(metrics.global_acc)
            log.info("round %d: global %.4f local %.4f distill %.4g",
                     metrics.round, metrics.global_acc, metrics.local_acc_mean,
                     metrics.distill_loss)
            if config.checkpoint_every and metrics.round % config.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{metrics.round:04d}.json",
                                state.model, levels, state.projections)
    summary = summarize(accs, config.targets)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
