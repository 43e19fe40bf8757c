#!/usr/bin/env python3
"""
Desk-scale timing check.
Fills the replay buffer, times post-warmup training iterations and one test-set
evaluation, then projects the wall-clock cost of a full desk run.
With --full it trains the whole desk preset instead and also checks that the
mean generator loss over the last window is at most half the first window's.
"""
import argparse
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import get_preset
from core.crdpg import CRDPGTrainer, train
from core.evaluation import evaluate
from main import load_split, setup_logging

TIMED_ITERATIONS = 20
BUDGET_MINUTES = 30.0
LOSS_WINDOW = 500
LOSS_RATIO = 0.5


def project(config, split) -> float:
    trainer = CRDPGTrainer(config, split)
    state = trainer.state

    for m in range(config.train.batch_size):
        trainer.train_iteration(m)
        state.iteration = m + 1

    start = time.perf_counter()
    for m in range(state.iteration, state.iteration + TIMED_ITERATIONS):
        trainer.train_iteration(m)
        state.iteration = m + 1
    per_iteration = (time.perf_counter() - start) / TIMED_ITERATIONS

    start = time.perf_counter()
    bundle = state.bundle
    evaluate(bundle.generator, bundle.actor, config.env, split.test_processed)
    per_eval = time.perf_counter() - start

    total = config.train.iterations
    evals = total // config.train.eval_interval()
    print(f"  per iteration:     {per_iteration:.3f} s")
    print(f"  one evaluation:    {per_eval:.2f} s ({len(split.test_processed)} images, {evals} per run)")
    return (per_iteration * total + per_eval * evals) / 60.0


def full_run(config, split) -> tuple:
    start = time.perf_counter()
    _, records = train(config, split)
    minutes = (time.perf_counter() - start) / 60.0
    losses = [r.gen_loss for r in records if r.gen_loss is not None]
    first, last = float(np.mean(losses[:LOSS_WINDOW])), float(np.mean(losses[-LOSS_WINDOW:]))
    final = next(r for r in reversed(records) if r.test_mse_mean is not None)
    print(f"  generator loss:    first {LOSS_WINDOW} {first:.5f}, last {LOSS_WINDOW} {last:.5f} (ratio {last / first:.3f})")
    print(f"  test mse:          {final.test_mse_mean:.5f} +/- {final.test_mse_std:.5f}")
    learned = last <= LOSS_RATIO * first and np.isfinite(final.test_mse_mean)
    print(f"{'PASS' if learned else 'FAIL'}: loss ratio at most {LOSS_RATIO}")
    return minutes, learned


def run_benchmark(full: bool) -> int:
    setup_logging("WARNING")
    config = get_preset("desk")
    print("=" * 70)
    print(f"ADAPTIVE SCAN - DESK {'RUN' if full else 'TIMING'} (M={config.train.iterations}, N={config.train.batch_size})")
    print("=" * 70)

    split = load_split(config)
    if full:
        minutes, learned = full_run(config, split)
        print(f"  wall clock:        {minutes:.1f} min")
    else:
        minutes, learned = project(config, split), True
        print(f"  projected run:     {minutes:.1f} min")
    ok = minutes <= BUDGET_MINUTES
    print(f"{'PASS' if ok else 'FAIL'}: budget {BUDGET_MINUTES:.0f} min")
    return 0 if ok and learned else 1


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Time (or fully run) the desk preset")
    parser.add_argument("--full", action="store_true", help="train the whole preset and check the loss property")
    sys.exit(run_benchmark(parser.parse_args().full))
