"""Closed-loop sweep over learning-input sources and disturbance modes on msd:3.

Prints violations, intervention rate and mean solve time per run.
Usage: python3 scripts/safety_sweep.py [runs] [steps]
"""
import sys

from ampsc.bench import build_setup, run_experiment

SOURCES = ("uniform-random", "pd-setpoint", "adversarial-bound")
DISTURBANCES = ("uniform", "adversarial")


def main(argv):
    runs = int(argv[0]) if argv else 20
    steps = int(argv[1]) if len(argv) > 1 else 150
    for seed in range(runs):
        source, dist = SOURCES[seed % 3], DISTURBANCES[(seed // 3) % 2]
        log = run_experiment(build_setup("msd:3", seed), steps, source, dist, record_time=True)
        s = log.summary()
        print(f"seed {seed:2d} {source:18s} {dist:11s} violations={s['violations']} "
              f"interventions={s['intervention_rate']:.2f} "
              f"solve={1e3 * s['mean_solve_time']:.1f}ms", flush=True)


if __name__ == "__main__":
    main(sys.argv[1:])
