"""Feasible-set volumes before adaptation, after adaptation and after terminal enlargement.

Usage: python3 scripts/volume_table.py [msd:3|msd:8] [samples] [seeds...]
Writes table1.json / table1.csv under runs/<benchmark>/.
"""
import sys
from pathlib import Path

from ampsc.bench import ExperimentConfig, run_table1, write_table1


def main(argv):
    benchmark = argv[0] if argv else "msd:3"
    samples = int(argv[1]) if len(argv) > 1 else 100_000
    seeds = [int(s) for s in argv[2:]] or [0, 1, 2, 3, 4]
    cfg = ExperimentConfig(benchmark=benchmark, seeds=seeds, samples=samples)

    def show(row):
        d = row.to_dict()
        print(f"seed {d['seed']}: +{d['gain_final_pct']:.1f}% after adaptation, "
              f"+{d['gain_enlarged_pct']:.1f}% with enlargement", flush=True)

    report = run_table1(cfg, progress=show)
    out = Path("runs") / benchmark.replace(":", "")
    out.mkdir(parents=True, exist_ok=True)
    write_table1(report, out)
    print(f"wrote {out}")


if __name__ == "__main__":
    main(sys.argv[1:])
