"""Train and score strategy / connector variants over several seeds.

    python scripts/run_strategy_matrix.py --seeds 0 1 2 --variants A B E F linear --out runs/matrix

Writes per-run checkpoints, hypotheses and reports under ``--out`` plus a
``results.json`` summary, and prints mean held-out MER per variant.
"""

import argparse
import os
import sys

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

from csmoe.experiments import VARIANTS, mean_mer, run_matrix, write_results
from csmoe.synthdata import SynthSpec, gen_corpus


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--variants", nargs="+", default=["A", "B", "E", "F", "linear"], choices=sorted(VARIANTS))
    ap.add_argument("--out", default="runs/matrix")
    args = ap.parse_args(argv)

    corpus = gen_corpus(SynthSpec())
    os.makedirs(args.out, exist_ok=True)

    def show(r):
        print(f"{r.variant:>7} seed {r.seed}: {r.report.summary_line()} ({r.seconds:.0f} s)", flush=True)

    results = run_matrix(corpus, args.variants, args.seeds, args.out, on_result=show)
    write_results(results, os.path.join(args.out, "results.json"))
    for name, mer in mean_mer(results).items():
        print(f"mean MER {name:>7}: {mer:.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
