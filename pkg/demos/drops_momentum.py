"""Momentum bookkeeping on 2D drops with gravity switched off.

With no external force the total momentum should not change. The ASCC head
keeps it to rounding error; the unconstrained CConv head does not.

    python demos/drops_momentum.py [iterations]
"""
import sys

from mcparticles import experiments

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 50
rows = experiments.drops_experiment(seeds=(0, 1, 2), iterations=iterations)

print(f"{'seed':>4}{'scale':>12}{'ASCC mean':>14}{'CConv median':>16}")
for r in rows:
    print(f"{r['seed']:>4}{r['scale']:>12.4g}{r['ascc']:>14.3e}{r['cconv']:>16.3e}")
