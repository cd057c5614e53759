"""Liquid column study: train the ASCC head and the plain CConv head ("No Sym")
on 1D columns, then score 100-step rollouts on held-in columns and on the
free-fall scenes against the explicit SPH solver.

    python demos/column_experiment.py [iterations]

5000 iterations per head take roughly 10 minutes each on one core.
"""
import logging
import sys

from mcparticles import experiments

logging.basicConfig(level=logging.INFO, format="%(message)s")

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 5000
out = experiments.column_experiment(iterations=iterations)

print(f"\n{'model':<10}{'column':>12}{'free fall':>12}   (RMSE x 1e-3)")
for name, label in (("sph", "SPH"), ("cconv", "No Sym"), ("ascc", "ASCC")):
    col, ff = out[name]
    print(f"{label:<10}{col * 1e3:>12.5f}{ff * 1e3:>12.5f}")
print("seconds:", {k: round(v, 1) for k, v in out["seconds"].items()})
