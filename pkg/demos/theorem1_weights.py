"""Least-squares weight on the partner task's factors, population vs samples.

Run:  python3 demos/theorem1_weights.py
"""
import numpy as np

from causalmeta import rng as rngs
from causalmeta.confounder import finite_sample_norms, population_lsq_weights
from causalmeta.tasks import JointSetting

setting = JointSetting()   # mu = 1, sd = 1, two factors per task

print("population weights [own block | partner block]")
for q in (0.0, 0.2, 0.5, 0.8, 1.0):
    w = population_lsq_weights(setting, q)
    print(f"  q={q:.1f}  {np.round(w, 4)}  partner norm {np.linalg.norm(w[2:]):.4f}")

# with independent labels the partner block only picks up sampling noise,
# which shrinks like 1/sqrt(n)
print("\nq=0.5, median partner-block norm over resamples")
for n, reps in ((50, 1000), (500, 1000), (5000, 200), (50000, 50)):
    _, norms = finite_sample_norms(setting, 0.5, n, reps, rngs.stream(0, rngs.EVAL, sub=n))
    med = np.median(norms)
    print(f"  n={n:<6d} median {med:.5f}   median*sqrt(n) {med * np.sqrt(n):.3f}")
