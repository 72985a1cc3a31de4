"""A short sinusoid run in both modes, evaluated on the same held-out tasks.

Far below the full 10 000-iteration budget; meant to show the moving parts.

Run:  python3 demos/sinusoid_short.py [iterations]
"""
import sys
import time

from causalmeta import rng as rngs
from causalmeta.config import ExperimentConfig
from causalmeta.meta import meta_evaluate, meta_train, sinusoid_source
from causalmeta.models import init_bundle

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 500

for mode in ("plain", "causal"):
    c = ExperimentConfig(mode=mode, iterations=iters)
    tasks = sinusoid_source(c.sinusoid)(rngs.stream(0, rngs.EVAL), 100)
    untrained = meta_evaluate(init_bundle(c), tasks, c)
    t = time.perf_counter()
    bundle, rows = meta_train(c)
    secs = time.perf_counter() - t
    res = meta_evaluate(bundle, tasks, c)
    tail = sum(r.pred_loss for r in rows[-50:]) / min(50, len(rows))
    print(f"{mode:>6}: {bundle.num_params()} params, {secs:.0f}s, train loss (last 50) {tail:.3f}, "
          f"query MSE {untrained.mean:.3f} -> {res.mean:.3f} +/- {res.half_width:.3f}")
