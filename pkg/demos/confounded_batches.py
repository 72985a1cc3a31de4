"""Confounded co-batched tasks: accuracy at batch size B and 2B, and how much
the adapted classifier leans on factors that belong to other tasks.

A handful of seeds and a reduced budget; the full sweep lives behind
``causalmeta sweep-batch``.

Run:  python3 demos/confounded_batches.py [iterations] [seeds]
"""
import sys

import numpy as np

from causalmeta import rng as rngs
from causalmeta.config import parse_config
from causalmeta.confounder import (adapted_noncausal_mass, confounded_source, evaluation_tasks,
                                   sweep_cell_config, world_for)
from causalmeta.meta import meta_evaluate, meta_train

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 500
seeds = range(int(sys.argv[2]) if len(sys.argv) > 2 else 2)
base = parse_config({"sweep": {"iterations": iters}})
sw = base.sweep

for mode in ("plain", "causal"):
    for bs in (sw.base_batch, 2 * sw.base_batch):
        accs, mass = [], []
        for seed in seeds:
            cfg = sweep_cell_config(base, mode, bs, seed)
            world = world_for(cfg)
            source = confounded_source(world, cfg.world.agreement, sw.shots, sw.queries, sw.pairing)
            bundle, _ = meta_train(cfg, source)
            tasks = evaluation_tasks(world, world.test_ids, sw.eval_tasks, sw.shots, sw.queries,
                                     rngs.stream(seed, rngs.EVAL))
            accs.append(meta_evaluate(bundle, tasks, cfg).mean)
            mass.append(np.mean([adapted_noncausal_mass(bundle, world, t, cfg, n_points=16)
                                 for t in tasks[:10]]))
        print(f"{mode:>6} B={bs}: held-out accuracy {np.mean(accs):.3f}, "
              f"non-causal sensitivity {np.mean(mass):.3f}")
