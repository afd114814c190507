"""
Sequential fine-tuning with and without replay
===============================================

The classic continual-learning picture on the same synthetic stream: one
classifier over all ten classes, trained task after task.  Without a memory
only the last task survives (ACC near 1/5); a small reservoir of old samples
keeps the earlier tasks alive.
"""

import numpy as np

from cptlab.scenario import desk_config, run_traditional_cl

cfg = desk_config("clf", "text", seed=1)

for strategy in ("naive", "replay"):
    rec = run_traditional_cl(cfg, strategy)
    print(f"{rec.strategy:12s} ACC {rec.acc:.3f}")
    # row i: accuracy on every task after training on task i
    print(np.round(np.array(rec.R), 2))
