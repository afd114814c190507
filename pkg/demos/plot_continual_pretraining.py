"""
Continual pre-training on a toy text stream
============================================

Pre-train a small transformer on a base corpus, then keep pre-training it on
five experiences of new classes.  After every experience the carried model is
fine-tuned on the forgetting-control (FC) task, whose accuracy drop against
the starting checkpoint is the forgetting.  Runs MLM and supervised
classification on the same stream and prints both forgetting rows.

Small stream sizes keep this under a minute; ``desk_config`` without overrides
gives the sizes used by the acceptance suite.
"""

from dataclasses import replace

import numpy as np

from cptlab.scenario import desk_config, flat_tables, run_scenario

SEED = 0


def small(objective):
    cfg = desk_config(objective, "text", seed=SEED)
    stream = replace(cfg.stream, n_base=600, n_pretrain=300, n_fc_train=200, n_fc_val=100, n_fc_test=200)
    return replace(cfg, stream=stream, model=replace(cfg.model, depth=2))


records = {obj: run_scenario(small(obj)) for obj in ("mlm", "clf")}

for obj, rec in records.items():
    tables = flat_tables(rec)
    print(f"== {obj} ({rec.wall_clock:.0f}s)")
    for name in ("fc_accuracy", "fc_one_epoch", "forgetting", "downstream_accuracy"):
        print(tables[name].splitlines()[1])

# one number per run: forgetting averaged over the experiences
for obj, rec in records.items():
    print(obj, "mean forgetting", round(float(np.mean([e.forgetting for e in rec.experiences])), 4))

# how similar is the final model to the starting one, bottom vs top layers
for obj, rec in records.items():
    e = rec.experiences[-1]
    print(obj, f"CKA(h5, h0) bottom {e.cka_bottom:.3f} top {e.cka_top:.3f}")
