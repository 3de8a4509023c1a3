"""
The class x context benchmark
=============================

Each sample carries a class signal and a context signal.  At train time
context c % 4 co-occurs with class c for a fraction rho of the samples; the
two test contexts never appear in training.  A plain classifier can lean on
the context, and that shortcut does not transfer.
"""

import numpy as np

from bmcl.synthdata import GenConfig, context_histogram, generate

cfg = GenConfig(seed=0)
train, val, test = generate(cfg)
print(f"train {len(train)}  val {len(val)}  test {len(test)}  feature dim {train.features.shape[1]}")
print("class dims", train.meta["class_dims"], " context dims", train.meta["context_dims"])

# rows are classes, columns are contexts; the linked cell dominates each row
hist = context_histogram(train)
print("train class x context counts\n", hist)
linked = np.mean(train.contexts == train.classes % cfg.train_contexts)
print(f"fraction of train samples in their linked context: {linked:.3f} (rho = {cfg.rho})")

# the test contexts are disjoint from the training ones
print("train contexts", np.unique(train.contexts), " test contexts", np.unique(test.contexts))

# the "all" convention spreads off-link samples over every train context
wide = generate(GenConfig(seed=0, off_link="all"))[0]
print("linked fraction with off_link='all':", round(float(np.mean(wide.contexts == wide.classes % 4)), 3))
