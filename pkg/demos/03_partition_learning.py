"""
Learning splits without context labels
======================================

Stage 1 pushes apart samples on which a bias classifier, trained on the
confounder features, fails.  Here the confounder features are the raw
context coordinates of the training set, so we can watch which samples the
learned splits collect and how each balancing strategy reshapes them.
"""

import numpy as np

from bmcl import btg
from bmcl.synthdata import GenConfig, generate

train = generate(GenConfig(n_train=2000, seed=0))[0]
s0, s1 = train.meta["context_dims"]
feats = train.features[:, s0:s1]
conflict = train.contexts != train.classes % 4
print(f"bias-conflicting samples: {conflict.sum()} of {len(train)}")

for strategy in ("none", "LB", "MB", "GB"):
    cfg = btg.BtgConfig(strategy=strategy)
    res = btg.build_partition(cfg, feats, train.classes, train.num_classes, seed=0)
    part = res.partition
    share = [conflict[part.assignment == t].mean() if part.sizes[t] else float("nan") for t in range(4)]
    print(f"{strategy:>4}: sizes {part.sizes.tolist()}  entropy {btg.split_entropy(part.sizes):.3f}  "
          f"conflict share per split {np.round(share, 2).tolist()}")

# the full report also cross-tabulates classes and hidden contexts against splits
report = btg.balance_report(part, train.classes, train.num_classes, "GB", train.contexts, train.num_contexts)
print(btg.format_balance_report(report))
