"""
Where does attention look?
==========================

Bags of random rows hide a single witness row per bag. Averaging dilutes
that row; attention learns to weight it up.
"""

# %%
import numpy as np

from milser.attention import train_aggregator
from milser.bagging import assemble_bag, stack_bags
from milser.neuralcore import TrainConfig

rng = np.random.default_rng(0)
bags, witness_at = [], []
for i in range(200):
    rows = rng.normal(size=(rng.integers(3, 9), 8))
    j = rng.integers(len(rows))
    rows[j, i % 2] += 4.0
    witness_at.append(j)
    bags.append(assemble_bag(rows.astype(np.float32), i % 2, 8, f"b{i}"))
bags = stack_bags(bags)

# %%
cfg = TrainConfig(max_epochs=40, batch_size=16, learning_rate=0.003, decay_rate=1.0)
models = {kind: train_aggregator(kind, bags, cfg, 2, hidden=16, feature_dim=16)[0]
          for kind in ("avgpool", "dsingle", "feature")}
for kind, m in models.items():
    print(f"{kind:8s} training accuracy {(m.predict_bags(bags) == bags.y).mean():.3f}")

# %%
# Decision-level weights on the witness row, relative to a uniform 1/n.
# Each class column has its own weights; with two classes one column
# homing in on the witness is enough to decide the bag.
w = models["dsingle"].attention_weights(bags.X, bags.mask)
n = bags.mask.sum(axis=1)
for k in range(2):
    ratio = np.array([w[i, witness_at[i], k] * n[i] for i in range(len(bags))])
    print(f"class {k} column: witness weight {ratio.mean():.2f}x uniform")
