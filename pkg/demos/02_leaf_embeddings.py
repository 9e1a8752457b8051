"""Boost a small tree ensemble and use its per-tree leaf values as a dense transaction code.

Run: python demos/02_leaf_embeddings.py
"""

import numpy as np

from lambdafraud import DatasetConfig, GBDTParams, average_precision, generate_dataset, split_masks, train_gbdt

data = generate_dataset(DatasetConfig(n_transactions=20000, n_days=40, n_fraud_rings=8, ring_size=20, seed=2))
split = split_masks(data.timestamp, seed=2)
tr, te = split == 0, split == 2

enc = train_gbdt(data.features[tr], data.label[tr], GBDTParams(n_trees=32, max_depth=4, seed=2))
codes = enc.encode(data.features[te][:3])
print(f"{enc.n_trees} trees -> each transaction becomes a {codes.shape[1]}-dim vector; first row:")
print(np.round(codes[0], 3))

ll = enc.meta["train_logloss"]
print(f"train logloss {ll[0]:.4f} -> {ll[-1]:.4f}")
print(f"test AP from features alone: {average_precision(enc.predict(data.features[te]), data.label[te]):.4f}")
print(f"fraud prevalence in test: {data.label[te].mean():.4f}")
