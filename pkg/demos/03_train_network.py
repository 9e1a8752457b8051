"""Train the two-stage graph network on top of leaf embeddings and compare with trees alone.

Run: python demos/03_train_network.py   (about a minute on one core)
"""

import logging

from lambdafraud import DatasetConfig, TrainConfig
from lambdafraud.pipeline import lift_experiment

logging.basicConfig(level=logging.INFO, format="%(message)s")
logging.getLogger("lambdafraud.nn").setLevel(logging.WARNING)

cfg = TrainConfig(learning_rate=0.005, max_epochs=30, patience=5, hidden_dim=32, n_batch_layers=2, seed=0)
r = lift_experiment(DatasetConfig(n_transactions=30000, n_days=50, n_fraud_rings=18, ring_size=20, seed=0),
                    n_trees=64, baseline_trees=256, cfg=cfg)
print(f"\ntest AP  graph network {r.lnn.average_precision:.4f}")
print(f"test AP  encoder trees  {r.encoder_only.average_precision:.4f}")
print(f"test AP  tuned GBDT     {r.baseline.average_precision:.4f}")
print(f"ROC AUC  graph network {r.lnn.roc_auc:.4f} vs tuned GBDT {r.baseline.roc_auc:.4f}")
