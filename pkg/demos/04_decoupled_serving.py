"""Precompute entity embeddings offline, then score online from the store without touching the graph.

Run: python demos/04_decoupled_serving.py
"""

import tempfile
from pathlib import Path

import numpy as np

from lambdafraud import DatasetConfig, GBDTParams, TrainConfig, generate_dataset, split_masks, train_gbdt, transform
from lambdafraud.graph import graph_accesses
from lambdafraud.pipeline import train_lnn
from lambdafraud.serving import RTScorer, batch_infer, e2e_scores, pipeline_checksum, request_for, store_flush, store_load

data = generate_dataset(DatasetConfig(n_transactions=8000, n_days=30, n_fraud_rings=6, ring_size=15, seed=4))
split = split_masks(data.timestamp, seed=4)
td = transform(data, 14, 1024, split)
enc = train_gbdt(data.features[split == 0], data.label[split == 0], GBDTParams(n_trees=16, seed=4))
lnn, _ = train_lnn(td, enc, TrainConfig(hidden_dim=16, n_batch_layers=2, max_epochs=4, node_budget=1024, seed=4))

path = Path(tempfile.mkdtemp()) / "store.lfes"
manifest = store_flush(batch_infer(lnn, enc, td), path, pipeline_checksum(lnn, enc))
print(f"offline: {manifest['n_entries']} (entity, day) vectors of width {manifest['hidden_dim']} -> {path}")

scorer = RTScorer(lnn, enc, store_load(path, pipeline_checksum(lnn, enc)))
p = td.partitions[-1]
rows, full = e2e_scores(lnn, enc, td, p)
before = graph_accesses.count
online = np.array([scorer.score(request_for(td, int(r))).score for r in rows])
print(f"online: scored {len(rows)} day-{p.day} transactions with {graph_accesses.count - before} graph reads")
print(f"max |online - full graph| = {np.abs(online - full).max():.2e}")

req = request_for(td, int(rows[0]))
resp = scorer.score(req)
print("\nrequest :", {k: v for k, v in req.to_json().items() if k != "features"})
print("response:", resp.to_json())
