import os
from types import SimpleNamespace

import pytest
from hypothesis import HealthCheck, settings

from lambdafraud.datagen import DatasetConfig, generate_dataset, split_masks
from lambdafraud.encoder import GBDTParams, train_gbdt
from lambdafraud.graph import transform
from lambdafraud.nn import TrainConfig, build_train_batches, train

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=30, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def small():
    """A 3k-transaction dataset with a briefly trained encoder and network."""
    data = generate_dataset(DatasetConfig(n_transactions=3000, n_days=20, n_fraud_rings=3, ring_size=10, seed=11))
    split = split_masks(data.timestamp, seed=11)
    enc = train_gbdt(data.features[split == 0], data.label[split == 0], GBDTParams(n_trees=16, max_depth=3, seed=11))
    td = transform(data, 10, 512, split)
    batches = build_train_batches(td, enc.encode(data.features), 512)
    lnn, hist = train(None, batches, TrainConfig(hidden_dim=16, n_batch_layers=2, max_epochs=3, seed=11))
    return SimpleNamespace(data=data, split=split, enc=enc, td=td, lnn=lnn, hist=hist)


ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_acceptance(ac: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[ac] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for ac in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[ac]
        terminalreporter.write_line(f"{ac}: {'PASS' if ok else 'FAIL'} - {detail}")
