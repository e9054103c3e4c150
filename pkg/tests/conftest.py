"""Shared fixtures.

Session-scoped heavyweight artifacts (the nominal cold solve and the
generated desk-scale dataset) are produced once and shared; every consumer
treats them as read-only.
"""

from pathlib import Path

import pytest

from powered_descent.dataset import generate, split_and_standardize
from powered_descent.problem import nominal_instance
from powered_descent.scvx import scvx

DATA_DIR = Path(__file__).parent / "data"

#: generation settings of the session dataset; the checked-in constraint
#: network in tests/data was trained on the CSV export of exactly this
#: dataset, which is deterministic under the fixed seeds.
DATASET_BASES = 40
DATASET_SEED = 21
SPLIT_SEED = 2


@pytest.fixture(scope="session")
def nominal_inst():
    return nominal_instance()


@pytest.fixture(scope="session")
def nominal_report(nominal_inst):
    report = scvx(nominal_inst)
    return report


@pytest.fixture(scope="session")
def desk_dataset():
    ds = generate(DATASET_BASES, seed=DATASET_SEED)
    assert len(ds.samples) >= 200, (
        f"dataset generation produced only {len(ds.samples)} samples; "
        "the warm-start and baseline criteria need >= 200")
    return split_and_standardize(ds, ratio=0.8, seed=SPLIT_SEED)


@pytest.fixture(scope="session")
def desk_dataset_file(desk_dataset, tmp_path_factory):
    path = tmp_path_factory.mktemp("dataset") / "desk.jsonl"
    desk_dataset.save(path)
    return path


@pytest.fixture(scope="session")
def data_dir():
    return DATA_DIR
