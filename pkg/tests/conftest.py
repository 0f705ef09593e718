import pytest

from laspec.estimator import TrainConfig, train_estimator
from laspec.spectral import DEFAULT_GRID, ID_RANGES, canonical_db, generate_dataset


@pytest.fixture(scope="session")
def id_dataset():
    """Desk-scale in-distribution dataset: K = 2000 canonical-DB records, seed 0."""
    return generate_dataset(ID_RANGES, 2000, DEFAULT_GRID, canonical_db(), 0)


@pytest.fixture(scope="session")
def trained_estimator(id_dataset, tmp_path_factory):
    """Default estimator trained once per session; returns (model, checkpoint path, seconds)."""
    import time

    t0 = time.perf_counter()
    model, _ = train_estimator(id_dataset, TrainConfig())
    elapsed = time.perf_counter() - t0
    path = tmp_path_factory.mktemp("estimator") / "model"
    model.save(path)
    return model, path, elapsed
