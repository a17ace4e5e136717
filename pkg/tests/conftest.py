import numpy as np
import pytest

from fsosr.dataset_io import write_dataset
from fsosr.episode import SyntheticConfig, benchmark_config, generate_synthetic


@pytest.fixture(scope="session")
def benchmark_dataset(tmp_path_factory):
    """The standard benchmark written to disk once per session: (path, dataset, masks)."""
    ds, masks = generate_synthetic(benchmark_config())
    path = tmp_path_factory.mktemp("bench") / "benchmark.fsof"
    write_dataset(ds, path)
    return path, ds, masks


@pytest.fixture(scope="session")
def default_dataset():
    """The default 5-class synthetic dataset, in memory: (dataset, masks)."""
    return generate_synthetic(SyntheticConfig())


def random_feature_map_values(rng: np.random.Generator, h=4, w=4, d=6):
    return rng.normal(size=(h, w, d))
