import numpy as np
import pytest

from slsdeep import data


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def synthetic_dir(tmp_path):
    """Four training and two validation 64x64 synthetic lesions with manifests."""
    d = tmp_path / "data"
    train = data.write_synthetic_dataset(d, 4, size=64, seed=0, split="train")
    val = data.write_synthetic_dataset(d, 2, size=64, seed=1, split="val")
    return d, train, val


@pytest.fixture(scope="session")
def network_gradcheck():
    """End-to-end network gradient check, run once per session (about a minute)."""
    import time

    from slsdeep import checks

    t0 = time.perf_counter()
    results = _Timed(checks.run_scope("network", seed=0))
    results.elapsed = time.perf_counter() - t0
    return results


class _Timed(list):
    elapsed = 0.0
