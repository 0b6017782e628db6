import logging

import pytest

from fedload.data import SyntheticSpec, generate_synthetic, prepare_client


def make_datasets(n_clients=3, days=10, seed=7, lookback=8, **kw):
    """Small prepared client pool for federation-level tests."""
    spec = SyntheticSpec(n_clients=n_clients, days=days, seed=seed, **kw)
    return {s.client_id: prepare_client(s, lookback=lookback) for s in generate_synthetic(spec)}


@pytest.fixture(autouse=True)
def _quiet_scaler_warnings(caplog):
    # out-of-range scaled values are expected on synthetic validation splits
    logging.getLogger("fedload.data").setLevel(logging.ERROR)
    yield
