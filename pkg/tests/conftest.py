import numpy as np
import pytest

from pnoma.data import gen_synthetic
from pnoma.model import SystemConfig
from pnoma.numcore import RngStream
from pnoma.training import STREAM_DATA, TrainConfig, fit, new_state, tuples_for


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_data():
    train = gen_synthetic(64, 16, 16, RngStream(0, STREAM_DATA).child(0), "train")
    val = gen_synthetic(32, 16, 16, RngStream(0, STREAM_DATA).child(1), "val")
    return train, val


@pytest.fixture(scope="session")
def short_fit(toy_data):
    """An n=1 toy model after a handful of epochs; shared by tests that only need 'some' training."""
    train, val = toy_data
    state = new_state(SystemConfig(), TrainConfig.toy(max_epochs=4))
    tt, vt = tuples_for(state, train, val)
    return fit(state, train, val, tt, vt)
