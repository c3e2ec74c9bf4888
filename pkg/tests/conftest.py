import numpy as np
import pytest

from ensboost.cvae import CvaeModel
from ensboost.data import FieldSeries, SyntheticConfig, generate_synthetic_ensemble
from ensboost.nn_core import make_rng

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return make_rng(12345)


def tiny_model(seed=0, data_dim=12, latent_dim=3, normalizer=None):
    """D=12, k=3, C=2 model with small random biases so no unit sits at zero."""
    r = make_rng(seed)
    model = CvaeModel.init(data_dim, r, latent_dim=latent_dim, condition_dim=2,
                           condition_hidden=(8,), encoder_hidden=(16,), decoder_hidden=(16,),
                           normalizer=normalizer)
    for net in model.nets().values():
        for layer in net.layers:
            layer.bias[:] = r.normal(0.0, 0.1, layer.bias.shape)
    return model


@pytest.fixture
def tiny():
    return tiny_model()


def random_series(seed=0, members=2, years=2, h=4, w=4, start_year=2000, scale=1.0):
    r = np.random.default_rng(seed)
    lat = np.linspace(-60, 60, h)
    lon = np.linspace(0, 360, w, endpoint=False)
    values = 280.0 + scale * r.standard_normal((members, years * 12, h, w))
    return FieldSeries(values, lat, lon, start_year, [f"m{i}" for i in range(members)])


@pytest.fixture
def small_synthetic():
    cfg = SyntheticConfig(grid=(8, 16), years=10, members=4, seed=3)
    return generate_synthetic_ensemble(cfg)
