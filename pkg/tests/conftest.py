import pytest

from mfcca import sim
from mfcca.tensor import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    cfg = sim.CorpusConfig(n_train=8, n_eval=4)
    sim.make_corpus(out, cfg)
    return out, cfg
