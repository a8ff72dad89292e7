import pytest

from kvadapter.toy_model import build_toy_model, random_context


@pytest.fixture(scope="session")
def model_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("toy") / "model"
    build_toy_model(path, seed=0)
    return path


@pytest.fixture(scope="session")
def context():
    return random_context(seed=1, n_words=200)
