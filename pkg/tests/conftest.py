import os

import pytest

import synthdata

CACHE_DIR = os.environ.get("DISCONDVAE_TEST_CACHE", "/tmp/discondvae_test_cache")


@pytest.fixture(scope="session")
def sprites_archive():
    """Full-cardinality synthetic sprites archive (cached across sessions)."""
    return synthdata.ensure_sprites_archive(CACHE_DIR)


@pytest.fixture(scope="session")
def condsprites(sprites_archive):
    from discondvae.data import load_condsprites

    return load_condsprites(sprites_archive)


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("mnist")
    synthdata.write_mnist_dir(str(d), n_train=512, n_test=128)
    return str(d)
