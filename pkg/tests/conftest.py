import pytest

from atlasaug.phantom import make_cohort
from tests.helpers import small_spec, square_atlas, tiny_config


@pytest.fixture(scope="session")
def cohort():
    """Atlas, four unlabeled and two heldout 16x16 subjects."""
    return make_cohort(small_spec(), n_unlabeled=4, n_heldout=2)


@pytest.fixture
def atlas():
    return square_atlas(size=8, num_classes=2)


@pytest.fixture
def config():
    return tiny_config()
