import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gradlab.rng import make_rng


@pytest.fixture
def rng():
    return make_rng(0)
