import sys
from pathlib import Path

import pytest

from smoothsnn import numeric

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(autouse=True)
def _reset_float_mode():
    numeric.set_float_mode("float32")
    yield
    numeric.set_float_mode("float32")
