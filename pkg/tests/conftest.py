import os
import sys
from pathlib import Path

# timings in the acceptance suite are stated for one core; set before numpy loads
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hgmn.hetgraph import load_graph_file  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def g0():
    return load_graph_file(FIXTURES / "g0.json")


@pytest.fixture
def g12():
    return load_graph_file(FIXTURES / "fixture12.json")
