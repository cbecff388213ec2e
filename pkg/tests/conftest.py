import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

import pytest  # noqa: E402

from edgeopc.litho import make_synthetic_kernels  # noqa: E402


@pytest.fixture(scope="session")
def small_kernels():
    """Three kernels small enough for 48 x 48 and 64 x 64 grids."""
    return make_synthetic_kernels(size=21, n_kernels=3, cutoff=0.1)


@pytest.fixture(scope="session")
def kernels():
    """The default synthetic optics used for 512 x 512 runs."""
    return make_synthetic_kernels()
