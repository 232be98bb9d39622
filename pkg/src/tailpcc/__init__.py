"""Progressive point-cloud geometry codec with density-aware channel tail-drop.

Setting ``TAILPCC_DETERMINISTIC=1`` before import pins BLAS and OpenMP to a
single thread so repeated runs are bit-identical.
"""

import os

DETERMINISTIC_ENV = "TAILPCC_DETERMINISTIC"


def deterministic_mode() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "0") not in ("", "0", "false", "False")


if deterministic_mode():
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = "1"
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(1)
    except ImportError:  # environment variables alone suffice before BLAS loads
        pass

__version__ = "0.1.0"
