"""Satellite-enhanced BEV map construction on synthetic driving scenes."""

import os

# Pin BLAS to one thread so reductions have a fixed order and results are
# bitwise reproducible regardless of the host's thread configuration.
if os.environ.get("SATBEV_ALLOW_BLAS_THREADS") != "1":
    try:
        from threadpoolctl import threadpool_limits

        _blas_limit = threadpool_limits(limits=1)
    except ImportError:  # pragma: no cover
        _blas_limit = None

__version__ = "0.1.0"
