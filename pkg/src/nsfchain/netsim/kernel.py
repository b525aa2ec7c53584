"""Select the store-and-forward kernel: compiled if built, else pure Python.

Set ``NSFCHAIN_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _pipeline_py

python_hop_arrivals = _pipeline_py.hop_arrivals

compiled_hop_arrivals = None
if not os.environ.get("NSFCHAIN_PURE_PYTHON"):
    try:
        from ._pipeline import hop_arrivals as compiled_hop_arrivals  # type: ignore
    except ImportError:  # extension not built
        compiled_hop_arrivals = None

if compiled_hop_arrivals is not None:
    hop_arrivals = compiled_hop_arrivals
    IMPLEMENTATION = "cython"
else:
    hop_arrivals = python_hop_arrivals
    IMPLEMENTATION = "python"
