"""Select the compiled metric kernels when available.

Set ``MPATH_PURE_PYTHON=1`` to force the fallback.  ``BACKEND`` reports which
implementation is live.
"""

import os

import numpy as np

from mpath._ext import pykernels

BACKEND = "python"
_impl = pykernels

if os.environ.get("MPATH_PURE_PYTHON", "") in ("", "0"):
    try:
        from mpath._ext import ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass


def _as_ids(seq):
    if BACKEND == "cython":
        return np.ascontiguousarray(seq, dtype=np.int64)
    return seq


def lcs_length(a, b) -> int:
    return int(_impl.lcs_length(_as_ids(a), _as_ids(b)))


def ngram_matches(cand, ref, n: int) -> tuple[int, int]:
    m, t = _impl.ngram_matches(_as_ids(cand), _as_ids(ref), n)
    return int(m), int(t)
