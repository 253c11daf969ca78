"""GRU kernel backend selection.

The compiled extension runs the recurrence in C and wins by an order of
magnitude on small batches, where per-op numpy dispatch dominates; the
vectorized numpy implementation wins on large batches, where SIMD
transcendentals dominate.  When the extension is available, calls are
routed by batch size around a measured crossover; setting
VERIVQA_PURE_PYTHON forces the numpy path for everything.
"""
import os

from . import gru_numpy

SMALL_BATCH_LIMIT = 32

if os.environ.get("VERIVQA_PURE_PYTHON"):
    compiled = None
else:
    try:
        from . import _gru_cython as compiled  # type: ignore[attr-defined]
    except ImportError:
        compiled = None

BACKEND_NAME = compiled.NAME if compiled is not None else gru_numpy.NAME
gru_cell = gru_numpy.gru_cell  # step-wise decode helper, always numpy

if compiled is None:
    gru_forward = gru_numpy.gru_forward
    gru_backward = gru_numpy.gru_backward
else:
    def gru_forward(x, w, u, b):
        if x.shape[0] <= SMALL_BATCH_LIMIT:
            return compiled.gru_forward(x, w, u, b)
        return gru_numpy.gru_forward(x, w, u, b)

    def gru_backward(x, w, u, b, cache, grad_hs):
        if x.shape[0] <= SMALL_BATCH_LIMIT:
            return compiled.gru_backward(x, w, u, b, cache, grad_hs)
        return gru_numpy.gru_backward(x, w, u, b, cache, grad_hs)
