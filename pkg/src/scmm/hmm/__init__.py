"""Exact HMM inference with a compiled core and a numpy fallback.

The compiled kernels are selected at import when available; set
SCMM_KERNELS=py or SCMM_KERNELS=cy to force a backend.
"""

import os

from . import kernels_py

_requested = os.environ.get("SCMM_KERNELS", "auto")
if _requested not in ("auto", "py", "cy"):
    raise RuntimeError(f"SCMM_KERNELS must be auto, py or cy, got {_requested!r}")

if _requested == "py":
    kernels = kernels_py
else:
    try:
        from . import _kernels as kernels
    except ImportError:
        if _requested == "cy":
            raise
        kernels = kernels_py

BACKEND = "cy" if kernels is not kernels_py else "py"

from .api import (  # noqa: E402
    PosteriorStats,
    emission_evidence,
    expected_ll,
    forward_backward,
    viterbi,
)

DegenerateEvidence = kernels_py.DegenerateEvidence

__all__ = [
    "BACKEND", "DegenerateEvidence", "PosteriorStats", "emission_evidence",
    "expected_ll", "forward_backward", "kernels", "kernels_py", "viterbi",
]
