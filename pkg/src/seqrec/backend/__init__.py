"""Kernel backend selection.

The hot per-row kernels (softmax, layer norm, embedding gather/scatter, Adam
update) exist twice: a Cython extension and a pure NumPy fallback with
identical signatures. The extension is preferred when it imports cleanly.
Set SEQREC_BACKEND=python to force the fallback, or SEQREC_BACKEND=compiled
to fail loudly if the extension is missing. Matrix multiplies are delegated
to BLAS through NumPy in both backends.
"""

import os

from seqrec.backend import pykernels

_choice = os.environ.get("SEQREC_BACKEND", "auto").lower()
if _choice not in ("auto", "python", "compiled"):
    raise ValueError(f"SEQREC_BACKEND must be auto, python or compiled, "
                     f"got {_choice!r}")

if _choice == "python":
    kernels = pykernels
else:
    try:
        from seqrec.backend import _ckernels as kernels
    except ImportError:
        if _choice == "compiled":
            raise
        kernels = pykernels


def backend_name() -> str:
    """'compiled' when the Cython kernels are active, else 'python'."""
    return "python" if kernels is pykernels else "compiled"
