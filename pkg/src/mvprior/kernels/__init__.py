"""Kernel backend selection.

The compiled Cython backend (`mvprior.kernels._fastcore`) is used when it has
been built; otherwise the pure-numpy reference backend is selected.  Set
MVPRIOR_KERNELS=numpy or =cython to force a backend (forcing cython raises if
the extension is missing).
"""

from __future__ import annotations

import os

from . import reference

_choice = os.environ.get("MVPRIOR_KERNELS", "auto")

if _choice == "numpy":
    impl = reference
elif _choice == "cython":
    from . import _fastcore as impl  # type: ignore[no-redef]
else:
    try:
        from . import _fastcore as impl  # type: ignore[no-redef]
    except ImportError:
        impl = reference

BACKEND = impl.BACKEND_NAME

window_attention_fwd = impl.window_attention_fwd
window_attention_bwd = impl.window_attention_bwd
bilinear_gather_fwd = impl.bilinear_gather_fwd
bilinear_gather_bwd = impl.bilinear_gather_bwd
bilinear_splat = impl.bilinear_splat
