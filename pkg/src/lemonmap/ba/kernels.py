"""Backend selection for the derivative assembly kernel.

The compiled extension is used when it was built; otherwise the numpy
implementation.  ``LEMONMAP_KERNEL=python`` forces the fallback.
"""
import os

from . import _kernel_py

BACKEND = "python"
assemble = _kernel_py.assemble

if os.environ.get("LEMONMAP_KERNEL", "").lower() != "python":
    try:
        from . import _kernel as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        assemble = _compiled.assemble
        BACKEND = "cython"


def get_backend(name: str):
    """Return the ``assemble`` function of a named backend."""
    if name == "python":
        return _kernel_py.assemble
    if name == "cython":
        from . import _kernel
        return _kernel.assemble
    raise ValueError(f"unknown kernel backend {name!r}")
