"""Backend selection for the compiled kernels.

Set ``HEKI_BACKEND=numpy`` to force the pure-numpy code paths, or
``HEKI_BACKEND=numba`` to require numba. By default numba is used when it
can be imported.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

HAVE_NUMBA = numba is not None

_requested = os.environ.get("HEKI_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise ImportError(f"HEKI_BACKEND must be 'numba' or 'numpy', got {_requested!r}")
if _requested == "numba" and not HAVE_NUMBA:
    raise ImportError("HEKI_BACKEND=numba but numba is not installed")

BACKEND = "numpy" if (_requested == "numpy" or not HAVE_NUMBA) else "numba"

AVAILABLE_BACKENDS = ("numba", "numpy") if HAVE_NUMBA else ("numpy",)


def njit(fn=None, **kwargs):
    """``numba.njit`` with caching on, or a no-op decorator without numba."""
    kwargs.setdefault("cache", True)
    if numba is None:
        return fn if fn is not None else (lambda f: f)
    if fn is None:
        return numba.njit(**kwargs)
    return numba.njit(**kwargs)(fn)
