"""Backend dispatch for the fused training kernels.

Two interchangeable implementations of the same call surface:

* ``reference`` - vectorized numpy, composed from the checked primitives
  in :mod:`wifimode.nn`;
* ``jit`` - numba-compiled fused loops, typically several times faster on
  the deep narrow networks used here.

Selection: the ``WIFIMODE_NUMBA`` environment variable ("1"/"0"/"auto",
default auto = numba when importable), overridable in-process with
``set_backend`` or the ``use_backend`` context manager.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

from . import reference

_BACKENDS = {"numpy": reference}

try:
    from . import jit
    _BACKENDS["numba"] = jit
except ImportError:  # numba not installed; numpy path still works
    jit = None

ENV_VAR = "WIFIMODE_NUMBA"

_TRUE = {"1", "on", "true", "yes", "numba"}
_FALSE = {"0", "off", "false", "no", "numpy"}

_override: str | None = None


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def backend_name() -> str:
    """Resolve the active backend name from override, env, then auto."""
    if _override is not None:
        return _override
    raw = os.environ.get(ENV_VAR, "auto").strip().lower()
    if raw in _TRUE:
        if "numba" not in _BACKENDS:
            raise RuntimeError(f"{ENV_VAR}={raw} requested numba, but numba is not importable")
        return "numba"
    if raw in _FALSE:
        return "numpy"
    if raw not in {"auto", ""}:
        raise ValueError(f"unrecognized {ENV_VAR} value {raw!r}")
    return "numba" if "numba" in _BACKENDS else "numpy"


def get_backend():
    """Module implementing forward_eval / forward_backward / adam_update."""
    return _BACKENDS[backend_name()]


def set_backend(name: str | None) -> None:
    """Force a backend by name; None restores env/auto resolution."""
    global _override
    if name is not None and name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    _override = name


@contextmanager
def use_backend(name: str):
    prev = _override
    set_backend(name)
    try:
        yield _BACKENDS[name]
    finally:
        set_backend(prev)
