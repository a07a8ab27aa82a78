"""Execution-core selection: compiled extension when available, else pure Python.

Set ``SPECTYPE_PURE=1`` to force the pure-Python core.
"""
from __future__ import annotations

import os

from . import encoding, pycore


def _load_backend():
    if os.environ.get("SPECTYPE_PURE") == "1":
        return pycore, "pure"
    try:
        from . import _simcore  # type: ignore[attr-defined]
        return _simcore, "compiled"
    except ImportError:
        return pycore, "pure"


_backend, _backend_name = _load_backend()


def backend_name() -> str:
    return _backend_name


def get_backend(name: str | None = None):
    """Return (module, name); name in {None, 'pure', 'compiled'}."""
    if name is None:
        return _backend, _backend_name
    if name == "pure":
        return pycore, "pure"
    if name == "compiled":
        from . import _simcore  # raises ImportError if not built
        return _simcore, "compiled"
    raise ValueError(f"unknown backend {name!r}")


__all__ = ["encoding", "pycore", "backend_name", "get_backend"]
