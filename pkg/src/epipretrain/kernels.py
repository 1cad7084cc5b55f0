"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementations in ``_kernels_py`` are used. Set
``EPIPRETRAIN_KERNELS=python`` to force the fallback.
"""

import logging
import os

from . import _kernels_py

logger = logging.getLogger(__name__)

_NAMES = (
    "layernorm_forward",
    "layernorm_backward",
    "gelu_forward",
    "gelu_backward",
    "attention_forward",
    "attention_backward",
)


def _load():
    if os.environ.get("EPIPRETRAIN_KERNELS", "").lower() == "python":
        return _kernels_py, "python"
    try:
        from . import _ckernels
    except ImportError:
        logger.debug("compiled kernels unavailable; using numpy fallback")
        return _kernels_py, "python"
    return _ckernels, "compiled"


_impl, BACKEND = _load()

layernorm_forward = _impl.layernorm_forward
layernorm_backward = _impl.layernorm_backward
gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward
attention_forward = _impl.attention_forward
attention_backward = _impl.attention_backward


def get_backend(name: str):
    """Return the kernel module for ``"python"`` or ``"compiled"``."""
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
