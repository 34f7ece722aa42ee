"""Kernel backend selection.

The compiled Cython kernels are used when the extension is importable; the
numpy kernels are the fallback. ``LEARNET_KERNELS=python`` forces the fallback.
"""
import os

from learnet import _pykernels

python_kernels = _pykernels

try:
    from learnet import _ckernels as compiled_kernels
except ImportError:  # extension not built
    compiled_kernels = None

if compiled_kernels is not None and os.environ.get("LEARNET_KERNELS", "").lower() != "python":
    kernels = compiled_kernels
else:
    kernels = _pykernels

NAME = kernels.NAME
