"""Kernel backend selection.

The compiled extension is preferred; set ``SKYNAS_PURE_PYTHON=1`` to force the
numpy fallback. Both backends expose the same functions.
"""
import os

from . import _kernels_py

python_backend = _kernels_py
compiled_backend = None

if os.environ.get("SKYNAS_PURE_PYTHON") != "1":
    try:
        from . import _kernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if backend is compiled_backend else "python"

dwconv3_forward = backend.dwconv3_forward
dwconv3_backward_input = backend.dwconv3_backward_input
dwconv3_backward_weight = backend.dwconv3_backward_weight
maxpool2_forward = backend.maxpool2_forward
maxpool2_backward = backend.maxpool2_backward
bn_train_forward = backend.bn_train_forward
bn_train_backward = backend.bn_train_backward
relu6_backward = backend.relu6_backward
