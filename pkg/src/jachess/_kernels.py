"""Hot forward kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import from ``JACHESS_DISABLE_NUMBA`` (any of
``1/true/yes`` forces numpy) and can be switched at runtime with
:func:`set_backend`, which the parity tests and the benchmark use.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

GELU_C = 0.7978845608028654  # sqrt(2/pi)
GELU_A = 0.044715

_disabled = os.environ.get("JACHESS_DISABLE_NUMBA", "0").strip().lower() in ("1", "true", "yes")
_backend = "numba" if (numba is not None and not _disabled) else "numpy"


def backend():
    return _backend


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and numba is None:
        raise RuntimeError("numba is not importable")
    prev, _backend = _backend, name
    return prev


# ---------------------------------------------------------------- numpy path


def _softmax_np(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _layer_norm_np(x, eps):
    xc = x - x.mean(axis=-1, keepdims=True)
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)


def _gelu_np(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x * x * x)))


def _scatter_rows_np(src, ids, n_rows):
    out = np.zeros((n_rows, src.shape[1]))
    np.add.at(out, ids, src)
    return out


# ---------------------------------------------------------------- numba path

if numba is not None:

    @numba.njit(cache=True)
    def _softmax_nb(x):
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            m = x[i, 0]
            for j in range(1, x.shape[1]):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(x.shape[1]):
                e = np.exp(x[i, j] - m)
                out[i, j] = e
                s += e
            for j in range(x.shape[1]):
                out[i, j] /= s
        return out

    @numba.njit(cache=True)
    def _layer_norm_nb(x, eps):
        out = np.empty_like(x)
        n = x.shape[1]
        for i in range(x.shape[0]):
            mu = 0.0
            for j in range(n):
                mu += x[i, j]
            mu /= n
            var = 0.0
            for j in range(n):
                d = x[i, j] - mu
                var += d * d
            r = 1.0 / np.sqrt(var / n + eps)
            for j in range(n):
                out[i, j] = (x[i, j] - mu) * r
        return out

    @numba.njit(cache=True)
    def _scatter_rows_nb(src, ids, n_rows):
        out = np.zeros((n_rows, src.shape[1]))
        for i in range(ids.shape[0]):
            r = ids[i]
            for j in range(src.shape[1]):
                out[r, j] += src[i, j]
        return out


# ---------------------------------------------------------------- dispatch


def _rows(x):
    return np.ascontiguousarray(x, dtype=np.float64).reshape(-1, x.shape[-1])


def softmax(x):
    """Softmax over the last axis."""
    if _backend == "numba":
        return _softmax_nb(_rows(x)).reshape(x.shape)
    return _softmax_np(x)


def layer_norm(x, eps=1e-5):
    """Zero-mean, unit-variance normalization over the last axis (no affine)."""
    if _backend == "numba":
        return _layer_norm_nb(_rows(x), eps).reshape(x.shape)
    return _layer_norm_np(x, eps)


def gelu(x):
    """Tanh-approximated GELU. numpy on both backends: its vectorized tanh beat a numba loop."""
    return _gelu_np(x)


def scatter_rows(src, ids, n_rows):
    """Sum rows of ``src`` (N, E) into an (n_rows, E) table at row indices ``ids``."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    src = _rows(src)
    if _backend == "numba":
        return _scatter_rows_nb(src, ids, n_rows)
    return _scatter_rows_np(src, ids, n_rows)
