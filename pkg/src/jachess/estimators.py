"""Hutchinson-style estimates of Jacobian and Hessian Frobenius norms.

Everything here works on a forward trace: an object exposing a differentiable
input ``x`` (instance axis first), per-layer outputs ``layers`` (each
``(B, m)``) and the ``graph`` they live on. :func:`function_trace` wraps an
arbitrary differentiable function in the same shape for testing.

The exact oracles assemble full matrices row by row and are meant for tiny
problems only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

GAUSSIAN = "gaussian-raw"
SPHERE = "normalized-sphere"
MODES = (GAUSSIAN, SPHERE)

MAX_JACOBIAN_ENTRIES = 65536
MAX_HESSIAN_DIM = 256


class OracleSizeError(ValueError):
    pass


class ProjectionSampler:
    """Counter-based (Philox) stream of projection vectors.

    ``gaussian-raw`` draws i.i.d. standard normals. ``normalized-sphere``
    rescales each instance's vector to unit norm over its unmasked
    coordinates; with ``corrected`` the vector is scaled back up by
    ``sqrt(n)`` so that E[v v^T] = I again.
    """

    def __init__(self, seed=0, mode=GAUSSIAN, dimension=None, stream=0):
        if mode not in MODES:
            raise ValueError(f"unknown projection mode {mode!r}; expected one of {MODES}")
        self.seed = seed
        self.mode = mode
        self.dimension = dimension
        self.stream = stream
        self.rng = np.random.Generator(np.random.Philox(key=[seed, stream]))

    def draw(self, shape, mask=None, corrected=False):
        """Draw vectors of ``shape``; axis 0 indexes independent instances.

        An int ``shape`` means ``(shape, dimension)``. ``mask`` (broadcastable to
        ``shape``) zeroes coordinates that are not part of the input space.
        """
        if isinstance(shape, (int, np.integer)):
            if self.dimension is None:
                raise ValueError("sampler has no fixed dimension; pass a full shape")
            shape = (int(shape), self.dimension)
        v = self.rng.standard_normal(shape)
        if mask is not None:
            v = v * mask
        if self.mode == SPHERE:
            axes = tuple(range(1, len(shape)))
            norm = np.sqrt((v * v).sum(axis=axes, keepdims=True))
            v = v / norm
            if corrected:
                n = np.full(norm.shape, float(np.prod(shape[1:])))
                if mask is not None:
                    n = np.broadcast_to(mask, shape).sum(axis=axes, keepdims=True).astype(float)
                v = v * np.sqrt(n)
        return v

    def signs(self, shape):
        return self.rng.choice(np.array([-1.0, 1.0]), size=shape)

    def choice(self, m, count):
        return np.sort(self.rng.choice(m, size=count, replace=False))


@dataclass
class NormEstimate:
    value: float
    projections: int
    mode: str
    corrected: bool

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("squared-norm estimate cannot be negative")


class FunctionTrace:
    """Trace-compatible wrapper around ``fn(x) -> list of outputs`` for a single input vector."""

    def __init__(self, fn, x0, second_order=True):
        self.graph = ad.Graph(second_order=second_order)
        x0 = np.asarray(x0, dtype=np.float64)
        self.x = self.graph.leaf(x0.reshape(1, -1))
        outs = fn(self.x)
        if isinstance(outs, ad.Tensor):
            outs = [outs]
        self.layers = [o if o.ndim == 2 else ad.reshape(o, (1, -1)) for o in outs]
        self.lengths = None
        self.logits = self.layers[-1]


def function_trace(fn, x0, second_order=True):
    return FunctionTrace(fn, x0, second_order)


# ------------------------------------------------------------------ helpers


def input_mask(trace):
    """1 where an input coordinate belongs to a real token, 0 on padding; shape of ``x``."""
    x = trace.x
    lengths = getattr(trace, "lengths", None)
    if lengths is None or x.ndim != 3:
        return np.ones(x.shape)
    T = x.shape[1]
    real = (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)
    return np.broadcast_to(real[:, :, None], x.shape)


def _layer_output(trace, layer):
    if layer == "logits":
        if trace.logits is None:
            raise ValueError("trace has no logits")
        return trace.logits
    K = len(trace.layers)
    if not isinstance(layer, (int, np.integer)) or not 1 <= layer <= K:
        raise IndexError(f"layer index {layer} outside [1, {K}]")
    return trace.layers[layer - 1]


def _per_instance_sq(t):
    a = t.data
    return (a * a).reshape(a.shape[0], -1).sum(axis=1)


def _require_second_order(trace):
    if not trace.graph.second_order:
        raise ad.SecondOrderError(
            "Hessian estimation differentiates a gradient, so the forward trace must be "
            "built on a second-order graph (forward(..., second_order=True))"
        )


# ------------------------------------------------------------------ estimators


def trace_estimate(A, sampler, p):
    """(1/p) sum_i v_i^T A v_i for ``A`` given as a square array or a matvec callable."""
    if p < 1:
        raise ValueError("need at least one projection (p >= 1)")
    if callable(A):
        total = 0.0
        for _ in range(p):
            v = np.asarray(sampler.draw(1)).reshape(-1)
            total += float(v @ np.asarray(A(v)))
        return total / p
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"trace_estimate needs a square operator, got shape {A.shape}")
    V = np.asarray(sampler.draw(p)).reshape(p, A.shape[0])
    return float(np.einsum("pi,ij,pj->", V, A, V) / p)


def jacobian_frob_sq(trace, layer, sampler=None, p=1, correct=True) -> NormEstimate:
    """Estimate ||dz/dx||_F^2 averaged over the trace's instances with ``p`` vjp calls."""
    if p < 1:
        raise ValueError("need at least one projection (p >= 1)")
    sampler = sampler or ProjectionSampler()
    z = _layer_output(trace, layer)
    total = np.zeros(z.shape[0])
    for _ in range(p):
        v = sampler.draw(z.shape, corrected=correct)
        total += _per_instance_sq(ad.vjp(z, v, trace.x))
    corrected = sampler.mode == GAUSSIAN or correct
    return NormEstimate(float(total.mean() / p), p, sampler.mode, corrected)


def hessian_frob_sq(trace, layer, dim, sampler=None, p=1, correct=True) -> NormEstimate:
    """Estimate ||d^2 z_dim / dx^2||_F^2 averaged over instances with ``p`` Hessian-vector products."""
    if p < 1:
        raise ValueError("need at least one projection (p >= 1)")
    _require_second_order(trace)
    sampler = sampler or ProjectionSampler()
    z = _layer_output(trace, layer)
    if not 0 <= dim < z.shape[1]:
        raise IndexError(f"output dimension {dim} outside layer width {z.shape[1]}")
    g = ad.grad(ad.sum_(ad.getitem(z, (slice(None), dim))), [trace.x], create_graph=True)[0]
    mask = input_mask(trace)
    total = np.zeros(z.shape[0])
    for _ in range(p):
        u = sampler.draw(g.shape, mask=mask, corrected=correct)
        total += _per_instance_sq(ad.grad(ad.dot(g, u), [trace.x], allow_unused=True)[0])
    corrected = sampler.mode == GAUSSIAN or correct
    return NormEstimate(float(total.mean() / p), p, sampler.mode, corrected)


# ------------------------------------------------------------------ exact oracles


def _instance_columns(trace, instance):
    x = trace.x
    lengths = getattr(trace, "lengths", None)
    if x.ndim == 3 and lengths is not None:
        return (instance, slice(0, int(lengths[instance])))
    return (instance,)


def exact_jacobian(trace, layer, instance=0):
    """Full (m x n) Jacobian of one instance's layer output w.r.t. its real input coordinates."""
    z = _layer_output(trace, layer)
    cols = _instance_columns(trace, instance)
    n = trace.x.data[cols].size
    m = z.shape[1]
    if m * n > MAX_JACOBIAN_ENTRIES:
        raise OracleSizeError(f"exact Jacobian would have {m}x{n} entries (> {MAX_JACOBIAN_ENTRIES})")
    J = np.empty((m, n))
    for i in range(m):
        g = ad.grad(ad.getitem(z, (instance, i)), [trace.x])[0]
        J[i] = g.data[cols].reshape(-1)
    return J


def exact_hessian(trace, layer, dim, instance=0):
    """Full (n x n) Hessian of scalar output ``dim`` of one instance w.r.t. its real inputs."""
    _require_second_order(trace)
    z = _layer_output(trace, layer)
    cols = _instance_columns(trace, instance)
    block = trace.x.data[cols]
    n = block.size
    if n > MAX_HESSIAN_DIM:
        raise OracleSizeError(f"exact Hessian needs n={n} <= {MAX_HESSIAN_DIM}")
    g = ad.grad(ad.getitem(z, (instance, dim)), [trace.x], create_graph=True)[0]
    g_flat = ad.reshape(ad.getitem(g, cols), (n,))
    H = np.empty((n, n))
    for j in range(n):
        row = ad.grad(ad.getitem(g_flat, j), [trace.x], allow_unused=True)[0]
        H[j] = row.data[cols].reshape(-1)
    return H


def spectral_norm(A, iters=500, seed=0):
    """Largest singular value by power iteration on A^T A."""
    A = np.asarray(A, dtype=np.float64)
    v = np.random.default_rng(seed).standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        w = A.T @ (A @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        sigma = np.sqrt(nw)
    return float(sigma)
