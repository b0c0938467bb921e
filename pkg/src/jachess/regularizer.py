"""Layer-wise Jacobian/Hessian smoothness penalty and its lambda allocation.

The penalty for a trace is

    sum_k  lam_J[k] * ||J_k||_F^2  +  lam_H[k] * sum_{d in D_k} ||H_{k,d}||_F^2

with J_k the Jacobian of layer k's last-token vector w.r.t. the input
embeddings, H_{k,d} the Hessian of its output coordinate d, and D_k a random
subset of coordinates drawn once per batch.

Two estimators are provided:

``pooled`` (default)
    One randomized projection for the whole sum. The layer terms are folded
    into a single vjp with independent vectors per layer, and the Hessian
    terms into a single Hessian-vector product with Rademacher signs over the
    sampled coordinates. Cross terms vanish in expectation, so the estimate
    (and its parameter gradient) is unbiased for the sum above at the cost of
    one forward and three taped backward passes.
``per-term``
    Every norm gets its own projections. Slower; needed for the square-root
    (unsquared norm) variant.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import estimators as est
from .model import encode_batch, forward_ids

STRATEGIES = (
    "penultimate-only",
    "uniform",
    "inverse-base-smoothness",
    "normalized-base-smoothness",
    "softmax-base-smoothness",
)
ESTIMATORS = ("pooled", "per-term")


class RegularizerError(ValueError):
    pass


@dataclass
class SmoothnessProfile:
    j: np.ndarray
    calibration_id: str = ""
    projections: int = 0

    def __post_init__(self):
        self.j = np.asarray(self.j, dtype=np.float64)
        if self.j.ndim != 1 or (self.j < 0).any():
            raise RegularizerError("profile entries must be a non-negative vector")

    def to_dict(self):
        return {"j": self.j.tolist(), "calibration_id": self.calibration_id,
                "projections": self.projections}


@dataclass
class RegularizerConfig:
    xi: float = 3e-4
    projections: int = 1
    hessian_dims: int = 10
    strategy: str = "softmax-base-smoothness"
    lambdas: list | None = None
    lambdas_hessian: list | None = None
    tie_lambdas: bool = True
    sqrt_norms: bool = False
    estimator: str = "pooled"
    mode: str = est.GAUSSIAN

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise RegularizerError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.estimator not in ESTIMATORS:
            raise RegularizerError(f"unknown estimator {self.estimator!r}")
        if self.mode not in est.MODES:
            raise RegularizerError(f"unknown projection mode {self.mode!r}")
        if self.xi < 0:
            raise RegularizerError("xi must be >= 0")
        if self.projections < 1:
            raise RegularizerError("projections must be >= 1")
        if self.hessian_dims < 0:
            raise RegularizerError("hessian_dims must be >= 0")
        if self.sqrt_norms and self.estimator == "pooled":
            raise RegularizerError("sqrt_norms needs estimator='per-term' (pooling only sums squared norms)")
        for lam in (self.lambdas, self.lambdas_hessian):
            if lam is not None and any(v < 0 for v in lam):
                raise RegularizerError("lambda factors must be non-negative")
        if self.tie_lambdas and self.lambdas_hessian is not None:
            if list(self.lambdas_hessian) != list(self.lambdas or []):
                raise RegularizerError("tie_lambdas is set but lambdas_hessian differs from lambdas")

    def with_lambdas(self, lambdas):
        d = asdict(self)
        d["lambdas"] = [float(v) for v in lambdas]
        if self.tie_lambdas:
            d["lambdas_hessian"] = None
        return RegularizerConfig(**d)

    def layer_factors(self):
        lam_j = np.asarray(self.lambdas, dtype=np.float64)
        lam_h = lam_j if self.tie_lambdas or self.lambdas_hessian is None else np.asarray(
            self.lambdas_hessian, dtype=np.float64)
        return lam_j, lam_h

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise RegularizerError(f"unknown regularizer keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DimSample:
    layer: int
    dims: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    draw_id: int = 0


# ------------------------------------------------------------------ profile & lambdas


def profile_smoothness(checkpoint, batch, p=16, seed=0, calibration_id="") -> SmoothnessProfile:
    """Per-layer Jacobian Frobenius norms: sqrt of the batch-mean squared estimate."""
    if not len(batch):
        raise RegularizerError("calibration batch is empty")
    ids, lengths = encode_batch(list(batch), checkpoint.config)
    trace = forward_ids(checkpoint, ids, lengths)
    sampler = est.ProjectionSampler(seed=seed, stream=11)
    j = [np.sqrt(est.jacobian_frob_sq(trace, k, sampler, p).value)
         for k in range(1, len(trace.layers) + 1)]
    return SmoothnessProfile(np.array(j), calibration_id, p)


def allocate_lambdas(profile, xi, strategy="softmax-base-smoothness"):
    j = np.asarray(profile.j if isinstance(profile, SmoothnessProfile) else profile, dtype=np.float64)
    if xi <= 0:
        raise RegularizerError("xi must be > 0")
    K = j.size
    if strategy == "softmax-base-smoothness":
        e = np.exp(-(j - j.min()))
        return xi * e / e.sum()
    if strategy == "uniform":
        return np.full(K, xi / K)
    if strategy == "penultimate-only":
        lam = np.zeros(K)
        lam[-1] = xi
        return lam
    if strategy == "normalized-base-smoothness":
        if (j == 0).any():
            raise RegularizerError("normalized-base-smoothness divides by the layer norms; got a zero entry")
        s = 1.0 / j
        return xi * s / s.sum()
    if strategy == "inverse-base-smoothness":
        total = j.sum()
        if total == 0:
            raise RegularizerError("inverse-base-smoothness needs a non-zero profile")
        return xi * j / total
    raise RegularizerError(f"unknown strategy {strategy!r}")


def sample_dims(width, count, rng, layer=0, draw_id=0) -> DimSample:
    """Uniform sample of ``count`` distinct output coordinates out of ``width``."""
    if count > width:
        raise RegularizerError(f"cannot sample {count} dimensions from a layer of width {width}")
    if count < 0:
        raise RegularizerError("dimension count must be >= 0")
    if isinstance(rng, est.ProjectionSampler):
        dims = rng.choice(width, count)
    else:
        dims = np.sort(rng.choice(width, size=count, replace=False))
    return DimSample(layer, np.asarray(dims, dtype=np.int64), draw_id)


# ------------------------------------------------------------------ omega


def _targets(trace, config):
    """(output tensor, layer slot) pairs the penalty acts on.

    The penultimate-only strategy regularizes the classifier logits, which is
    what the logits-level baselines act on; every other strategy uses the
    per-layer last-token vectors.
    """
    if config.strategy == "penultimate-only":
        return [(trace.logits, len(trace.layers) - 1)]
    return [(z, k) for k, z in enumerate(trace.layers)]


def draw_dim_samples(trace, config, sampler, draw_id=0):
    """One DimSample per regularized output; the count is clamped to the output width."""
    out = []
    for z, k in _targets(trace, config):
        count = min(config.hessian_dims, z.shape[1])
        out.append(sample_dims(z.shape[1], count, sampler, layer=k + 1, draw_id=draw_id))
    return out


def _onehot_signs(shape_bm, dims, signs):
    e = np.zeros(shape_bm)
    if len(dims):
        e[:, dims] = signs
    return e


def _pooled(trace, config, lam_j, lam_h, dim_samples, sampler):
    B = trace.x.shape[0]
    mask = est.input_mask(trace)
    correct = config.mode == est.SPHERE
    targets = _targets(trace, config)

    total = None
    jac_terms = [(z, np.sqrt(lam_j[k])) for z, k in targets if lam_j[k] > 0]
    if jac_terms:
        s = None
        for z, w in jac_terms:
            v = sampler.draw(z.shape, corrected=correct) * w
            term = ad.dot(z, v)
            s = term if s is None else s + term
        gj = ad.grad(s, [trace.x], create_graph=True, allow_unused=True)[0]
        total = ad.scale(ad.dot(gj, gj), 1.0 / B)

    hess_terms = [(z, np.sqrt(lam_h[k]), ds) for (z, k), ds in zip(targets, dim_samples)
                  if lam_h[k] > 0 and len(ds.dims)]
    if hess_terms:
        s = None
        for z, w, ds in hess_terms:
            eps = _onehot_signs(z.shape, ds.dims, sampler.signs((z.shape[0], len(ds.dims))) * w)
            term = ad.dot(z, eps)
            s = term if s is None else s + term
        gh = ad.grad(s, [trace.x], create_graph=True, allow_unused=True)[0]
        u = sampler.draw(trace.x.shape, mask=mask, corrected=correct)
        w_hvp = ad.grad(ad.dot(gh, u), [trace.x], create_graph=True, allow_unused=True)[0]
        h = ad.scale(ad.dot(w_hvp, w_hvp), 1.0 / B)
        total = h if total is None else total + h
    return total


def _per_instance_norm(t, B, sqrt_norms):
    sq = ad.sum_(ad.reshape(ad.mul(t, t), (B, -1)), axis=1)
    if sqrt_norms:
        return ad.mean(ad.sqrt(ad.add(sq, 1e-12)))
    return ad.mean(sq)


def _per_term(trace, config, lam_j, lam_h, dim_samples, sampler):
    B = trace.x.shape[0]
    mask = est.input_mask(trace)
    correct = config.mode == est.SPHERE
    p = config.projections
    total = None

    def acc(t, w):
        nonlocal total
        t = ad.scale(t, w)
        total = t if total is None else total + t

    for (z, k), ds in zip(_targets(trace, config), dim_samples):
        if lam_j[k] > 0:
            for _ in range(p):
                v = sampler.draw(z.shape, corrected=correct)
                g = ad.vjp(z, v, trace.x, create_graph=True)
                acc(_per_instance_norm(g, B, config.sqrt_norms), lam_j[k] / p)
        if lam_h[k] > 0:
            for d in ds.dims:
                g = ad.grad(ad.sum_(ad.getitem(z, (slice(None), int(d)))), [trace.x],
                            create_graph=True, allow_unused=True)[0]
                for _ in range(p):
                    u = sampler.draw(trace.x.shape, mask=mask, corrected=correct)
                    h = ad.grad(ad.dot(g, u), [trace.x], create_graph=True, allow_unused=True)[0]
                    acc(_per_instance_norm(h, B, config.sqrt_norms), lam_h[k] / p)
    return total


def omega_from_trace(trace, config: RegularizerConfig, sampler, dim_samples=None):
    """Differentiable penalty for an existing second-order trace.

    ``config.lambdas`` must already be allocated. Returns a scalar Tensor
    (a constant zero when every factor is zero).
    """
    if config.lambdas is None:
        raise RegularizerError("lambdas are not allocated; call allocate_lambdas / with_lambdas first")
    lam_j, lam_h = config.layer_factors()
    if lam_j.size != len(trace.layers):
        raise RegularizerError(f"{lam_j.size} lambda factors for {len(trace.layers)} layers")
    if not (lam_j > 0).any() and not (lam_h > 0).any():
        return ad.Tensor(0.0)
    if not trace.graph.second_order:
        raise ad.SecondOrderError(
            "the penalty differentiates input gradients; build the trace with second_order=True")
    if dim_samples is None:
        dim_samples = draw_dim_samples(trace, config, sampler)
    if config.estimator == "pooled":
        total = None
        for _ in range(config.projections):
            t = _pooled(trace, config, lam_j, lam_h, dim_samples, sampler)
            if t is not None:
                total = t if total is None else total + t
        if total is None:
            return ad.Tensor(0.0)
        return ad.scale(total, 1.0 / config.projections)
    total = _per_term(trace, config, lam_j, lam_h, dim_samples, sampler)
    return ad.Tensor(0.0) if total is None else total


def omega(checkpoint, batch, config: RegularizerConfig, rng, trace=None):
    """Penalty on a batch of token sequences; parameters are on the tape so it can be trained."""
    if trace is None:
        ids, lengths = encode_batch(list(batch), checkpoint.config)
        trace = forward_ids(checkpoint, ids, lengths, train=True, second_order=True)
    sampler = rng if isinstance(rng, est.ProjectionSampler) else est.ProjectionSampler(
        seed=int(rng.integers(2**62)), mode=config.mode)
    return omega_from_trace(trace, config, sampler)


def exact_omega(trace, config: RegularizerConfig, dim_samples, instance=0):
    """The same weighted sum built from exact Jacobian/Hessian oracles (one instance)."""
    lam_j, lam_h = config.layer_factors()
    total = 0.0
    for (z, k), ds in zip(_targets(trace, config), dim_samples):
        layer = "logits" if config.strategy == "penultimate-only" else k + 1
        if lam_j[k] > 0:
            J = est.exact_jacobian(trace, layer, instance)
            total += lam_j[k] * (np.sqrt((J ** 2).sum()) if config.sqrt_norms else (J ** 2).sum())
        if lam_h[k] > 0:
            for d in ds.dims:
                H = est.exact_hessian(trace, layer, int(d), instance)
                total += lam_h[k] * (np.sqrt((H ** 2).sum()) if config.sqrt_norms else (H ** 2).sum())
    return float(total)
