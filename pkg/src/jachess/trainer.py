"""Training loops for the base classifier and the smoothness-regularized variants."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import estimators as est
from . import regularizer as reg
from .model import Checkpoint, ModelConfig, encode_batch, forward_ids, init_model

log = logging.getLogger(__name__)

METHODS = (
    "base",
    "jacobian-train",
    "jacobian-val",
    "cross-holder-train",
    "cross-holder-val",
    "jachess-train",
    "jachess-val",
)
OPTIMIZERS = ("adam", "sgd")
VAL_SCHEDULES = ("alternate", "sequential")


class TrainError(ValueError):
    pass


@dataclass
class TrainConfig:
    method: str = "base"
    lr: float = 1e-3
    xi: float | None = None  # None: same as lr
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    max_train_instances: int = 10000
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    val_schedule: str = "alternate"
    projections: int = 1
    calibration_size: int = 64
    profile_projections: int = 16
    regularizer: reg.RegularizerConfig = field(default_factory=reg.RegularizerConfig)

    def __post_init__(self):
        if isinstance(self.regularizer, dict):
            self.regularizer = reg.RegularizerConfig.from_dict(self.regularizer)
        if self.method not in METHODS:
            raise TrainError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.optimizer not in OPTIMIZERS:
            raise TrainError(f"unknown optimizer {self.optimizer!r}")
        if self.val_schedule not in VAL_SCHEDULES:
            raise TrainError(f"unknown val_schedule {self.val_schedule!r}")
        if not self.lr > 0:
            raise TrainError("learning rate must be > 0")
        if self.xi is not None and self.xi < 0:
            raise TrainError("xi must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.max_train_instances < 1:
            raise TrainError("epochs, batch_size and max_train_instances must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise TrainError("clip_norm must be positive (or null to disable)")

    @property
    def effective_xi(self):
        return self.lr if self.xi is None else self.xi

    @property
    def family(self):
        return self.method.rsplit("-", 1)[0]

    @property
    def uses_unlabeled(self):
        return self.method.endswith("-val")

    def to_dict(self):
        d = asdict(self)
        d["regularizer"] = asdict(self.regularizer)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise TrainError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunRecord:
    method: str
    seed: int
    task: str
    loss_history: list
    omega_history: list
    checkpoint: Checkpoint
    wall_time: float = 0.0
    clip_events: int = 0
    profile: reg.SmoothnessProfile | None = None
    lambdas: list | None = None

    def to_dict(self):
        """JSON-ready summary. Wall time is left out so records stay reproducible."""
        return {
            "method": self.method,
            "seed": self.seed,
            "task": self.task,
            "loss_history": [float(v) for v in self.loss_history],
            "omega_history": [float(v) for v in self.omega_history],
            "clip_events": self.clip_events,
            "profile": None if self.profile is None else self.profile.to_dict(),
            "lambdas": self.lambdas,
            "step": self.checkpoint.step,
        }


# ------------------------------------------------------------------ baselines


def _is_regression(trace):
    return hasattr(trace, "probs") and trace.probs is None


def _logit_jacobian_sq(trace, sampler, p):
    B = trace.x.shape[0]
    total = None
    for _ in range(p):
        v = sampler.draw(trace.logits.shape)
        g = ad.vjp(trace.logits, v, trace.x, create_graph=True)
        t = ad.scale(ad.dot(g, g), 1.0 / (B * p))
        total = t if total is None else total + t
    return total


def jacobian_penalty(trace, xi, sampler=None, p=1):
    """xi times an estimate of the batch-mean ||d logits / dx||_F^2."""
    if _is_regression(trace):
        raise TrainError("jacobian_penalty needs a classification head")
    if xi == 0:
        return ad.Tensor(0.0)
    sampler = sampler or est.ProjectionSampler()
    return ad.scale(_logit_jacobian_sq(trace, sampler, p), xi)


def cross_holder_penalty(trace, xi, sampler=None, p=1):
    """xi times (logit Jacobian norm + sum over classes c of the Hessian norm of logit c)."""
    if _is_regression(trace):
        raise TrainError("cross_holder_penalty needs a classification head")
    if xi == 0:
        return ad.Tensor(0.0)
    if not trace.graph.second_order:
        raise ad.SecondOrderError("cross_holder_penalty needs a second-order trace")
    sampler = sampler or est.ProjectionSampler()
    B = trace.x.shape[0]
    mask = est.input_mask(trace)
    total = _logit_jacobian_sq(trace, sampler, p)
    for c in range(trace.logits.shape[1]):
        g = ad.grad(ad.sum_(ad.getitem(trace.logits, (slice(None), c))), [trace.x],
                    create_graph=True, allow_unused=True)[0]
        for _ in range(p):
            u = sampler.draw(trace.x.shape, mask=mask)
            h = ad.grad(ad.dot(g, u), [trace.x], create_graph=True, allow_unused=True)[0]
            total = total + ad.scale(ad.dot(h, h), 1.0 / (B * p))
    return ad.scale(total, xi)


# ------------------------------------------------------------------ optimizers


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[name] = params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for name, g in grads.items():
            params[name] = params[name] - self.lr * g


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.lr)
    return Adam(config.lr, config.beta1, config.beta2, config.eps)


def clip_gradients(grads, max_norm):
    """Rescale in place to global norm ``max_norm``; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


# ------------------------------------------------------------------ training


class _Run:
    """Mutable state of one training run."""

    def __init__(self, config: TrainConfig, checkpoint: Checkpoint, reg_config, sampler):
        self.config = config
        self.ckpt = checkpoint
        self.reg_config = reg_config
        self.sampler = sampler
        self.clip_events = 0
        self.names = list(checkpoint.params)

    def penalty(self, trace):
        c = self.config
        if c.family == "jachess":
            return reg.omega_from_trace(trace, self.reg_config, self.sampler)
        if c.family == "jacobian":
            return jacobian_penalty(trace, c.effective_xi, self.sampler, c.projections)
        return cross_holder_penalty(trace, c.effective_xi, self.sampler, c.projections)

    def step(self, seqs, y, optimizer, with_task, with_penalty):
        ids, lengths = encode_batch(seqs, self.ckpt.config)
        trace = forward_ids(self.ckpt, ids, lengths, train=True, second_order=with_penalty)
        loss = None
        task_val = omega_val = 0.0
        if with_task:
            if self.ckpt.config.regression:
                loss = ad.mse(ad.reshape(trace.logits, (-1,)), np.asarray(y, dtype=np.float64))
            else:
                loss = ad.cross_entropy(trace.logits, np.asarray(y, dtype=np.int64))
            task_val = loss.item()
        if with_penalty:
            om = self.penalty(trace)
            omega_val = om.item()
            if om.requires_grad:
                loss = om if loss is None else loss + om
        if loss is None or not loss.requires_grad:
            return task_val, omega_val
        leaves = [trace.params[n] for n in self.names]
        gs = ad.grad(loss, leaves, allow_unused=True)
        grads = {n: g.data.copy() for n, g in zip(self.names, gs)}
        norm = clip_gradients(grads, self.config.clip_norm)
        if self.config.clip_norm is not None and norm > self.config.clip_norm:
            self.clip_events += 1
            log.debug("clipped gradient norm %.4g -> %.4g at step %d", norm,
                      self.config.clip_norm, self.ckpt.step)
        params = dict(self.ckpt.params)
        optimizer.step(params, grads)
        self.ckpt = Checkpoint(self.ckpt.config, params, self.ckpt.step + 1)
        return task_val, omega_val

    def epoch(self, examples, rng, optimizer, with_task, with_penalty):
        order = rng.permutation(len(examples))
        bs = self.config.batch_size
        tl, ol, n = 0.0, 0.0, 0
        for i in range(0, len(order), bs):
            batch = [examples[j] for j in order[i:i + bs]]
            seqs = [ex.tokens() for ex in batch]
            y = [ex.target for ex in batch] if with_task else None
            t, o = self.step(seqs, y, optimizer, with_task, with_penalty)
            tl += t * len(batch)
            ol += o * len(batch)
            n += len(batch)
        return tl / n, ol / n


def _resolve_regularizer(config, checkpoint, calibration):
    """Allocate the lambda factors from the initial checkpoint's smoothness profile."""
    rc = config.regularizer
    xi = config.effective_xi
    if rc.lambdas is not None:
        return rc, None
    K = checkpoint.config.num_layers
    if xi == 0:
        return rc.with_lambdas([0.0] * K), None
    profile = reg.profile_smoothness(checkpoint, calibration, p=config.profile_projections,
                                     seed=config.seed, calibration_id="initial")
    lam = reg.allocate_lambdas(profile, xi, rc.strategy)
    return rc.with_lambdas(lam), profile


def train(config: TrainConfig, labeled, unlabeled=None, model_config: ModelConfig | None = None,
          task="", checkpoint: Checkpoint | None = None) -> RunRecord:
    """Train one model. The model is initialized from ``config.seed`` unless a checkpoint is given."""
    if not labeled:
        raise TrainError("labeled data is empty")
    if config.uses_unlabeled and not unlabeled:
        raise TrainError(f"method {config.method!r} needs unlabeled data")
    model_config = model_config or ModelConfig()
    if checkpoint is None:
        checkpoint = init_model(replace(model_config, seed=config.seed))
    regression = checkpoint.config.regression
    if config.family in ("jacobian", "cross-holder") and regression:
        raise TrainError(f"{config.method} needs a classification head")
    start = time.perf_counter()

    streams = np.random.SeedSequence([config.seed, 0x7121]).spawn(3)
    order_rng = np.random.default_rng(streams[0])
    val_rng = np.random.default_rng(streams[1])
    sampler = est.ProjectionSampler(seed=int(streams[2].generate_state(1)[0]),
                                    mode=config.regularizer.mode)

    labeled = list(labeled)[:config.max_train_instances]
    unlabeled = list(unlabeled or [])
    reg_config, profile = config.regularizer, None
    if config.method != "base" and config.family == "jachess":
        calib = unlabeled if config.uses_unlabeled else labeled
        reg_config, profile = _resolve_regularizer(
            config, checkpoint, [ex.tokens() for ex in calib[:config.calibration_size]])

    run = _Run(config, checkpoint, reg_config, sampler)
    task_opt = make_optimizer(config)
    # TODO: Adam normalizes away xi in the penalty-only phase; try an xi-scaled SGD step there
    omega_opt = make_optimizer(config)
    penalty_on = config.method != "base" and config.effective_xi > 0
    loss_hist, omega_hist = [], []

    if config.method == "base" or not config.uses_unlabeled:
        for _ in range(config.epochs):
            t, o = run.epoch(labeled, order_rng, task_opt, True, penalty_on)
            loss_hist.append(t)
            omega_hist.append(o)
    elif config.val_schedule == "alternate":
        for _ in range(config.epochs):
            t, _o = run.epoch(labeled, order_rng, task_opt, True, False)
            o = run.epoch(unlabeled, val_rng, omega_opt, False, True)[1] if penalty_on else 0.0
            loss_hist.append(t)
            omega_hist.append(o)
    else:
        for _ in range(config.epochs):
            loss_hist.append(run.epoch(labeled, order_rng, task_opt, True, False)[0])
        for _ in range(config.epochs):
            o = run.epoch(unlabeled, val_rng, omega_opt, False, True)[1] if penalty_on else 0.0
            omega_hist.append(o)

    lambdas = None if reg_config.lambdas is None else [float(v) for v in reg_config.lambdas]
    return RunRecord(config.method, config.seed, task, loss_hist, omega_hist, run.ckpt,
                     time.perf_counter() - start, run.clip_events, profile, lambdas)


def _suite_cell(args):
    method, seed, task, config, splits, model_config = args
    cfg = replace(config, method=method, seed=seed)
    return train(cfg, splits.train, splits.unlabeled, model_config, task=task)


def run_suite(methods, seeds, tasks, config: TrainConfig | None = None,
              model_config: ModelConfig | None = None, workers=1):
    """Cross product of methods x seeds x tasks.

    ``tasks`` maps a task name to ``(model_config_or_None, SplitSet)``; a per-task
    model config overrides ``model_config`` (for the head size).
    """
    seeds = list(seeds)
    if not seeds:
        raise TrainError("run_suite needs at least one seed")
    config = config or TrainConfig()
    cells = []
    for name, (task_model, splits) in tasks.items():
        mc = task_model or model_config or ModelConfig()
        for method in methods:
            for seed in seeds:
                cells.append((method, seed, name, config, splits, mc))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_suite_cell, cells))
    return [_suite_cell(c) for c in cells]


def layer_jacobian_norms(checkpoint, sequences, p=16, seed=0):
    """Per-layer Frobenius norms of the last-token Jacobians (batch-mean estimate)."""
    return reg.profile_smoothness(checkpoint, sequences, p=p, seed=seed).j
