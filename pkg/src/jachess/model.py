"""Tiny pre-LN decoder transformer with differentiable input embeddings.

The trace of a forward pass keeps the gathered token embeddings ``x`` on the
tape, plus the last non-pad token's residual-stream vector after each block.
Those per-layer vectors are what the smoothness estimators differentiate.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

PAD = 0
EOS = 1
NUM_SPECIAL = 2

CHECKPOINT_MAGIC = b"JACHESS\x00"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    embed_dim: int = 32
    num_layers: int = 4
    num_heads: int = 4
    ff_dim: int = 64
    max_seq_len: int = 32
    num_classes: int = 2  # 0 selects the scalar regression head
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "num_layers", "num_heads", "ff_dim", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim={self.embed_dim} is not divisible by num_heads={self.num_heads}"
            )
        if self.vocab_size <= NUM_SPECIAL:
            raise ConfigError(f"vocab_size must exceed the {NUM_SPECIAL} special tokens")
        if self.num_classes == 1 or self.num_classes < 0:
            raise ConfigError("num_classes must be 0 (regression) or >= 2")

    @property
    def regression(self):
        return self.num_classes == 0

    @property
    def head_dim(self):
        return 1 if self.regression else self.num_classes

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0

    def copy(self):
        return Checkpoint(self.config, {k: v.copy() for k, v in self.params.items()}, self.step)


@dataclass
class ForwardTrace:
    x: ad.Tensor
    layers: list[ad.Tensor]
    logits: ad.Tensor | None
    probs: ad.Tensor | None
    graph: ad.Graph
    params: dict[str, ad.Tensor] = field(repr=False)
    ids: np.ndarray = field(repr=False)
    lengths: np.ndarray = field(repr=False)

    @property
    def batch_size(self):
        return self.ids.shape[0]


def _layer_names(k):
    p = f"h{k}."
    return [p + n for n in
            ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")]


def init_model(config: ModelConfig) -> Checkpoint:
    """Seeded scaled-normal initialization; output projections shrink with depth."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5EED]))
    E, F, K = config.embed_dim, config.ff_dim, config.num_layers
    resid = 1.0 / np.sqrt(2.0 * K)

    def normal(shape, std):
        return rng.standard_normal(shape) * std

    p = {
        "tok_emb": normal((config.vocab_size, E), 1.0),
        "pos_emb": normal((config.max_seq_len, E), 0.5),
    }
    for k in range(K):
        pre = f"h{k}."
        p[pre + "ln1_g"] = np.ones(E)
        p[pre + "ln1_b"] = np.zeros(E)
        for w in ("wq", "wk", "wv"):
            p[pre + w] = normal((E, E), 1.0 / np.sqrt(E))
        p[pre + "wo"] = normal((E, E), resid / np.sqrt(E))
        p[pre + "bo"] = np.zeros(E)
        p[pre + "ln2_g"] = np.ones(E)
        p[pre + "ln2_b"] = np.zeros(E)
        p[pre + "w1"] = normal((E, F), 1.0 / np.sqrt(E))
        p[pre + "b1"] = np.zeros(F)
        p[pre + "w2"] = normal((F, E), resid / np.sqrt(F))
        p[pre + "b2"] = np.zeros(E)
    p["lnf_g"] = np.ones(E)
    p["lnf_b"] = np.zeros(E)
    p["head_w"] = normal((E, config.head_dim), 1.0 / np.sqrt(E))
    p["head_b"] = np.zeros(config.head_dim)
    return Checkpoint(config, p, 0)


def param_names(config: ModelConfig):
    names = ["tok_emb", "pos_emb"]
    for k in range(config.num_layers):
        names += _layer_names(k)
    return names + ["lnf_g", "lnf_b", "head_w", "head_b"]


# ------------------------------------------------------------------ batching


def encode_batch(sequences, config: ModelConfig):
    """Right-pad token sequences into an (B, T) id array; returns ids and lengths."""
    if len(sequences) and isinstance(sequences[0], (int, np.integer)):
        sequences = [sequences]
    if not len(sequences):
        raise ValueError("empty batch")
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    if lengths.min() < 1:
        raise ValueError("sequences must contain at least one token")
    if lengths.max() > config.max_seq_len:
        raise ValueError(
            f"sequence length {lengths.max()} exceeds max_seq_len={config.max_seq_len}"
        )
    ids = np.full((len(sequences), int(lengths.max())), PAD, dtype=np.int64)
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = s
    bad = (ids < 0) | (ids >= config.vocab_size)
    if bad.any():
        b, t = np.argwhere(bad)[0]
        raise ValueError(
            f"token {ids[b, t]} at position {t} of sequence {b} is outside vocab_size={config.vocab_size}"
        )
    return ids, lengths


def join_pair(tokens_a, tokens_b):
    return list(tokens_a) + [EOS] + list(tokens_b)


def attention_mask(lengths, T):
    """Additive (B, 1, T, T) mask: causal and no attention to pad keys."""
    causal = np.tril(np.ones((T, T), dtype=bool))
    keys = np.arange(T)[None, :] < lengths[:, None]
    allowed = causal[None, :, :] & keys[:, None, :]
    return np.where(allowed, 0.0, -1e9)[:, None, :, :]


# ------------------------------------------------------------------ forward


def _affine_norm(h, g, b):
    return ad.layer_norm(h) * g + b


def _block(h, P, k, mask, n_heads):
    pre = f"h{k}."
    B, T, E = h.shape
    dh = E // n_heads

    a = _affine_norm(h, P[pre + "ln1_g"], P[pre + "ln1_b"])

    def heads(w):
        return ad.transpose(ad.reshape(a @ P[pre + w], (B, T, n_heads, dh)), (0, 2, 1, 3))

    q, kk, v = heads("wq"), heads("wk"), heads("wv")
    scores = ad.scale(q @ ad.swap_last(kk), 1.0 / np.sqrt(dh)) + mask
    att = ad.softmax(scores) @ v
    att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, T, E))
    h = h + (att @ P[pre + "wo"] + P[pre + "bo"])

    m = _affine_norm(h, P[pre + "ln2_g"], P[pre + "ln2_b"])
    m = ad.gelu(m @ P[pre + "w1"] + P[pre + "b1"])
    return h + (m @ P[pre + "w2"] + P[pre + "b2"])


def forward_ids(checkpoint: Checkpoint, ids, lengths, *, graph=None, params=None,
                embeddings=None, upto=None, second_order=False, train=False) -> ForwardTrace:
    """Forward pass on an already padded id batch.

    ``train`` puts the parameters on the tape (so the loss can reach them) and
    makes ``x`` an intermediate node gathered from the embedding table; otherwise
    ``x`` is itself a leaf. ``embeddings`` overrides the gathered embeddings
    (used for perturbation). ``upto`` stops after that many blocks and skips the head.
    """
    cfg = checkpoint.config
    K = cfg.num_layers if upto is None else upto
    if not 1 <= K <= cfg.num_layers:
        raise ValueError(f"upto must be in [1, {cfg.num_layers}], got {upto}")
    if graph is None:
        graph = ad.Graph(second_order=second_order)
    if params is None:
        if train:
            params = {k: graph.leaf(v) for k, v in checkpoint.params.items()}
        else:
            params = {k: ad.Tensor(v) for k, v in checkpoint.params.items()}

    B, T = ids.shape
    if embeddings is not None:
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.shape != (B, T, cfg.embed_dim):
            raise ad.ShapeError(f"embeddings shape {emb.shape} != {(B, T, cfg.embed_dim)}")
        x = graph.leaf(emb)
    elif train:
        x = ad.take_rows(params["tok_emb"], ids)
    else:
        x = graph.leaf(checkpoint.params["tok_emb"][ids])

    mask = attention_mask(lengths, T)
    last = (np.arange(B), lengths - 1)
    h = x + ad.getitem(params["pos_emb"], slice(0, T))
    layers = []
    for k in range(K):
        h = _block(h, params, k, mask, cfg.num_heads)
        layers.append(ad.getitem(h, last))

    logits = probs = None
    if K == cfg.num_layers:
        zf = _affine_norm(layers[-1], params["lnf_g"], params["lnf_b"])
        logits = zf @ params["head_w"] + params["head_b"]
        if not cfg.regression:
            probs = ad.softmax(logits)
    return ForwardTrace(x, layers, logits, probs, graph, params, ids, lengths)


def forward(checkpoint: Checkpoint, tokens, **kwargs) -> ForwardTrace:
    """Forward on one token sequence or a list of sequences."""
    ids, lengths = encode_batch(tokens, checkpoint.config)
    return forward_ids(checkpoint, ids, lengths, **kwargs)


def pair_forward(checkpoint: Checkpoint, tokens_a, tokens_b, **kwargs) -> ForwardTrace:
    joined = join_pair(tokens_a, tokens_b)
    if len(joined) > checkpoint.config.max_seq_len:
        raise ValueError(
            f"pair length {len(joined)} (with separator) exceeds max_seq_len="
            f"{checkpoint.config.max_seq_len}"
        )
    return forward(checkpoint, joined, **kwargs)


def predict(checkpoint: Checkpoint, sequences, batch_size=256, embeddings=None):
    """Logits for many sequences without building gradients; embeddings optional per batch."""
    out = []
    for i in range(0, len(sequences), batch_size):
        ids, lengths = encode_batch(sequences[i:i + batch_size], checkpoint.config)
        emb = None if embeddings is None else embeddings[i:i + batch_size]
        tr = forward_ids(checkpoint, ids, lengths, embeddings=emb)
        out.append(tr.logits.data)
    return np.concatenate(out, axis=0)


# ------------------------------------------------------------------ checkpoint IO
#
# Layout (little-endian):
#   8 bytes   magic b"JACHESS\0"
#   4 bytes   uint32 header length H
#   H bytes   UTF-8 JSON: {"version", "config", "step", "blocks": [{"name", "shape", "offset"}]}
#   ...       float64 parameter blocks, offsets relative to the end of the header


def save_checkpoint(checkpoint: Checkpoint, path):
    blocks, offset = [], 0
    names = param_names(checkpoint.config)
    for name in names:
        arr = checkpoint.params[name]
        blocks.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "config": asdict(checkpoint.config),
         "step": checkpoint.step, "blocks": blocks},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for name in names:
            fh.write(np.ascontiguousarray(checkpoint.params[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['version']}")
    body = memoryview(raw)[12 + hlen:]
    params = {}
    for blk in header["blocks"]:
        n = int(np.prod(blk["shape"])) if blk["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=blk["offset"])
        params[blk["name"]] = arr.reshape(blk["shape"]).astype(np.float64)
    return Checkpoint(ModelConfig.from_dict(header["config"]), params, header["step"])
