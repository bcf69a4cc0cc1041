"""Parameter-shared dual-transformer sentence encoder.

Both languages run through one parameter set: token + learned positional
embeddings, a stack of post-norm transformer layers, and mean pooling over
non-pad positions. The generative head projects the pooled representation
through a fully-connected layer and scores the vocabulary against the
transpose of the input embedding matrix (tied softmax; there is no second
output matrix).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from duosent import tensor as T
from duosent.errors import InputError
from duosent.tensor import Tensor

DESK_PRESET = dict(n_layers=2, d_model=64, d_ff=128, n_heads=2, vocab_size=1000, max_len=64)
PAPER_PRESET = dict(n_layers=2, d_model=512, d_ff=1024, n_heads=8, vocab_size=50_000, max_len=128)


@dataclass
class EncoderConfig:
    n_layers: int = 2
    d_model: int = 64
    d_ff: int = 128
    n_heads: int = 2
    vocab_size: int = 1000
    max_len: int = 64
    dropout_p: float = 0.1
    pre_norm: bool = False
    head_activation: str = "tanh"  # or "linear"
    generative_source: str = "pooled"  # or "masked_state"

    def __post_init__(self):
        for name in ("n_layers", "d_model", "d_ff", "n_heads", "vocab_size", "max_len"):
            if getattr(self, name) <= 0:
                raise InputError(f"model.{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise InputError("d_model must be divisible by n_heads")
        if self.head_activation not in ("tanh", "linear"):
            raise InputError("head_activation must be 'tanh' or 'linear'")
        if self.generative_source not in ("pooled", "masked_state"):
            raise InputError("generative_source must be 'pooled' or 'masked_state'")

    @classmethod
    def preset(cls, name: str, **overrides) -> "EncoderConfig":
        presets = {"desk": DESK_PRESET, "paper": PAPER_PRESET}
        if name not in presets:
            raise InputError(f"unknown model preset {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **overrides})


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(config: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """Fresh trainable parameters; insertion order is the checkpoint order."""
    d, ff = config.d_model, config.d_ff

    def param(shape, fan_in):
        return Tensor(_uniform(rng, shape, fan_in, dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    params: dict[str, Tensor] = {
        "emb.tok": param((config.vocab_size, d), d),
        "emb.pos": param((config.max_len, d), d),
    }
    for i in range(config.n_layers):
        p = f"layer{i}."
        for proj in ("wq", "wk", "wv", "wo"):
            params[p + f"attn.{proj}"] = param((d, d), d)
            params[p + f"attn.{proj}_b"] = zeros(d)
        params[p + "ff.w1"] = param((d, ff), d)
        params[p + "ff.b1"] = zeros(ff)
        params[p + "ff.w2"] = param((ff, d), ff)
        params[p + "ff.b2"] = zeros(d)
        params[p + "norm1.g"] = ones(d)
        params[p + "norm1.b"] = zeros(d)
        params[p + "norm2.g"] = ones(d)
        params[p + "norm2.b"] = zeros(d)
    if config.pre_norm:
        params["final_norm.g"] = ones(d)
        params["final_norm.b"] = zeros(d)
    params["head.w"] = param((d, d), d)
    params["head.b"] = zeros(d)
    return params


def count_params(config: EncoderConfig) -> int:
    """Exact trainable-scalar count for a config, by closed formula."""
    d, ff = config.d_model, config.d_ff
    total = config.vocab_size * d + config.max_len * d
    per_layer = 4 * (d * d + d) + (d * ff + ff + ff * d + d) + 4 * d
    total += config.n_layers * per_layer
    if config.pre_norm:
        total += 2 * d
    total += d * d + d  # generative head
    return total


def _attention(params, prefix: str, x: Tensor, add_mask: np.ndarray, config, rng, train):
    b, length, d = x.shape
    h = config.n_heads
    dh = d // h

    def heads(name):
        proj = T.matmul(x, params[prefix + f"attn.{name}"]) + params[prefix + f"attn.{name}_b"]
        return T.transpose(proj.reshape(b, length, h, dh), (0, 2, 1, 3))

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    scores = scores + Tensor(add_mask)  # [b, 1, 1, len] additive pad mask
    probs = T.dropout(T.softmax(scores, axis=-1), config.dropout_p, rng, train)
    ctx = T.transpose(T.matmul(probs, v), (0, 2, 1, 3)).reshape(b, length, d)
    return T.matmul(ctx, params[prefix + "attn.wo"]) + params[prefix + "attn.wo_b"]


def _feed_forward(params, prefix: str, x: Tensor):
    hidden = T.relu(T.matmul(x, params[prefix + "ff.w1"]) + params[prefix + "ff.b1"])
    return T.matmul(hidden, params[prefix + "ff.w2"]) + params[prefix + "ff.b2"]


def encode(
    params: dict[str, Tensor],
    config: EncoderConfig,
    ids: np.ndarray,
    attn_mask: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Run one side of a batch through the shared encoder.

    `ids` is [b, len] int, `attn_mask` [b, len] with 1.0 at real tokens.
    Returns (final_states [b, len, d], sentence reps [b, d]); reps are the
    mean of final states over non-pad positions.
    """
    ids = np.asarray(ids)
    attn_mask = np.asarray(attn_mask, dtype=np.float32)
    b, length = ids.shape
    if length > config.max_len:
        raise InputError(f"sequence length {length} exceeds model max_len {config.max_len}")
    if ids.max() >= config.vocab_size:
        raise InputError("token id out of range for the model vocabulary")

    x = T.gather_rows(params["emb.tok"], ids)
    x = x + T.gather_rows(params["emb.pos"], np.arange(length))
    x = T.dropout(x, config.dropout_p, rng, train)

    add_mask = ((1.0 - attn_mask) * T.BIG_NEG)[:, None, None, :].astype(x.dtype)

    for i in range(config.n_layers):
        p = f"layer{i}."
        if config.pre_norm:
            attn_in = T.layer_norm(x, params[p + "norm1.g"], params[p + "norm1.b"])
            x = x + T.dropout(_attention(params, p, attn_in, add_mask, config, rng, train),
                              config.dropout_p, rng, train)
            ff_in = T.layer_norm(x, params[p + "norm2.g"], params[p + "norm2.b"])
            x = x + T.dropout(_feed_forward(params, p, ff_in), config.dropout_p, rng, train)
        else:
            attn_out = T.dropout(_attention(params, p, x, add_mask, config, rng, train),
                                 config.dropout_p, rng, train)
            x = T.layer_norm(x + attn_out, params[p + "norm1.g"], params[p + "norm1.b"])
            ff_out = T.dropout(_feed_forward(params, p, x), config.dropout_p, rng, train)
            x = T.layer_norm(x + ff_out, params[p + "norm2.g"], params[p + "norm2.b"])
    if config.pre_norm:
        x = T.layer_norm(x, params["final_norm.g"], params["final_norm.b"])

    counts = attn_mask.sum(axis=1, keepdims=True)
    pooled = (x * Tensor(attn_mask[:, :, None])).sum(axis=1)
    reps = pooled * Tensor((1.0 / counts))
    return x, reps


def generative_logits(params: dict[str, Tensor], config: EncoderConfig, rep: Tensor) -> Tensor:
    """Vocabulary logits from a [b, d] representation through the tied head."""
    hidden = T.matmul(rep, params["head.w"]) + params["head.b"]
    if config.head_activation == "tanh":
        hidden = T.tanh(hidden)
    return T.matmul(hidden, T.transpose(params["emb.tok"]))


def gather_states(states: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick per-position states: states[rows[i], cols[i], :] as [n, d]."""
    b, length, d = states.shape
    flat = states.reshape(b * length, d)
    return T.gather_rows(flat, np.asarray(rows) * length + np.asarray(cols))


def generative_input(
    params, config: EncoderConfig, states: Tensor, reps: Tensor, mask_positions: np.ndarray
) -> Tensor:
    """Representation feeding the generative head for one side.

    Defaults to the pooled sentence representation; the masked-state
    variant reads the hidden state at each pair's mask position and falls
    back to pooling where no position was masked on this side.
    """
    if config.generative_source == "pooled":
        return reps
    positions = np.asarray(mask_positions)
    if np.any(positions < 0):
        return reps
    rows = np.arange(states.shape[0])
    return gather_states(states, rows, positions)


def encode_texts(
    params: dict[str, Tensor],
    config: EncoderConfig,
    vocab,
    texts: list[str],
    batch_size: int = 64,
    truncate: bool = True,
) -> np.ndarray:
    """Embed raw sentences in eval mode; returns [n, d] float32."""
    from duosent.corpus import _pad  # local import to avoid a cycle

    out = np.zeros((len(texts), config.d_model), dtype=np.float32)
    with T.no_grad():
        for start in range(0, len(texts), batch_size):
            chunk = texts[start : start + batch_size]
            seqs = []
            for text in chunk:
                ids = vocab.encode(text)
                if not ids:
                    raise InputError(f"cannot embed empty sentence at index {start + len(seqs)}")
                if truncate and len(ids) > config.max_len:
                    ids = ids[: config.max_len]
                seqs.append(ids)
            ids_arr, mask = _pad(seqs, vocab.pad_id)
            _, reps = encode(params, config, ids_arr, mask, train=False)
            out[start : start + len(chunk)] = reps.data.astype(np.float32)
    return out


def clone_config(config: EncoderConfig, **overrides) -> EncoderConfig:
    return replace(config, **overrides)
