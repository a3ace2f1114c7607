"""Bidirectional encoder: embeddings, rotary positions, alternating
local/global attention, gated feed-forward blocks, MLM head, mean pooling.

Layers are pre-norm residual blocks. Layer ``i`` attends globally when
``i % global_every == 0`` and through a sliding window otherwise; padding
is handled purely by masking.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .errors import ValidationError

INIT_STD = 0.02

GLOBAL = "global"
LOCAL = "local"


class SequenceTooLongError(ValidationError):
    def __init__(self, length, limit):
        self.length = length
        self.limit = limit
        super().__init__(f"sequence too long: {length} tokens exceeds max_seq_len {limit}")


@dataclass
class ModelConfig:
    vocab_size: int
    hidden_dim: int = 128
    num_layers: int = 6
    num_heads: int = 4
    ffn_dim: int = 256
    max_seq_len: int = 128
    rope_theta: float = 10000.0
    local_rope_theta: float | None = None
    local_window: int = 32
    global_every: int = 3
    layernorm_eps: float = 1e-5
    tie_mlm_head: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValidationError(f"vocab_size must be >= 1, got {self.vocab_size}")
        if self.hidden_dim % self.num_heads != 0:
            raise ValidationError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.head_dim % 2 != 0:
            raise ValidationError(f"head_dim must be even for rotary encoding, got {self.head_dim}")
        if self.local_window < 2 or self.local_window % 2 != 0:
            raise ValidationError(f"local_window must be even and >= 2, got {self.local_window}")
        if self.global_every < 1:
            raise ValidationError(f"global_every must be >= 1, got {self.global_every}")
        if self.max_seq_len < 1:
            raise ValidationError(f"max_seq_len must be >= 1, got {self.max_seq_len}")

    @property
    def head_dim(self):
        return self.hidden_dim // self.num_heads


@dataclass
class PooledEmbedding:
    """A single pooled sentence vector; unit norm when the flag is set."""

    vector: np.ndarray
    normalized: bool = False


class EncoderWeights:
    """Named parameter tensors, a deterministic function of (config, seed)."""

    def __init__(self, params, tied):
        self.params = params
        self.tied = tied

    def __getitem__(self, name):
        return self.params[name]

    def named_parameters(self):
        return self.params.items()

    def num_parameters(self):
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def grads(self):
        out = {}
        for name, p in self.params.items():
            out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        return out

    def data_arrays(self):
        return {name: p.data for name, p in self.params.items()}


def _trunc_normal(rng, shape, std, dtype):
    # redraw anything beyond 2 sigma
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype)


def init_model(config, dtype=np.float32):
    """Fresh weights: truncated normal (std 0.02) by seed, identity norms."""
    rng = np.random.default_rng(config.seed)
    d, f, v = config.hidden_dim, config.ffn_dim, config.vocab_size

    def normal(name, shape):
        params[name] = ag.parameter(_trunc_normal(rng, shape, INIT_STD, dtype), name=name)

    def norm_pair(prefix):
        params[f"{prefix}.gamma"] = ag.parameter(np.ones(d, dtype=dtype), name=f"{prefix}.gamma")
        params[f"{prefix}.beta"] = ag.parameter(np.zeros(d, dtype=dtype), name=f"{prefix}.beta")

    params = {}
    normal("tok_emb", (v, d))
    for i in range(config.num_layers):
        norm_pair(f"layers.{i}.attn_norm")
        normal(f"layers.{i}.wq", (d, d))
        normal(f"layers.{i}.wk", (d, d))
        normal(f"layers.{i}.wv", (d, d))
        normal(f"layers.{i}.wo", (d, d))
        norm_pair(f"layers.{i}.ffn_norm")
        normal(f"layers.{i}.w_in", (d, 2 * f))
        normal(f"layers.{i}.w_out", (f, d))
    norm_pair("head_norm")
    params["head_bias"] = ag.parameter(np.zeros(v, dtype=dtype), name="head_bias")
    if not config.tie_mlm_head:
        normal("head_proj", (d, v))
    return EncoderWeights(params, tied=config.tie_mlm_head)


def layer_kind(layer_idx, global_every):
    if layer_idx < 0:
        raise ValidationError(f"layer_idx must be >= 0, got {layer_idx}")
    return GLOBAL if layer_idx % global_every == 0 else LOCAL


def attention_mask(kind, seq_len, local_window, pad_mask):
    """Boolean [L, L] allowance matrix; no causal constraint.

    pad_mask is True at real tokens. A column is allowed only when it is a
    real token; local attention further restricts to |i - j| <= window/2.
    """
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if pad_mask.shape != (seq_len,):
        raise ValidationError(f"pad_mask shape {pad_mask.shape} != ({seq_len},)")
    allow = np.broadcast_to(pad_mask[None, :], (seq_len, seq_len)).copy()
    if kind == LOCAL:
        idx = np.arange(seq_len)
        near = np.abs(idx[:, None] - idx[None, :]) <= local_window // 2
        allow &= near
    elif kind != GLOBAL:
        raise ValidationError(f"unknown attention kind {kind!r}")
    return allow


def apply_rope(q_or_k, positions, theta):
    """Rotate query/key dimension pairs by position-dependent angles."""
    return ag.rope(q_or_k, positions, theta)


def _attention(x, weights, prefix, allow, positions, theta, config):
    b, L, d = x.shape
    h, hd = config.num_heads, config.head_dim
    q = ag.reshape(ag.matmul(x, weights[f"{prefix}.wq"]), (b, L, h, hd))
    k = ag.reshape(ag.matmul(x, weights[f"{prefix}.wk"]), (b, L, h, hd))
    v = ag.reshape(ag.matmul(x, weights[f"{prefix}.wv"]), (b, L, h, hd))
    q = ag.transpose(ag.rope(q, positions, theta), (0, 2, 1, 3))
    k = ag.transpose(ag.rope(k, positions, theta), (0, 2, 1, 3))
    v = ag.transpose(v, (0, 2, 1, 3))
    scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    probs = ag.softmax(scores, axis=-1, mask=allow[:, None, :, :])
    ctx = ag.reshape(ag.transpose(ag.matmul(probs, v), (0, 2, 1, 3)), (b, L, d))
    return ag.matmul(ctx, weights[f"{prefix}.wo"])


def _geglu_ffn(x, weights, prefix, config):
    f = config.ffn_dim
    u = ag.matmul(x, weights[f"{prefix}.w_in"])
    gate = ag.tslice(u, (Ellipsis, slice(0, f)))
    val = ag.tslice(u, (Ellipsis, slice(f, 2 * f)))
    return ag.matmul(ag.mul(ag.gelu(gate), val), weights[f"{prefix}.w_out"])


def encoder_forward(token_ids, pad_mask, weights, config):
    """Run the pre-norm transformer stack; returns hidden states [B, L, d]."""
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise ValidationError(f"token_ids must be [B, L], got shape {ids.shape}")
    b, L = ids.shape
    if L > config.max_seq_len:
        raise SequenceTooLongError(L, config.max_seq_len)
    if ids.size and ids.max() >= config.vocab_size:
        raise ValidationError(f"token id {int(ids.max())} outside vocab of {config.vocab_size}")
    pad = np.asarray(pad_mask, dtype=bool)
    if pad.shape != (b, L):
        raise ValidationError(f"pad_mask shape {pad.shape} != {(b, L)}")

    positions = np.arange(L)
    allow_global = np.broadcast_to(pad[:, None, :], (b, L, L)).copy()
    idx = np.arange(L)
    near = np.abs(idx[:, None] - idx[None, :]) <= config.local_window // 2
    allow_local = allow_global & near[None, :, :]

    local_theta = config.local_rope_theta if config.local_rope_theta is not None else config.rope_theta
    eps = config.layernorm_eps
    h = ag.take_rows(weights["tok_emb"], ids)
    for i in range(config.num_layers):
        prefix = f"layers.{i}"
        kind = layer_kind(i, config.global_every)
        allow = allow_global if kind == GLOBAL else allow_local
        theta = config.rope_theta if kind == GLOBAL else local_theta
        xn = ag.layernorm(h, weights[f"{prefix}.attn_norm.gamma"], weights[f"{prefix}.attn_norm.beta"], eps)
        h = ag.add(h, _attention(xn, weights, prefix, allow, positions, theta, config))
        xn = ag.layernorm(h, weights[f"{prefix}.ffn_norm.gamma"], weights[f"{prefix}.ffn_norm.beta"], eps)
        h = ag.add(h, _geglu_ffn(xn, weights, prefix, config))
    return h


def mlm_logits(hidden, weights, config):
    """Head norm then vocabulary projection over any leading shape [..., d]."""
    xn = ag.layernorm(hidden, weights["head_norm.gamma"], weights["head_norm.beta"], config.layernorm_eps)
    if weights.tied:
        proj = ag.transpose(weights["tok_emb"], (1, 0))
    else:
        proj = weights["head_proj"]
    flat = xn if xn.ndim == 2 else ag.reshape(xn, (-1, hidden.shape[-1]))
    logits = ag.add(ag.matmul(flat, proj), weights["head_bias"])
    if xn.ndim != 2:
        logits = ag.reshape(logits, tuple(hidden.shape[:-1]) + (config.vocab_size,))
    return logits


def mean_pool(hidden, pad_mask, normalize=False):
    """Average hidden states over non-pad positions; optional L2 normalize."""
    pad = np.asarray(pad_mask, dtype=bool)
    counts = pad.sum(axis=1)
    if (counts == 0).any():
        raise ValidationError("empty sequence: a row of pad_mask has no real tokens")
    dtype = hidden.dtype if isinstance(hidden, Tensor) else np.asarray(hidden).dtype
    maskf = pad.astype(dtype)[:, :, None]
    summed = ag.tsum(ag.mul(hidden, maskf), axis=1)
    pooled = ag.mul(summed, (1.0 / counts.astype(dtype))[:, None])
    if normalize:
        norm = ag.sqrt(ag.tsum(ag.mul(pooled, pooled), axis=1, keepdims=True))
        pooled = ag.div(pooled, norm)
    return pooled


class EncoderModel:
    """Inference wrapper: weights + config + the reserved-id contract that
    analysis operations rely on (mask id, ids never scored)."""

    def __init__(self, weights, config, mask_id, special_ids):
        self.weights = weights
        self.config = config
        self.mask_id = mask_id
        self.special_ids = frozenset(special_ids)

    def hidden(self, token_ids, pad_mask=None):
        ids = np.asarray(token_ids)
        if pad_mask is None:
            pad_mask = np.ones_like(ids, dtype=bool)
        with no_grad():
            return encoder_forward(ids, pad_mask, self.weights, self.config).data

    def logits(self, token_ids, pad_mask=None):
        ids = np.asarray(token_ids)
        if pad_mask is None:
            pad_mask = np.ones_like(ids, dtype=bool)
        with no_grad():
            h = encoder_forward(ids, pad_mask, self.weights, self.config)
            return mlm_logits(h, self.weights, self.config).data

    def pooled(self, token_ids, pad_mask=None, normalize=True):
        ids = np.asarray(token_ids)
        if pad_mask is None:
            pad_mask = np.ones_like(ids, dtype=bool)
        with no_grad():
            h = encoder_forward(ids, pad_mask, self.weights, self.config)
            return mean_pool(h, pad_mask, normalize=normalize).data
