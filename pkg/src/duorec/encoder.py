"""Causal Transformer sequence encoder with a dual dropout-twin forward.

Item embeddings plus a learned positional matrix feed an L-layer
multi-head self-attention stack (post-norm, causal mask, pad keys masked
out). The representation of a user sequence is the hidden vector at the
last (most recent) position. ``encode_twins`` runs the same weights under
independent dropout streams to produce the augmented views used by the
contrastive regularizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, Tensor
from .data import PAD_INDEX, Batch
from .rng import RngStream

NEG_INF = -1e30


@dataclass
class EncoderConfig:
    vocab_size: int
    d: int = 64
    layers: int = 2
    heads: int = 2
    max_len: int = 50
    emb_dropout: float = 0.1
    hidden_dropout: float = 0.1

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def named(self):
        return self.tensors.items()

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def init_params(config: EncoderConfig, stream: RngStream) -> EncoderParams:
    """Truncated-normal (std 0.02) weights, zero biases, unit layer-norm gains."""
    p = EncoderParams(config)

    def tn(name: str, shape):
        n = int(np.prod(shape))
        data = stream.child(f"init.{name}").truncated_normal(n, 0.02).reshape(shape)
        p.tensors[name] = Tensor(data, requires_grad=True)

    def const(name: str, shape, value: float):
        p.tensors[name] = Tensor(np.full(shape, value), requires_grad=True)

    tn("item_emb", (config.vocab_size, config.d))
    p.tensors["item_emb"].data[PAD_INDEX] = 0.0
    tn("pos_emb", (config.max_len, config.d))
    for layer in range(config.layers):
        for w in ("wq", "wk", "wv", "wo"):
            tn(f"layer{layer}.{w}", (config.d, config.d))
        tn(f"layer{layer}.ffn_w1", (config.d, 4 * config.d))
        const(f"layer{layer}.ffn_b1", (4 * config.d,), 0.0)
        tn(f"layer{layer}.ffn_w2", (4 * config.d, config.d))
        const(f"layer{layer}.ffn_b2", (config.d,), 0.0)
        const(f"layer{layer}.ln1_gain", (config.d,), 1.0)
        const(f"layer{layer}.ln1_bias", (config.d,), 0.0)
        const(f"layer{layer}.ln2_gain", (config.d,), 1.0)
        const(f"layer{layer}.ln2_bias", (config.d,), 0.0)
    return p


def embed(item_ids: np.ndarray, params: EncoderParams, stream: RngStream) -> Tensor:
    """Item embedding + positional row per slot, then embedding dropout."""
    cfg = params.config
    b, n = item_ids.shape
    v = ad.gather_rows(params["item_emb"], item_ids)          # [B, N, d]
    pos = ad.gather_rows(params["pos_emb"], np.arange(n))     # [N, d]
    h0 = ad.add(v, ad.reshape(pos, (1, n, cfg.d)))
    return ad.dropout(h0, cfg.emb_dropout, stream.child("emb"))


def _attention_mask(item_ids: np.ndarray) -> np.ndarray:
    """[B, 1, N, N] additive mask: causal plus pad-key removal."""
    b, n = item_ids.shape
    causal = np.triu(np.full((n, n), NEG_INF), k=1)
    mask = np.broadcast_to(causal, (b, 1, n, n)).copy()
    pad_key = item_ids == PAD_INDEX                            # [B, N]
    mask += np.where(pad_key, NEG_INF, 0.0)[:, None, None, :]
    # a fully masked row (pad query) would be all -inf; keep self-attention open
    eye = np.eye(n, dtype=bool)
    mask[:, 0][np.broadcast_to(eye, (b, n, n)) & (mask[:, 0] <= NEG_INF)] = 0.0
    return mask


def encode(h0: Tensor, item_ids: np.ndarray, params: EncoderParams,
           stream: RngStream) -> Tensor:
    """Run the attention stack; return last-position vectors [B, d]."""
    cfg = params.config
    b, n, d = h0.shape
    nh, dh = cfg.heads, cfg.d // cfg.heads
    mask = _attention_mask(item_ids)
    h = h0
    for layer in range(cfg.layers):
        ls = stream.child(f"layer{layer}")
        flat = ad.reshape(h, (b * n, d))
        heads = []
        for w in ("wq", "wk", "wv"):
            proj = ad.matmul(flat, params[f"layer{layer}.{w}"])
            heads.append(ad.transpose(ad.reshape(proj, (b, n, nh, dh)), (0, 2, 1, 3)))
        q, k, vv = heads                                       # [B, nh, N, dh]
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        att = ad.softmax_rows(ad.add(scores, mask))
        att = ad.dropout(att, cfg.hidden_dropout, ls.child("att"))
        ctx = ad.matmul(att, vv)                               # [B, nh, N, dh]
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b * n, d))
        out = ad.matmul(ctx, params[f"layer{layer}.wo"])
        out = ad.dropout(out, cfg.hidden_dropout, ls.child("attout"))
        h = ad.layer_norm(ad.add(h, ad.reshape(out, (b, n, d))),
                          params[f"layer{layer}.ln1_gain"], params[f"layer{layer}.ln1_bias"])
        flat = ad.reshape(h, (b * n, d))
        f1 = ad.gelu(ad.add(ad.matmul(flat, params[f"layer{layer}.ffn_w1"]),
                            params[f"layer{layer}.ffn_b1"]))
        f2 = ad.add(ad.matmul(f1, params[f"layer{layer}.ffn_w2"]),
                    params[f"layer{layer}.ffn_b2"])
        f2 = ad.dropout(f2, cfg.hidden_dropout, ls.child("ffn"))
        h = ad.layer_norm(ad.add(h, ad.reshape(f2, (b, n, d))),
                          params[f"layer{layer}.ln2_gain"], params[f"layer{layer}.ln2_bias"])
    last = ad.reshape(h, (b * n, d))
    return ad.gather_rows(last, np.arange(n - 1, b * n, n))    # [B, d]


def encode_sequence(item_ids: np.ndarray, params: EncoderParams,
                    stream: RngStream) -> Tensor:
    """Full embed + encode pass under one dropout stream; returns [B, d]."""
    h0 = embed(item_ids, params, stream)
    return encode(h0, item_ids, params, stream.child("trm"))


def encode_twins(batch: Batch, params: EncoderParams, base_stream: RngStream):
    """Anchor pass plus two independently-masked augmented passes.

    Returns (h, h_prime, h_prime_s): the anchor representation, its
    dropout twin (same input, fresh masks), and the encoded same-target
    partner sequence (third independent mask set).
    """
    h = encode_sequence(batch.item_ids, params, base_stream.child("anchor"))
    h_prime = encode_sequence(batch.item_ids, params, base_stream.child("twin"))
    h_prime_s = encode_sequence(batch.positive_ids, params, base_stream.child("partner"))
    return h, h_prime, h_prime_s
