"""Contrastive regularizer over paired sequence representations.

The 2B representation slots interleave each row's two augmented views;
in-batch negatives are every other slot except the pair itself and any
slot whose training target matches (same-target collision removal). The
regularizer is the symmetric noise-contrastive objective with raw dot
products and temperature tau.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, Tensor
from .data import Batch
from .encoder import NEG_INF, EncoderParams, encode_sequence
from .rng import RngStream


@dataclass
class ContrastiveBatch:
    reps: Tensor                  # [2B, d], slot 2i pairs with slot 2i+1
    collision_mask: np.ndarray    # [2B, 2B] bool, True = admissible negative
    tau: float


@dataclass
class LossBundle:
    rec_loss: Tensor
    reg_loss: Tensor
    total: Tensor
    lam: float


def assemble(h_prime: Tensor, h_prime_s: Tensor, collision_mask: np.ndarray,
             tau: float) -> ContrastiveBatch:
    """Interleave the two views into [h'_1, h'_1s, h'_2, h'_2s, ...]."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    b, d = h_prime.shape
    stacked = ad.reshape(
        ad.transpose(ad.reshape(_concat_rows(h_prime, h_prime_s), (2, b, d)), (1, 0, 2)),
        (2 * b, d))
    return ContrastiveBatch(reps=stacked, collision_mask=collision_mask, tau=tau)


def _concat_rows(a: Tensor, b: Tensor) -> Tensor:
    out_data = np.concatenate([a.data, b.data], axis=0)

    def backward(g):
        n = a.data.shape[0]
        if a.requires_grad:
            a._accumulate(g[:n])
        if b.requires_grad:
            b._accumulate(g[n:])

    return ad._make(out_data, (a, b), backward)


def nce_regularizer(cb: ContrastiveBatch) -> Tensor:
    """Symmetric NCE: both directional terms per pair, mean over the batch.

    Each slot's denominator holds its partner plus its admissible
    negatives; log-sum-exp stabilized. With no admissible negatives the
    contribution is exactly zero.
    """
    two_b = cb.reps.shape[0]
    b = two_b // 2
    sim = ad.mul(ad.matmul(cb.reps, ad.transpose(cb.reps, (1, 0))), 1.0 / cb.tau)
    slots = np.arange(two_b)
    partner = slots ^ 1
    allowed = cb.collision_mask.copy()
    allowed[slots, partner] = True
    penalty = np.where(allowed, 0.0, NEG_INF)
    lse = ad.logsumexp_rows(ad.add(sim, penalty))              # [2B]
    pos = ad.take_pairs(sim, slots, partner)                   # [2B]
    return ad.mul(ad.sum_all(ad.add(lse, ad.mul(pos, -1.0))), 1.0 / b)


def nce_regularizer_bruteforce(reps: np.ndarray, collision_mask: np.ndarray,
                               tau: float) -> float:
    """Loop-level reference for the regularizer (test oracle, no autodiff)."""
    import math

    two_b = reps.shape[0]
    b = two_b // 2
    total = 0.0
    for a in range(two_b):
        p = a ^ 1
        pos = math.exp(float(np.dot(reps[a], reps[p])) / tau)
        denom = pos
        for j in range(two_b):
            if j == a or j == p:
                continue
            if collision_mask[a, j]:
                denom += math.exp(float(np.dot(reps[a], reps[j])) / tau)
        total += -math.log(pos / denom)
    return total / b


def combined_loss(rec: Tensor, reg: Tensor, lam: float) -> LossBundle:
    """total = rec + lam * reg, gradients flowing to both terms."""
    if lam < 0:
        raise ConfigError(f"regularizer weight must be >= 0, got {lam}")
    total = ad.add(rec, ad.mul(reg, lam))
    return LossBundle(rec_loss=rec, reg_loss=reg, total=total, lam=lam)


POSITIVE_MODES = ("unsupervised", "supervised", "duo")


def contrastive_views(mode: str, batch: Batch, params: EncoderParams,
                      base_stream: RngStream, h: Tensor, h_prime: Tensor,
                      h_prime_s: Tensor) -> tuple[Tensor, Tensor]:
    """Pick the positive pair for the configured mode.

    duo: (dropout twin, encoded same-target partner). unsupervised: two
    fresh dropout passes of the same sequence. supervised: the anchor
    against the partner, one dropout pass each.
    """
    if mode == "duo":
        return h_prime, h_prime_s
    if mode == "unsupervised":
        h_second = encode_sequence(batch.item_ids, params, base_stream.child("twin2"))
        return h_prime, h_second
    if mode == "supervised":
        return h, h_prime_s
    raise ConfigError(f"unknown positive mode {mode!r}")
