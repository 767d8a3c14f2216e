"""Training orchestration: config, Adam, the epoch loop, checkpointing.

One training step encodes the anchor and its two augmented views, scores
the next item against the (tied) item embedding matrix, adds the weighted
contrastive regularizer, backpropagates, and applies a bias-corrected
Adam update with the pad embedding row pinned to zero. Model selection is
validation HR@5 with early stopping.
"""

from __future__ import annotations

import contextlib
import copy
import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, Tensor, no_grad
from .contrastive import (POSITIVE_MODES, assemble, combined_loss,
                          contrastive_views, nce_regularizer)
from .data import (PAD_INDEX, SplitDataset, build_target_index, eval_batches,
                   iter_epoch)
from .encoder import (EncoderConfig, EncoderParams, encode_sequence,
                      encode_twins, init_params)
from .metrics import EvalReport, alignment, rank_full_catalog, report, uniformity
from .rng import RngStream

MAGIC = b"DUO1"


@dataclass
class TrainConfig:
    d: int = 64
    layers: int = 2
    heads: int = 2
    max_len: int = 50
    batch_size: int = 256
    lr: float = 0.001
    lam: float = 0.2                # serialized as "lambda"
    tau: float = 1.0
    emb_dropout: float = 0.1
    hidden_dropout: float = 0.1
    positive_mode: str = "duo"
    epochs: int = 100
    seed: int = 42
    early_stop_patience: int = 10
    normalize_nce: bool = False     # ablation flag; raw dot products by default

    _JSON_KEYS = {
        "d", "layers", "heads", "max_len", "batch_size", "lr", "lambda", "tau",
        "emb_dropout", "hidden_dropout", "positive_mode", "epochs", "seed",
        "early_stop_patience", "normalize_nce",
    }

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if self.positive_mode not in POSITIVE_MODES:
            raise ConfigError(f"positive_mode must be one of {POSITIVE_MODES}")
        for name in ("emb_dropout", "hidden_dropout"):
            v = getattr(self, name)
            if not 0.0 <= v <= 0.5:
                raise ConfigError(f"{name} must be in [0, 0.5], got {v}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - cls._JSON_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(vocab_size=vocab_size, d=self.d, layers=self.layers,
                             heads=self.heads, max_len=self.max_len,
                             emb_dropout=self.emb_dropout,
                             hidden_dropout=self.hidden_dropout)


class Adam:
    """Bias-corrected Adam over the named parameter tensors."""

    def __init__(self, params: EncoderParams, lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.named()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.named()}

    def step(self, params: EncoderParams) -> None:
        self.t += 1
        for name, tensor in params.named():
            g = tensor.grad
            if g is None:
                g = np.zeros_like(tensor.data)
            if g.shape != tensor.data.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            if name == "item_emb":
                g = g.copy()
                g[PAD_INDEX] = 0.0
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            m_hat = self.m[name] / (1 - self.b1 ** self.t)
            v_hat = self.v[name] / (1 - self.b2 ** self.t)
            tensor.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if name == "item_emb":
                tensor.data[PAD_INDEX] = 0.0

    def zero_grad(self, params: EncoderParams) -> None:
        for _, tensor in params.named():
            tensor.zero_grad()


@dataclass
class Checkpoint:
    params: EncoderParams
    adam_m: dict
    adam_v: dict
    adam_t: int
    epoch: int
    best_valid_hr5: float
    data_counter: int
    train_config: TrainConfig


@contextlib.contextmanager
def inference_mode(params: EncoderParams):
    """Evaluate with dropout disabled and no graph recording."""
    cfg = params.config
    saved = (cfg.emb_dropout, cfg.hidden_dropout)
    cfg.emb_dropout = cfg.hidden_dropout = 0.0
    try:
        with no_grad():
            yield
    finally:
        cfg.emb_dropout, cfg.hidden_dropout = saved


def evaluate(params: EncoderParams, examples, max_len: int,
             ks=(5, 10)) -> EvalReport:
    """Full-catalog ranking of held-out targets, dropout off."""
    ranks: list[np.ndarray] = []
    dummy = RngStream(0, "eval")
    with inference_mode(params):
        for ids, _lengths, targets in eval_batches(examples, max_len):
            h = encode_sequence(ids, params, dummy)
            ranks.append(rank_full_catalog(h.data, params["item_emb"].data, targets))
    return report(np.concatenate(ranks) if ranks else np.array([]), ks)


@dataclass
class TrainResult:
    checkpoint: Checkpoint          # best validation HR@5 state
    curves: list[dict]
    diverged: bool = False
    final_params: EncoderParams | None = None   # weights at the last epoch run


def train_step(batch, params: EncoderParams, config: TrainConfig,
               step_stream: RngStream):
    """Forward both loss terms for one batch; returns the loss bundle and views.

    With lam == 0 the augmented passes are skipped entirely (plain
    next-item training); the logged regularizer value is then zero.
    """
    if config.lam == 0.0:
        h = encode_sequence(batch.item_ids, params, step_stream.child("anchor"))
        logits = ad.matmul(h, ad.transpose(params["item_emb"], (1, 0)))
        rec = ad.cross_entropy_from_logits(logits, batch.targets)
        return combined_loss(rec, Tensor(0.0), 0.0), h, None, None
    h, h_prime, h_prime_s = encode_twins(batch, params, step_stream)
    logits = ad.matmul(h, ad.transpose(params["item_emb"], (1, 0)))
    rec = ad.cross_entropy_from_logits(logits, batch.targets)
    view_a, view_b = contrastive_views(config.positive_mode, batch, params,
                                       step_stream, h, h_prime, h_prime_s)
    if config.normalize_nce:
        view_a, view_b = _l2_rows(view_a), _l2_rows(view_b)
    cb = assemble(view_a, view_b, batch.collision_mask, config.tau)
    reg = nce_regularizer(cb)
    return combined_loss(rec, reg, config.lam), h, view_a, view_b


def _l2_rows(x: Tensor) -> Tensor:
    norms = np.linalg.norm(x.data, axis=-1, keepdims=True)
    norms = np.where(norms == 0, 1.0, norms)
    return ad.mul(x, 1.0 / norms)


def train(config: TrainConfig, data: SplitDataset) -> TrainResult:
    if not data.train:
        raise ValueError("empty training set")
    root = RngStream(config.seed, "run")
    enc_cfg = config.encoder_config(data.vocab.size)
    params = init_params(enc_cfg, root)
    optimizer = Adam(params, lr=config.lr)
    index = build_target_index(data.train)
    data_stream = root.child("data")

    curves: list[dict] = []
    best_hr5 = -1.0
    best_state = _snapshot(params, optimizer)
    best_epoch = 0
    stale = 0
    diverged = False

    for epoch in range(1, config.epochs + 1):
        rec_sum = reg_sum = 0.0
        n_batches = 0
        last_h = last_pair = None
        for b_idx, batch in enumerate(iter_epoch(data, index, config.batch_size, data_stream)):
            step_stream = root.child(f"epoch{epoch}.batch{b_idx}")
            bundle, h, view_a, view_b = train_step(batch, params, config, step_stream)
            if not np.isfinite(bundle.total.data):
                diverged = True
                break
            optimizer.zero_grad(params)
            bundle.total.backward()
            optimizer.step(params)
            rec_sum += bundle.rec_loss.item()
            reg_sum += bundle.reg_loss.item()
            n_batches += 1
            last_h = h.data
            last_pair = (view_a.data, view_b.data) if view_a is not None else None
        if diverged or n_batches == 0:
            break

        valid_hr5 = evaluate(params, data.valid, config.max_len, ks=(5,)).hr[5]
        curves.append({
            "epoch": epoch,
            "rec_loss": rec_sum / n_batches,
            "reg_loss": reg_sum / n_batches,
            "align": alignment(*last_pair) if last_pair is not None else float("nan"),
            "uniformity": uniformity(last_h) if len(last_h) >= 2 else float("nan"),
            "valid_hr5": valid_hr5,
        })
        if valid_hr5 > best_hr5:
            best_hr5 = valid_hr5
            best_state = _snapshot(params, optimizer)
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break

    best_params = EncoderParams(copy.deepcopy(enc_cfg))
    for name, arr in best_state["params"].items():
        best_params.tensors[name] = Tensor(arr, requires_grad=True)
    ckpt = Checkpoint(params=best_params, adam_m=best_state["m"],
                      adam_v=best_state["v"], adam_t=best_state["t"],
                      epoch=best_epoch, best_valid_hr5=max(best_hr5, 0.0),
                      data_counter=data_stream.counter, train_config=config)
    final_params = EncoderParams(copy.deepcopy(enc_cfg))
    for name, t in params.named():
        final_params.tensors[name] = Tensor(t.data.copy(), requires_grad=True)
    return TrainResult(checkpoint=ckpt, curves=curves, diverged=diverged,
                       final_params=final_params)


def _snapshot(params: EncoderParams, optimizer: Adam) -> dict:
    return {
        "params": {name: t.data.copy() for name, t in params.named()},
        "m": {k: v.copy() for k, v in optimizer.m.items()},
        "v": {k: v.copy() for k, v in optimizer.v.items()},
        "t": optimizer.t,
    }


def write_curves_csv(path, curves: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        f.write("epoch,rec_loss,reg_loss,align,uniformity,valid_hr5\n")
        for row in curves:
            f.write("{epoch},{rec_loss:.12g},{reg_loss:.12g},{align:.12g},"
                    "{uniformity:.12g},{valid_hr5:.12g}\n".format(**row))


# -- checkpoint persistence ---------------------------------------------


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Binary layout: magic, manifest, raw float64 buffers, JSON trailer."""
    entries: list[tuple[str, np.ndarray]] = []
    for name in sorted(ckpt.params.tensors):
        entries.append((name, ckpt.params[name].data))
    for name in sorted(ckpt.adam_m):
        entries.append((f"adam.m.{name}", ckpt.adam_m[name]))
    for name in sorted(ckpt.adam_v):
        entries.append((f"adam.v.{name}", ckpt.adam_v[name]))

    trailer = json.dumps({
        "config": ckpt.train_config.to_dict(),
        "vocab_size": ckpt.params.config.vocab_size,
        "adam_t": ckpt.adam_t,
        "epoch": ckpt.epoch,
        "best_valid_hr5": ckpt.best_valid_hr5,
        "data_counter": ckpt.data_counter,
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(entries)))
        for name, arr in entries:
            nb = name.encode("utf-8")
            f.write(struct.pack("<Q", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        for _, arr in entries:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        f.write(struct.pack("<Q", len(trailer)))
        f.write(trailer)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise IOError(f"{path}: not a checkpoint file")
        (n_entries,) = struct.unpack("<Q", f.read(8))
        manifest: list[tuple[str, tuple[int, ...]]] = []
        for _ in range(n_entries):
            (name_len,) = struct.unpack("<Q", f.read(8))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<Q", f.read(8))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim)) if ndim else ()
            manifest.append((name, tuple(int(s) for s in shape)))
        buffers: dict[str, np.ndarray] = {}
        for name, shape in manifest:
            count = int(np.prod(shape)) if shape else 1
            buffers[name] = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape).copy()
        (json_len,) = struct.unpack("<Q", f.read(8))
        trailer = json.loads(f.read(json_len).decode("utf-8"))

    config = TrainConfig.from_dict(trailer["config"])
    enc_cfg = config.encoder_config(trailer["vocab_size"])
    params = EncoderParams(enc_cfg)
    adam_m: dict[str, np.ndarray] = {}
    adam_v: dict[str, np.ndarray] = {}
    for name, arr in buffers.items():
        if name.startswith("adam.m."):
            adam_m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            adam_v[name[len("adam.v."):]] = arr
        else:
            params.tensors[name] = Tensor(arr, requires_grad=True)
    return Checkpoint(params=params, adam_m=adam_m, adam_v=adam_v,
                      adam_t=trailer["adam_t"], epoch=trailer["epoch"],
                      best_valid_hr5=trailer["best_valid_hr5"],
                      data_counter=trailer["data_counter"], train_config=config)
