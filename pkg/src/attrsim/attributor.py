"""The Attributor: reconstruct a teacher's attribution map from (x, y).

An encoder reads the source; a causal decoder reads the target tokens
y_1..y_k themselves (row t may look at y_1..y_t). Row t of the prediction
is a distribution over source positions, built from per-head attention
scores mixed by a small head-gate network.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import read_checkpoint
from .injection import minmax_columns
from .maps import AttributionMap
from .metrics import MapStats, column_distributions, column_entropy, kendall_tau_at_k, overlap_at_k, rowwise_kl
from .training import TrainConfig, TrainResult, fit
from .transformer import PAD, ParamModule, causal_mask, feed_forward, key_padding_mask, multi_head_attention, norm, pad_batch, split_heads

log = logging.getLogger(__name__)


@dataclass
class AttributorConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    d_model: int = 64
    n_encoder_layers: int = 3
    n_decoder_layers: int = 3
    n_heads: int = 8
    d_ff: int = 128
    gate_hidden: int = 64
    max_length: int = 16
    activation: str = "swish"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttributorConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class AttributorOutput:
    logits: Tensor  # (B, k, j) pre-softmax mixed scores
    matrix: np.ndarray  # (B, k, j) rows are distributions over source positions
    head_weights: np.ndarray  # (B, k, H)
    head_scores: np.ndarray  # (B, H, k, j), masked


@dataclass
class AttributorExample:
    src: list[int]
    tgt: list[int]
    gold: np.ndarray  # (k, j) rows sum to one


class Attributor(ParamModule):
    kind = "attributor"

    def __init__(self, config: AttributorConfig, seed: int = 0):
        super().__init__()
        self.config = c = config
        rng = ad.make_rng(seed)
        scale = 1.0 / math.sqrt(c.d_model)
        self._add("src_embed", rng.normal(0, scale, (c.src_vocab_size, c.d_model)))
        self._add("tgt_embed", rng.normal(0, scale, (c.tgt_vocab_size, c.d_model)))
        self._add("src_pos", rng.normal(0, scale, (c.max_length, c.d_model)))
        self._add("tgt_pos", rng.normal(0, scale, (c.max_length, c.d_model)))
        for i in range(c.n_encoder_layers):
            p = f"enc.{i}"
            self._norm(p + ".ln1", c.d_model)
            for w in "qkvo":
                self._linear(rng, f"{p}.attn.{w}", c.d_model, c.d_model)
            self._norm(p + ".ln2", c.d_model)
            self._linear(rng, p + ".ffn.ff1", c.d_model, c.d_ff, bias=True)
            self._linear(rng, p + ".ffn.ff2", c.d_ff, c.d_model, bias=True)
        self._norm("enc.ln", c.d_model)
        for i in range(c.n_decoder_layers):
            p = f"dec.{i}"
            self._norm(p + ".ln1", c.d_model)
            for w in "qkvo":
                self._linear(rng, f"{p}.self.{w}", c.d_model, c.d_model)
            self._norm(p + ".ln2", c.d_model)
            for w in "qkvo":
                self._linear(rng, f"{p}.cross.{w}", c.d_model, c.d_model)
            self._norm(p + ".ln3", c.d_model)
            self._linear(rng, p + ".ffn.ff1", c.d_model, c.d_ff, bias=True)
            self._linear(rng, p + ".ffn.ff2", c.d_ff, c.d_model, bias=True)
        self._norm("dec.ln", c.d_model)
        self._linear(rng, "head.q", c.d_model, c.d_model)
        self._linear(rng, "head.k", c.d_model, c.d_model)
        self._linear(rng, "gate.1", c.d_model, c.gate_hidden, bias=True)
        self._linear(rng, "gate.2", c.gate_hidden, c.n_heads, bias=True)

    def config_record(self) -> dict:
        return {"kind": self.kind, "attributor": self.config.to_dict()}

    @classmethod
    def load(cls, path) -> "Attributor":
        record, tensors = read_checkpoint(path)
        if record.get("kind") != cls.kind:
            raise ValueError(f"{path} holds a {record.get('kind')!r} checkpoint")
        model = cls(AttributorConfig.from_dict(record["attributor"]))
        model.load_state_dict(tensors)
        return model

    def _ids(self, ids, vocab: int, what: str) -> np.ndarray:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        if ids.shape[1] > self.config.max_length:
            raise ValueError(f"{what} length {ids.shape[1]} exceeds max_length {self.config.max_length}")
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise ValueError(f"{what} contains token ids outside the vocabulary of size {vocab}")
        if np.any((ids != PAD).sum(axis=1) == 0):
            raise ValueError(f"{what} sequence is empty")
        return ids

    def forward(self, src, tgt) -> AttributorOutput:
        c, P = self.config, self.params
        src = self._ids(src, c.src_vocab_size, "source")
        tgt = self._ids(tgt, c.tgt_vocab_size, "target")
        if src.shape[0] != tgt.shape[0]:
            raise ValueError("source and target batch sizes differ")
        ts, tt = src.shape[1], tgt.shape[1]
        src_mask = key_padding_mask(src)
        x = ad.embedding(P["src_embed"], src) + P["src_pos"][:ts]
        for i in range(c.n_encoder_layers):
            p = f"enc.{i}"
            h = norm(P, p + ".ln1", x)
            x = x + multi_head_attention(P, p + ".attn", h, h, src_mask, c.n_heads)
            x = x + feed_forward(P, p + ".ffn", norm(P, p + ".ln2", x), c.activation)
        memory = norm(P, "enc.ln", x)
        y = ad.embedding(P["tgt_embed"], tgt) + P["tgt_pos"][:tt]
        self_mask = causal_mask(tt) + key_padding_mask(tgt)
        for i in range(c.n_decoder_layers):
            p = f"dec.{i}"
            h = norm(P, p + ".ln1", y)
            y = y + multi_head_attention(P, p + ".self", h, h, self_mask, c.n_heads)
            h = norm(P, p + ".ln2", y)
            y = y + multi_head_attention(P, p + ".cross", h, memory, src_mask, c.n_heads)
            y = y + feed_forward(P, p + ".ffn", norm(P, p + ".ln3", y), c.activation)
        h = norm(P, "dec.ln", y)
        q = split_heads(h @ P["head.q.w"], c.n_heads)
        k = split_heads(memory @ P["head.k.w"], c.n_heads)
        # masked per-head scores s_{t,h}; the mask keeps padded sources out of the mix
        scores = (q @ ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(c.d_model // c.n_heads)) + src_mask
        gate = ad.softmax(ad.gelu(h @ P["gate.1.w"] + P["gate.1.b"]) @ P["gate.2.w"] + P["gate.2.b"])
        b, kk, n_heads = gate.shape
        mixed = ad.tsum(scores * gate.transpose(0, 2, 1).reshape(b, n_heads, kk, 1), axis=1)  # (B, k, j)
        with ad.no_grad():
            probs = ad.softmax(mixed, src_mask[:, 0]).data
        return AttributorOutput(mixed, probs, gate.data, scores.data)

    def predict(self, src_ids, tgt_ids) -> np.ndarray:
        """(k, j) predicted map for one pair."""
        with ad.no_grad():
            return self.forward(src_ids, tgt_ids).matrix[0]


def attributor_loss(logits: Tensor, gold: np.ndarray, valid: np.ndarray, src_mask: np.ndarray | None = None) -> Tensor:
    """Mean row-wise KL(gold || softmax(logits)) over valid target rows.

    ``logits``/``gold`` are (B, k, j); ``valid`` is (B, k) and ``src_mask``
    the additive (B, 1, j) key mask. Rows of ``gold`` must be distributions.
    """
    gold = np.asarray(gold, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("no valid rows")
    rows = gold[valid]
    if np.any(rows < -1e-6) or np.any(np.abs(rows.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("gold rows are not probability distributions")
    logq = ad.log_softmax(logits, src_mask)
    with np.errstate(divide="ignore"):
        plogp = np.where(gold > 0, gold * np.log(np.where(gold > 0, gold, 1.0)), 0.0)
    weight = gold * valid[..., None] / valid.sum()
    return ad.tsum(ad.affine_const(logq, -weight, 0.0)) + float((plogp * valid[..., None]).sum() / valid.sum())


def gold_rows(amap: AttributionMap | np.ndarray) -> np.ndarray:
    """Attribution map -> (k, j) rows: min-max columns, column-normalised, transposed."""
    m = amap.matrix if isinstance(amap, AttributionMap) else np.asarray(amap, dtype=np.float64)
    return column_distributions(minmax_columns(m)).T.copy()


def _batch(examples: list[AttributorExample], idx):
    src = pad_batch([examples[i].src for i in idx])
    tgt = pad_batch([examples[i].tgt for i in idx])
    gold = np.zeros((len(idx), tgt.shape[1], src.shape[1]))
    for r, i in enumerate(idx):
        g = examples[i].gold
        gold[r, : g.shape[0], : g.shape[1]] = g
    return src, tgt, gold, tgt != PAD


def batch_loss(model: Attributor, examples, idx) -> Tensor:
    src, tgt, gold, valid = _batch(examples, idx)
    out = model.forward(src, tgt)
    return attributor_loss(out.logits, gold, valid, key_padding_mask(src)[:, 0])


def mean_kl(model: Attributor, examples, batch_size: int = 256) -> float:
    total = 0.0
    rows = 0
    with ad.no_grad():
        for start in range(0, len(examples), batch_size):
            idx = np.arange(start, min(start + batch_size, len(examples)))
            n = sum(len(examples[i].tgt) for i in idx)
            total += batch_loss(model, examples, idx).item() * n
            rows += n
    return total / max(rows, 1)


@dataclass
class AttributorTraining:
    model: Attributor
    result: TrainResult
    initial_valid_kl: float
    curves: dict = field(default_factory=dict)


def train_attributor(train: list[AttributorExample], valid: list[AttributorExample], config: AttributorConfig,
                     budget: TrainConfig, seed: int = 0) -> AttributorTraining:
    """Fit an Attributor; keeps the best-validation parameters."""
    model = Attributor(config, seed=seed)
    initial = mean_kl(model, valid) if valid else float("nan")
    result = fit(
        model,
        lambda idx: batch_loss(model, train, idx),
        len(train),
        [len(e.src) + len(e.tgt) for e in train],
        budget,
        valid_fn=(lambda: mean_kl(model, valid)) if valid else None,
    )
    curves = {"train_kl": result.train_loss, "valid_kl": result.valid_loss}
    return AttributorTraining(model, result, initial, curves)


def evaluate_attributor(model: Attributor, examples: list[AttributorExample], k: int = 3,
                        batch_size: int = 256) -> MapStats:
    """Mean KL, overlap@k and tau@k of predicted vs gold rows on held-out pairs."""
    if not examples:
        raise ValueError("no examples to evaluate")
    preds = []
    with ad.no_grad():
        for start in range(0, len(examples), batch_size):
            idx = np.arange(start, min(start + batch_size, len(examples)))
            src, tgt, _, _ = _batch(examples, idx)
            pred = model.forward(src, tgt).matrix
            for r, i in enumerate(idx):
                g = examples[i].gold
                preds.append(pred[r, : g.shape[0], : g.shape[1]])
    return score_maps([e.gold for e in examples], preds, k)


def score_maps(gold: list[np.ndarray], predicted: list[np.ndarray], k: int = 3) -> MapStats:
    """Mean KL, overlap@k and tau@k between paired (k, j) row maps."""
    kls, overlaps, taus, ents = [], [], [], []
    for g, p in zip(gold, predicted):
        kls.append(rowwise_kl(g, p))
        overlaps.append(np.mean([overlap_at_k(g[t], p[t], k) for t in range(g.shape[0])]))
        taus.append(np.mean([kendall_tau_at_k(g[t], p[t], k) for t in range(g.shape[0])]))
        ents.extend(column_entropy(p.T).tolist())
    return MapStats(ents, float(np.mean(ents)), float(np.mean(overlaps)), float(np.mean(taus)),
                    float(np.mean(kls)), k, len(gold))
