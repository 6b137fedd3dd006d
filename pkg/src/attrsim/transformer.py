"""Encoder-decoder transformer with inspectable attention internals."""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import MASK_VALUE, Tensor
from .checkpoint import read_checkpoint, write_checkpoint
from .injection import InjectionConfig, compose

PAD, BOS, EOS, UNK = 0, 1, 2, 3


@dataclass
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    d_model: int = 64
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_length: int = 16
    activation: str = "swish"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if min(self.src_vocab_size, self.tgt_vocab_size) <= EOS:
            raise ValueError("vocabularies must include the special tokens")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class AttentionRecord:
    """One attention block of one layer, all heads.

    Arrays have shape (B, H, Tq, Tk) except ``values`` (B, H, Tk, d_k) and
    ``mask`` which broadcasts against the scores.
    """

    scores: np.ndarray  # QK^T / sqrt(d_k)
    composed: np.ndarray  # after injection (== scores when nothing injected)
    weights: np.ndarray
    values: np.ndarray
    mask: np.ndarray


@dataclass
class AttentionTrace:
    encoder: list[AttentionRecord] = field(default_factory=list)
    decoder_self: list[AttentionRecord] = field(default_factory=list)
    cross: list[AttentionRecord] = field(default_factory=list)


@dataclass
class ForwardOutput:
    logits: Tensor
    encoder_states: Tensor
    decoder_states: list[Tensor]
    trace: AttentionTrace


class ParamModule:
    """Holder of named parameter tensors with checkpoint support."""

    kind = "module"

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _linear(self, rng, name: str, fan_in: int, fan_out: int, bias: bool = False):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        self._add(name + ".w", rng.uniform(-limit, limit, (fan_in, fan_out)))
        if bias:
            self._add(name + ".b", np.zeros(fan_out))

    def _norm(self, name: str, d: int):
        self._add(name + ".g", np.ones(d))
        self._add(name + ".b", np.zeros(d))

    @contextlib.contextmanager
    def frozen(self):
        """Mark all parameters as constants for the duration of the block."""
        saved = [p.requires_grad for p in self.params.values()]
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(self.params.values(), saved):
                p.requires_grad = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ValueError(f"parameter names differ: {sorted(missing)[:5]}")
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def config_record(self) -> dict:
        raise NotImplementedError

    def save(self, path) -> None:
        write_checkpoint(path, self.config_record(), self.state_dict())


# -- shared building blocks ------------------------------------------------------


def linear(params, name, x, bias=False):
    out = x @ params[name + ".w"]
    return out + params[name + ".b"] if bias else out


def norm(params, name, x):
    return ad.layer_norm(x, params[name + ".g"], params[name + ".b"])


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dk)


def key_padding_mask(ids: np.ndarray) -> np.ndarray:
    """Additive mask of shape (B, 1, 1, T) blocking PAD keys."""
    return np.where(ids == PAD, MASK_VALUE, 0.0)[:, None, None, :]


def causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), MASK_VALUE), k=1)[None, None]


def multi_head_attention(params, prefix, xq, xkv, mask, n_heads, records=None, injection=None,
                         zero_values=None):
    """Scaled dot-product attention with an optional score injection.

    ``injection`` is ``(matrix (B, Tq, Tk), operator, head_mask)``;
    ``zero_values`` is a (B, Tk) boolean array of key positions whose value
    vectors are replaced by zeros.
    """
    q = split_heads(linear(params, prefix + ".q", xq), n_heads)
    k = split_heads(linear(params, prefix + ".k", xkv), n_heads)
    v = split_heads(linear(params, prefix + ".v", xkv), n_heads)
    if zero_values is not None:
        keep = (~np.asarray(zero_values, bool)).astype(np.float64)[:, None, :, None]
        v = ad.affine_const(v, keep, 0.0)
    d_k = q.shape[-1]
    scores = (q @ ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d_k))
    composed = scores
    if injection is not None:
        matrix, operator, heads = injection
        composed = compose(scores, matrix, operator, heads)
    weights = ad.softmax(composed, mask)
    if records is not None:
        records.append(AttentionRecord(scores.data, composed.data, weights.data, v.data,
                                       np.broadcast_to(mask, weights.shape)))
    out = merge_heads(weights @ v)
    return linear(params, prefix + ".o", out)


def feed_forward(params, prefix, x, activation):
    act = ad.ACTIVATIONS[activation]
    return linear(params, prefix + ".ff2", act(linear(params, prefix + ".ff1", x, bias=True)), bias=True)


def crop_injection(matrix: np.ndarray, tq: int, tk: int) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim == 2:
        m = m[None]
    if m.shape[1] < tq or m.shape[2] < tk:
        padded = np.zeros((m.shape[0], max(tq, m.shape[1]), max(tk, m.shape[2])))
        padded[:, : m.shape[1], : m.shape[2]] = m
        m = padded
    return m[:, :tq, :tk]


def pad_batch(seqs, length: int | None = None) -> np.ndarray:
    length = max(len(s) for s in seqs) if length is None else length
    out = np.full((len(seqs), length), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


class Seq2SeqModel(ParamModule):
    kind = "seq2seq"

    def __init__(self, config: ModelConfig, seed: int = 0, injection: InjectionConfig | None = None):
        super().__init__()
        self.config = config
        self.injection = injection
        rng = ad.make_rng(seed)
        c = config
        self._add("src_embed", rng.normal(0, 1.0 / math.sqrt(c.d_model), (c.src_vocab_size, c.d_model)))
        self._add("tgt_embed", rng.normal(0, 1.0 / math.sqrt(c.d_model), (c.tgt_vocab_size, c.d_model)))
        self._add("src_pos", rng.normal(0, 1.0 / math.sqrt(c.d_model), (c.max_length, c.d_model)))
        self._add("tgt_pos", rng.normal(0, 1.0 / math.sqrt(c.d_model), (c.max_length, c.d_model)))
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
        self._linear(rng, "out", c.d_model, c.tgt_vocab_size, bias=True)

    # -- checkpoints --------------------------------------------------------------

    def config_record(self) -> dict:
        return {
            "kind": self.kind,
            "model": self.config.to_dict(),
            "injection": None if self.injection is None else self.injection.to_dict(),
        }

    @classmethod
    def load(cls, path) -> "Seq2SeqModel":
        record, tensors = read_checkpoint(path)
        if record.get("kind") != cls.kind:
            raise ValueError(f"{path} holds a {record.get('kind')!r} checkpoint")
        inj = record.get("injection")
        model = cls(ModelConfig.from_dict(record["model"]), injection=None if inj is None else InjectionConfig.from_dict(inj))
        model.load_state_dict(tensors)
        return model

    # -- validation -----------------------------------------------------------------

    def _check_ids(self, ids: np.ndarray, vocab: int, what: str) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] > self.config.max_length:
            raise ValueError(f"{what} length {ids.shape[1]} exceeds max_length {self.config.max_length}")
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise ValueError(f"{what} contains token ids outside the vocabulary of size {vocab}")
        return ids

    def _injection_for(self, site: str, matrices, tq: int, tk: int):
        inj = self.injection
        if inj is None or matrices is None or inj.site != site:
            return None
        return crop_injection(matrices, tq, tk), inj.operator, inj.heads(self.config.n_heads)

    # -- forward passes ---------------------------------------------------------------

    def embed_source(self, src: np.ndarray) -> np.ndarray:
        """Token embeddings (without positions) for source ids, as a plain array."""
        return self.params["src_embed"].data[np.asarray(src, dtype=np.int64)]

    def encode_batch(self, src, src_embeddings: Tensor | None = None, injection=None, trace=None,
                     hidden: list | None = None) -> Tensor:
        """Encoder memory; ``hidden`` (if given) collects each layer's residual-stream output."""
        c = self.config
        src = self._check_ids(src, c.src_vocab_size, "source")
        b, t = src.shape
        tok = ad.embedding(self.params["src_embed"], src) if src_embeddings is None else src_embeddings
        if tok.shape != (b, t, c.d_model):
            raise ad.ShapeError("encode", tok.shape, (b, t, c.d_model))
        x = tok + self.params["src_pos"][:t]
        mask = key_padding_mask(src)
        inj = self._injection_for("encoder-self", injection, t, t)
        records = trace.encoder if trace is not None else None
        for i in range(c.n_encoder_layers):
            p = f"enc.{i}"
            h = norm(self.params, p + ".ln1", x)
            x = x + multi_head_attention(self.params, p + ".attn", h, h, mask, c.n_heads, records, inj)
            x = x + feed_forward(self.params, p + ".ffn", norm(self.params, p + ".ln2", x), c.activation)
            if hidden is not None:
                hidden.append(x)
        return norm(self.params, "enc.ln", x)

    def decode_batch(self, memory: Tensor, src: np.ndarray, tgt_in, injection=None, trace=None,
                     zero_values: dict[int, np.ndarray] | None = None):
        c = self.config
        tgt_in = self._check_ids(tgt_in, c.tgt_vocab_size, "target")
        src = np.asarray(src, dtype=np.int64).reshape(memory.shape[0], -1)
        b, t = tgt_in.shape
        y = ad.embedding(self.params["tgt_embed"], tgt_in) + self.params["tgt_pos"][:t]
        self_mask = causal_mask(t) + key_padding_mask(tgt_in)
        cross_mask = key_padding_mask(src)
        inj = self._injection_for("cross", injection, t, src.shape[1])
        states = []
        for i in range(c.n_decoder_layers):
            p = f"dec.{i}"
            h = norm(self.params, p + ".ln1", y)
            y = y + multi_head_attention(self.params, p + ".self", h, h, self_mask, c.n_heads,
                                         trace.decoder_self if trace is not None else None)
            h = norm(self.params, p + ".ln2", y)
            zv = None if zero_values is None else zero_values.get(i)
            y = y + multi_head_attention(self.params, p + ".cross", h, memory, cross_mask, c.n_heads,
                                         trace.cross if trace is not None else None, inj, zv)
            y = y + feed_forward(self.params, p + ".ffn", norm(self.params, p + ".ln3", y), c.activation)
            states.append(y)
        logits = linear(self.params, "out", norm(self.params, "dec.ln", y), bias=True)
        return logits, states

    def forward(self, src, tgt_in, *, src_embeddings: Tensor | None = None, injection=None,
                zero_values: dict[int, np.ndarray] | None = None, with_trace: bool = True) -> ForwardOutput:
        """Batched teacher-forced pass. ``injection`` holds (B, L, L) matrices."""
        trace = AttentionTrace() if with_trace else None
        memory = self.encode_batch(src, src_embeddings, injection, trace)
        logits, states = self.decode_batch(memory, src, tgt_in, injection, trace, zero_values)
        return ForwardOutput(logits, memory, states, trace or AttentionTrace())

    # -- single-example API ------------------------------------------------------------

    def encode(self, x, injection: np.ndarray | None = None) -> tuple[np.ndarray, AttentionTrace]:
        x = self._check_ids(x, self.config.src_vocab_size, "source")
        trace = AttentionTrace()
        with ad.no_grad():
            states = self.encode_batch(x, injection=injection, trace=trace)
        return states.data[0], trace

    def forward_teacher_forced(self, x, y, injection: np.ndarray | None = None):
        """Logits (k, V) where row t scores y[t] given x and y[:t]."""
        y = list(np.asarray(y, dtype=np.int64))
        tgt_in = np.array([[BOS] + y[:-1]], dtype=np.int64)
        with ad.no_grad():
            out = self.forward(np.asarray(x)[None], tgt_in, injection=injection)
        return out.logits.data[0], out.trace

    def recompute_with_zeroed_value(self, x, y, layer: int, position: int) -> np.ndarray:
        """Decoder-layer states (k, d) with source ``position``'s cross-attention values zeroed."""
        x = np.asarray(x, dtype=np.int64)
        if not 0 <= layer < self.config.n_decoder_layers:
            raise IndexError(f"layer {layer} out of range")
        if not 0 <= position < len(x):
            raise IndexError(f"source position {position} out of range")
        y = list(np.asarray(y, dtype=np.int64))
        tgt_in = np.array([[BOS] + y[:-1]], dtype=np.int64)
        zero = np.zeros((1, len(x)), bool)
        zero[0, position] = True
        with ad.no_grad():
            out = self.forward(x[None], tgt_in, zero_values={layer: zero}, with_trace=False)
        return out.decoder_states[layer].data[0]

    # -- decoding -------------------------------------------------------------------------

    def _validate_source(self, x) -> np.ndarray:
        x = self._check_ids(x, self.config.src_vocab_size, "source")
        if np.any((x != PAD).sum(axis=1) == 0):
            raise ValueError("source sequence is empty (all padding)")
        return x

    def generate(self, x, strategy: str = "greedy", beam_width: int = 4,
                 injection: np.ndarray | None = None) -> list[int]:
        """Decode one source sequence. Returns target ids (EOS included when produced)."""
        if strategy == "greedy":
            return self.generate_batch([x], None if injection is None else [injection])[0]
        if strategy == "beam":
            return self._beam(x, beam_width, injection)
        raise ValueError(f"unknown decoding strategy {strategy!r}")

    def generate_batch(self, sources, injections=None) -> list[list[int]]:
        src = self._validate_source(pad_batch(sources))
        b = src.shape[0]
        inj = None if injections is None else np.stack([np.asarray(m) for m in injections])
        with ad.no_grad():
            memory = self.encode_batch(src, injection=inj)
            out = np.full((b, 1), BOS, dtype=np.int64)
            done = np.zeros(b, bool)
            for _ in range(self.config.max_length):
                logits, _ = self.decode_batch(memory, src, out, injection=inj)
                nxt = logits.data[:, -1].argmax(axis=-1)
                nxt[done] = PAD
                out = np.concatenate([out, nxt[:, None]], axis=1)
                done |= nxt == EOS
                if done.all() or out.shape[1] > self.config.max_length:
                    break
        results = []
        for row in out[:, 1:]:
            seq = []
            for tok in row:
                if tok == PAD:
                    break
                seq.append(int(tok))
                if tok == EOS:
                    break
            results.append(seq)
        return results

    def _beam(self, x, width: int, injection) -> list[int]:
        if width < 1:
            raise ValueError("beam width must be >= 1")
        src = self._validate_source(x)
        inj = None if injection is None else np.asarray(injection)[None]
        with ad.no_grad():
            memory = self.encode_batch(src, injection=inj)
            beams = [([BOS], 0.0)]
            finished: list[tuple[list[int], float]] = []
            for _ in range(self.config.max_length):
                prefixes = np.array([b[0] for b in beams], dtype=np.int64)
                n = len(beams)
                mem = Tensor(np.repeat(memory.data, n, axis=0))
                binj = None if inj is None else np.repeat(inj, n, axis=0)
                logits, _ = self.decode_batch(mem, np.repeat(src, n, axis=0), prefixes, injection=binj)
                logp = ad.log_softmax(logits[:, -1]).data
                cand = (np.array([b[1] for b in beams])[:, None] + logp).reshape(-1)
                order = np.argsort(-cand, kind="stable")
                beams = []
                for idx in order:
                    bi, tok = divmod(int(idx), logp.shape[1])
                    prefix = prefixes[bi].tolist()
                    if tok == EOS:
                        finished.append((prefix + [tok], float(cand[idx])))
                    else:
                        beams.append((prefix + [tok], float(cand[idx])))
                    if len(finished) >= width or len(beams) + len(finished) >= width:
                        break
                if len(finished) >= width or not beams or len(beams[0][0]) > self.config.max_length:
                    break
        pool = finished or beams
        best = max(pool, key=lambda b: b[1])
        return [int(t) for t in best[0][1:]]
