"""Training and evaluating translation models (teacher and students)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import ParallelExample, Tokenizer
from .metrics import EvalReport, evaluate_translations
from .training import TrainConfig, TrainResult, fit
from .transformer import BOS, PAD, Seq2SeqModel, pad_batch

log = logging.getLogger(__name__)


@dataclass
class EncodedPair:
    src: list[int]  # words + EOS
    tgt: list[int]  # words + EOS


def encode_pairs(examples: list[ParallelExample], src_tok: Tokenizer, tgt_tok: Tokenizer) -> list[EncodedPair]:
    return [EncodedPair(src_tok.encode(e.source), tgt_tok.encode(e.target)) for e in examples]


def _stack(injections, idx):
    if injections is None:
        return None
    return np.stack([injections[i] for i in idx])


def batch_loss(model: Seq2SeqModel, pairs: list[EncodedPair], idx, injections=None) -> ad.Tensor:
    src = pad_batch([pairs[i].src for i in idx])
    tgt_out = pad_batch([pairs[i].tgt for i in idx])
    tgt_in = pad_batch([[BOS] + pairs[i].tgt[:-1] for i in idx])
    out = model.forward(src, tgt_in, injection=_stack(injections, idx), with_trace=False)
    return ad.cross_entropy(out.logits, tgt_out, tgt_out != PAD)


def mean_loss(model, pairs, injections=None, batch_size: int = 256) -> float:
    total, count = 0.0, 0
    with ad.no_grad():
        for start in range(0, len(pairs), batch_size):
            idx = np.arange(start, min(start + batch_size, len(pairs)))
            n_tok = sum(len(pairs[i].tgt) for i in idx)
            total += batch_loss(model, pairs, idx, injections).item() * n_tok
            count += n_tok
    return total / max(count, 1)


def train_translation(model: Seq2SeqModel, train: list[EncodedPair], valid: list[EncodedPair], cfg: TrainConfig,
                      train_injections=None, valid_injections=None) -> TrainResult:
    return fit(
        model,
        lambda idx: batch_loss(model, train, idx, train_injections),
        len(train),
        [len(p.src) + len(p.tgt) for p in train],
        cfg,
        valid_fn=(lambda: mean_loss(model, valid, valid_injections)) if valid else None,
    )


def token_accuracy(model: Seq2SeqModel, pairs: list[EncodedPair], injections=None, batch_size: int = 256) -> float:
    """Teacher-forced next-token accuracy over non-pad positions."""
    hit = total = 0
    with ad.no_grad():
        for start in range(0, len(pairs), batch_size):
            idx = np.arange(start, min(start + batch_size, len(pairs)))
            src = pad_batch([pairs[i].src for i in idx])
            tgt_out = pad_batch([pairs[i].tgt for i in idx])
            tgt_in = pad_batch([[BOS] + pairs[i].tgt[:-1] for i in idx])
            out = model.forward(src, tgt_in, injection=_stack(injections, idx), with_trace=False)
            valid = tgt_out != PAD
            hit += int(((out.logits.data.argmax(-1) == tgt_out) & valid).sum())
            total += int(valid.sum())
    return hit / max(total, 1)


def translate(model: Seq2SeqModel, sources: list[list[int]], injections=None, batch_size: int = 256,
              strategy: str = "greedy", beam_width: int = 4) -> list[list[int]]:
    if strategy == "beam":
        return [model.generate(s, "beam", beam_width, None if injections is None else injections[i])
                for i, s in enumerate(sources)]
    out: list[list[int]] = [None] * len(sources)  # type: ignore[list-item]
    order = np.argsort([len(s) for s in sources], kind="stable")
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        inj = None if injections is None else [injections[i] for i in idx]
        for i, seq in zip(idx, model.generate_batch([sources[i] for i in idx], inj)):
            out[i] = seq
    return out


def evaluate(model: Seq2SeqModel, pairs: list[EncodedPair], tgt_tok: Tokenizer, injections=None,
             references: list[list[str]] | None = None, fingerprint: str = "", **decode) -> EvalReport:
    hyps = translate(model, [p.src for p in pairs], injections, **decode)
    hyp_tokens = [tgt_tok.decode(h) for h in hyps]
    refs = references if references is not None else [tgt_tok.decode(p.tgt) for p in pairs]
    return evaluate_translations(hyp_tokens, refs, fingerprint)
