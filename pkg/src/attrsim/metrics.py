"""Translation metrics, attribution-map statistics and correlation helpers."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

KL_FLOOR = 1e-9


def _as_tokens(s) -> list[str]:
    return s.split() if isinstance(s, str) else list(s)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_statistics(hypotheses, references, max_order: int = 4):
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("empty corpus")
    correct = [0] * max_order
    total = [0] * max_order
    hyp_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        h, r = _as_tokens(h), _as_tokens(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_order + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            correct[n - 1] += sum((hc & rc).values())
            total[n - 1] += max(len(h) - n + 1, 0)
    return correct, total, hyp_len, ref_len


def corpus_bleu(hypotheses, references, max_order: int = 4) -> float:
    """Corpus BLEU in [0, 100] with add-one smoothing on orders 2 and up."""
    correct, total, hyp_len, ref_len = bleu_statistics(hypotheses, references, max_order)
    if hyp_len == 0 or correct[0] == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_order):
        c, t = correct[n], total[n]
        if n > 0:
            c, t = c + 1, t + 1
        log_p += math.log(c / t)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / max_order)


def sentence_bleu(hypothesis, reference, max_order: int = 4) -> float:
    return corpus_bleu([hypothesis], [reference], max_order)


def _chars(s) -> str:
    text = s if isinstance(s, str) else " ".join(s)
    return "".join(text.split())


def chrf_statistics(hypotheses, references, order: int = 6) -> list[list[int]]:
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ValueError("empty corpus")
    stats = [[0, 0, 0] for _ in range(order)]
    for h, r in zip(hypotheses, references):
        h, r = _chars(h), _chars(r)
        for n in range(1, order + 1):
            hc = Counter(h[i : i + n] for i in range(len(h) - n + 1))
            rc = Counter(r[i : i + n] for i in range(len(r) - n + 1))
            n_ref = sum(rc.values())
            # as in sacrebleu: a reference without n-grams of this order contributes no hypothesis count
            stats[n - 1][0] += sum(hc.values()) if n_ref > 0 else 0
            stats[n - 1][1] += n_ref
            stats[n - 1][2] += sum((hc & rc).values())
    return stats


def chrf(hypotheses, references, order: int = 6, beta: float = 2.0) -> float:
    """Corpus chrF in [0, 100]: averaged character n-gram precision/recall, F-beta."""
    stats = chrf_statistics(hypotheses, references, order)
    prec = rec = 0.0
    effective = 0
    for n_hyp, n_ref, n_match in stats:
        if n_hyp > 0 and n_ref > 0:
            prec += n_match / n_hyp
            rec += n_match / n_ref
            effective += 1
    if effective == 0:
        return 0.0
    prec /= effective
    rec /= effective
    if prec + rec == 0:
        return 0.0
    b2 = beta * beta
    return 100.0 * (1 + b2) * prec * rec / (b2 * prec + rec)


# -- attribution-map statistics -------------------------------------------------------


def column_distributions(matrix: np.ndarray) -> np.ndarray:
    """Columns rescaled to sum to one; zero-sum columns become uniform."""
    m = np.asarray(matrix, dtype=np.float64)
    if np.any(m < 0):
        raise ValueError("column distributions need non-negative entries")
    s = m.sum(axis=0, keepdims=True)
    zero = s <= 0
    out = m / np.where(zero, 1.0, s)
    out[:, zero[0]] = 1.0 / m.shape[0]
    return out


def column_entropy(matrix: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each column treated as a distribution."""
    p = column_distributions(matrix)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=0)


def top_k_indices(column: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values; ties go to the lower index."""
    column = np.asarray(column, dtype=np.float64)
    order = np.lexsort((np.arange(column.size), -column))
    return order[: min(k, column.size)]


def overlap_at_k(gold: np.ndarray, predicted: np.ndarray, k: int = 3) -> float:
    gold, predicted = np.asarray(gold), np.asarray(predicted)
    if gold.shape != predicted.shape:
        raise ValueError("columns differ in length")
    kk = min(k, gold.size)
    if kk == 0:
        return 0.0
    a = set(top_k_indices(gold, kk).tolist())
    b = set(top_k_indices(predicted, kk).tolist())
    return len(a & b) / kk


def kendall_tau_b(x: np.ndarray, y: np.ndarray) -> float:
    """Kendall's tau-b; 0 when either side is entirely tied."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.size < 2:
        return 0.0
    i, j = np.triu_indices(x.size, k=1)
    dx = np.sign(x[i] - x[j])
    dy = np.sign(y[i] - y[j])
    n0 = i.size
    n1 = int((dx == 0).sum())
    n2 = int((dy == 0).sum())
    denom = math.sqrt((n0 - n1) * (n0 - n2))
    if denom == 0:
        return 0.0
    return float((dx * dy).sum() / denom)


def kendall_tau_at_k(gold: np.ndarray, predicted: np.ndarray, k: int = 3) -> float:
    """Tau-b between gold and predicted values over the gold top-k indices."""
    gold, predicted = np.asarray(gold), np.asarray(predicted)
    if gold.shape != predicted.shape:
        raise ValueError("columns differ in length")
    idx = top_k_indices(gold, k)
    return kendall_tau_b(gold[idx], predicted[idx])


def rowwise_kl(gold: np.ndarray, predicted: np.ndarray, valid: np.ndarray | None = None,
               tol: float = 1e-6) -> float:
    """Mean over valid rows of KL(gold_row || predicted_row), q floored at 1e-9."""
    p = np.atleast_2d(np.asarray(gold, dtype=np.float64))
    q = np.atleast_2d(np.asarray(predicted, dtype=np.float64))
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    valid = np.ones(p.shape[0], bool) if valid is None else np.asarray(valid, bool)
    if not valid.any():
        raise ValueError("no valid rows")
    p, q = p[valid], q[valid]
    for name, m in (("gold", p), ("predicted", q)):
        if np.any(m < -tol) or np.any(np.abs(m.sum(axis=1) - 1.0) > tol):
            raise ValueError(f"{name} rows are not probability distributions")
    q = np.maximum(q, KL_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p / q), 0.0)
    return float(terms.sum(axis=1).mean())


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x, y = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.size < 3:
        raise ValueError("need two equal-length series of at least 3 points")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt((xc * xc).sum()), math.sqrt((yc * yc).sum())
    if sx == 0 or sy == 0:
        raise ValueError("pearson correlation undefined for a constant series")
    return float(np.clip((xc * yc).sum() / (sx * sy), -1.0, 1.0))


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    return pearson(rankdata(xs), rankdata(ys))


def correlate(xs, ys, kind: str = "pearson") -> float:
    if kind == "pearson":
        return pearson(xs, ys)
    if kind == "spearman":
        return spearman(xs, ys)
    raise ValueError(f"unknown correlation kind {kind!r}")


@dataclass
class MapStats:
    column_entropies: list[float] = field(default_factory=list)
    mean_entropy: float = 0.0
    overlap_at_k: float = 0.0
    tau_at_k: float = 0.0
    mean_kl: float = 0.0
    k: int = 3
    n_pairs: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalReport:
    bleu: float
    chrf: float
    baseline: str | None = None
    delta_bleu: float | None = None
    delta_chrf: float | None = None
    sentence_bleu: list[float] = field(default_factory=list)
    fingerprint: str = ""

    def __post_init__(self):
        if not (0.0 <= self.bleu <= 100.0 and 0.0 <= self.chrf <= 100.0):
            raise ValueError("scores must lie in [0, 100]")

    def with_baseline(self, name: str, base: "EvalReport") -> "EvalReport":
        self.baseline = name
        self.delta_bleu = self.bleu - base.bleu
        self.delta_chrf = self.chrf - base.chrf
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_translations(hypotheses, references, fingerprint: str = "") -> EvalReport:
    return EvalReport(
        bleu=corpus_bleu(hypotheses, references),
        chrf=chrf(hypotheses, references),
        sentence_bleu=[sentence_bleu(h, r) for h, r in zip(hypotheses, references)],
        fingerprint=fingerprint,
    )


def format_delta(score: float, delta: float | None) -> str:
    """Table cell in the ``score_Δ`` style, e.g. ``45.80_+20.0``."""
    if delta is None:
        return f"{score:.2f}"
    return f"{score:.2f}_{delta:+.1f}"
