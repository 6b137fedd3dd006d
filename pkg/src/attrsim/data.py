"""Synthetic parallel corpora with exact alignments, tokenisation and filters."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import make_rng
from .transformer import BOS, EOS, PAD, UNK

log = logging.getLogger(__name__)

SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
REORDER_RULES = ("identity", "reverse", "adjacent-swap")


@dataclass
class ParallelExample:
    source: list[str]
    target: list[str]
    alignment: np.ndarray | None = None  # (len(source), len(target)) 0/1

    def __post_init__(self):
        if self.alignment is not None:
            self.alignment = np.asarray(self.alignment, dtype=np.float64)
            if self.alignment.shape != (len(self.source), len(self.target)):
                raise ValueError("alignment shape does not match token counts")


@dataclass
class Corpus:
    train: list[ParallelExample]
    valid: list[ParallelExample]
    test: list[ParallelExample]
    spec: "SyntheticTaskSpec | None" = None

    def splits(self) -> dict[str, list[ParallelExample]]:
        return {"train": self.train, "valid": self.valid, "test": self.test}


class Tokenizer:
    """Whitespace-token vocabulary with PAD/BOS/EOS/UNK at ids 0-3."""

    def __init__(self, tokens=()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {s: i for i, s in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    @classmethod
    def build(cls, sentences) -> "Tokenizer":
        tok = cls()
        for s in sentences:
            for t in s:
                tok.add(t)
        return tok

    def encode(self, tokens, add_eos: bool = True) -> list[int]:
        ids = [self.stoi.get(t, UNK) for t in tokens]
        return ids + [EOS] if add_eos else ids

    def decode(self, ids, strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.itos[i] if 0 <= i < len(self.itos) else SPECIALS[UNK])
        return out

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: list[str]) -> "Tokenizer":
        if tuple(itos[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary does not start with the special tokens")
        return cls(itos[len(SPECIALS):])


@dataclass
class SyntheticTaskSpec:
    vocab_size: int = 64
    reorder: str = "adjacent-swap"
    min_length: int = 4
    max_length: int = 12
    n_train: int = 8000
    n_valid: int = 1000
    n_test: int = 1000
    seed: int = 0
    model_max_length: int = 16
    lexicon: list[int] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.reorder not in REORDER_RULES:
            raise ValueError(f"unknown reorder rule {self.reorder!r}")
        if not 1 <= self.min_length <= self.max_length:
            raise ValueError("need 1 <= min_length <= max_length")
        if self.max_length > self.model_max_length - 2:
            raise ValueError("max_length must leave room for BOS/EOS within the model length")
        if self.lexicon is None:
            self.lexicon = [int(i) for i in make_rng([self.seed, 1]).permutation(self.vocab_size)]
        if sorted(self.lexicon) != list(range(self.vocab_size)):
            raise ValueError("lexicon must be a bijection over the vocabulary")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def reorder_permutation(n: int, rule: str) -> np.ndarray:
    """``perm[t]`` is the source position that target position ``t`` copies."""
    if rule == "identity":
        return np.arange(n)
    if rule == "reverse":
        return np.arange(n)[::-1].copy()
    if rule == "adjacent-swap":
        perm = np.arange(n)
        for i in range(0, n - 1, 2):
            perm[i], perm[i + 1] = i + 1, i
        return perm
    raise ValueError(f"unknown reorder rule {rule!r}")


def source_word(i: int) -> str:
    return f"s{i}"


def target_word(i: int) -> str:
    return f"t{i}"


def _sample(spec: SyntheticTaskSpec, rng: np.random.Generator) -> ParallelExample:
    n = int(rng.integers(spec.min_length, spec.max_length + 1))
    src = rng.integers(0, spec.vocab_size, n)
    perm = reorder_permutation(n, spec.reorder)
    tgt = [spec.lexicon[int(src[p])] for p in perm]
    align = np.zeros((n, n))
    align[perm, np.arange(n)] = 1.0
    return ParallelExample([source_word(int(s)) for s in src], [target_word(t) for t in tgt], align)


def generate_corpus(spec: SyntheticTaskSpec) -> Corpus:
    rng = make_rng([spec.seed, 2])
    make = lambda n: [_sample(spec, rng) for _ in range(n)]  # noqa: E731
    return Corpus(make(spec.n_train), make(spec.n_valid), make(spec.n_test), spec)


def corpus_filter(examples: list[ParallelExample], min_len: int = 1, max_ratio: float = 1.7) -> list[ParallelExample]:
    if min_len <= 0 or max_ratio <= 0:
        raise ValueError("filter thresholds must be positive")
    kept = []
    for ex in examples:
        a, b = len(ex.source), len(ex.target)
        if a < min_len or b < min_len:
            continue
        if max(a / b, b / a) > max_ratio:
            continue
        kept.append(ex)
    if examples and not kept:
        warnings.warn("corpus filter removed every example", RuntimeWarning, stacklevel=2)
    return kept


def load_parallel_text(source_path, target_path) -> list[ParallelExample]:
    src = Path(source_path).read_text(encoding="utf-8").splitlines()
    tgt = Path(target_path).read_text(encoding="utf-8").splitlines()
    if len(src) != len(tgt):
        raise ValueError(f"line count mismatch: {len(src)} source vs {len(tgt)} target lines")
    return [ParallelExample(s.split(), t.split()) for s, t in zip(src, tgt)]


def write_parallel_text(examples: list[ParallelExample], source_path, target_path) -> None:
    Path(source_path).write_text("".join(" ".join(e.source) + "\n" for e in examples), encoding="utf-8")
    Path(target_path).write_text("".join(" ".join(e.target) + "\n" for e in examples), encoding="utf-8")


def gold_map_matrix(example: ParallelExample) -> np.ndarray:
    """Gold alignment over map tokens (words plus a trailing EOS on both sides)."""
    if example.alignment is None:
        raise ValueError("example carries no gold alignment")
    j, k = example.alignment.shape
    m = np.zeros((j + 1, k + 1))
    m[:j, :k] = example.alignment
    m[j, k] = 1.0
    return m


def map_tokens(tokens: list[str]) -> list[str]:
    return list(tokens) + [SPECIALS[EOS]]


def write_corpus(corpus: Corpus, directory) -> Path:
    """Write line-aligned split files, alignments and a manifest; return the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, exs in corpus.splits().items():
        write_parallel_text(exs, d / f"{name}.src", d / f"{name}.tgt")
        if exs and all(e.alignment is not None for e in exs):
            lines = [" ".join(f"{i}-{t}" for i, t in zip(*np.nonzero(e.alignment))) for e in exs]
            (d / f"{name}.align").write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest = {
        "format": "attrsim-corpus",
        "version": 1,
        "spec": None if corpus.spec is None else corpus.spec.to_dict(),
        "sizes": {k: len(v) for k, v in corpus.splits().items()},
    }
    path = d / "corpus.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def read_corpus(directory) -> Corpus:
    d = Path(directory)
    if not (d / "corpus.json").exists():
        raise FileNotFoundError(f"no corpus manifest in {d}")
    manifest = json.loads((d / "corpus.json").read_text(encoding="utf-8"))
    splits = {}
    for name in ("train", "valid", "test"):
        exs = load_parallel_text(d / f"{name}.src", d / f"{name}.tgt")
        align_path = d / f"{name}.align"
        if align_path.exists():
            for ex, line in zip(exs, align_path.read_text(encoding="utf-8").splitlines()):
                a = np.zeros((len(ex.source), len(ex.target)))
                for pair in line.split():
                    i, t = pair.split("-")
                    a[int(i), int(t)] = 1.0
                ex.alignment = a
        splits[name] = exs
    spec = manifest.get("spec")
    return Corpus(splits["train"], splits["valid"], splits["test"],
                  None if spec is None else SyntheticTaskSpec.from_dict(spec))
