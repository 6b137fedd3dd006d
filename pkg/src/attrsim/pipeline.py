"""Experiment orchestration: corpus, teacher, extraction, students, attributors, report.

Every stage reads its inputs from and writes its outputs to one run
directory, and records what it produced in the run manifest, so stages
can be re-run independently (e.g. students from persisted attribution
files without touching the teacher).
"""

from __future__ import annotations

import copy
import logging
import os
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import autodiff as ad
from .attribution import MethodConfig, PairContext, attribute_all
from .attributor import (AttributorConfig, AttributorExample, evaluate_attributor, gold_rows,
                         train_attributor)
from .data import (Corpus, ParallelExample, SyntheticTaskSpec, Tokenizer, corpus_filter, generate_corpus,
                   gold_map_matrix, map_tokens, read_corpus, write_corpus)
from .injection import InjectionConfig, diagonal_matrix, minmax_columns, orient_and_pad
from .io import (AttributionRecord, RunManifest, file_digest, fingerprint, read_attribution_file, read_json,
                 write_attribution_file, write_json)
from .maps import METHOD_LABELS, METHODS, AttributionMap
from .metrics import EvalReport, column_entropy, correlate, format_delta
from .training import TrainConfig
from .translation import EncodedPair, evaluate, token_accuracy, train_translation, translate
from .transformer import ModelConfig, Seq2SeqModel

log = logging.getLogger(__name__)

ENV_OUTPUT_ROOT = "ATTRSIM_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"
SPLITS = ("train", "valid", "test")
SANITY_SOURCES = ("random", "diagonal")
MAP_SOURCES = METHODS + SANITY_SOURCES + ("gold",)
HEAD_MASKS = ("all", "every-other")
APPROX_METRICS = ("mean_kl", "overlap_at_k", "tau_at_k")
GRID_FIELDS = ("name", "output_dir", "seeds", "target_origin", "methods", "operators", "sites", "head_masks")


class PipelineError(RuntimeError):
    pass


# -- configuration ------------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    name: str = "desk"
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    corpus_dir: str | None = None  # external corpus (write_corpus layout) instead of a synthetic task
    filter_min_len: int = 1
    filter_max_ratio: float = 1.7
    model: dict = field(default_factory=dict)  # ModelConfig overrides shared by teacher and students
    teacher_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=30, lr=1e-3, patience=3))
    teacher_accuracy_threshold: float = 0.95
    student_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=2, lr=1e-3, patience=3))
    attributor: dict = field(default_factory=dict)  # AttributorConfig overrides
    attributor_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, lr=1e-3, patience=3))
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    method_config: MethodConfig = field(default_factory=MethodConfig)
    operators: list[str] = field(default_factory=lambda: ["multiply"])
    sites: list[str] = field(default_factory=lambda: ["encoder-self"])
    head_masks: list[str] = field(default_factory=lambda: ["all"])
    target_origin: str = "gold"
    seeds: list[int] = field(default_factory=lambda: [0])
    teacher_seed: int = 0
    subset: dict = field(default_factory=dict)  # split -> number of pairs used after the teacher stage
    decoding: str = "greedy"
    beam_width: int = 4
    output_dir: str | None = None

    def __post_init__(self):
        if self.target_origin not in ("gold", "teacher-generated"):
            raise ValueError(f"unknown target origin {self.target_origin!r}")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        for hm in self.head_masks:
            if hm not in HEAD_MASKS:
                raise ValueError(f"unknown head mask {hm!r}; expected one of {HEAD_MASKS}")
        for split in self.subset:
            if split not in SPLITS:
                raise ValueError(f"unknown split {split!r} in subset")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        self.injection_grid()  # validates operators and sites

    def injection_grid(self) -> list[InjectionConfig]:
        n_heads = self.model_config(8, 8).n_heads
        grid = []
        for op in self.operators:
            for site in self.sites:
                for hm in self.head_masks:
                    grid.append(make_injection(op, site, hm, n_heads, self.model_config(8, 8).max_length))
        return grid

    def model_config(self, src_vocab: int, tgt_vocab: int) -> ModelConfig:
        return ModelConfig(src_vocab_size=src_vocab, tgt_vocab_size=tgt_vocab, **self.model)

    def to_dict(self) -> dict:
        d = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            if isinstance(v, (SyntheticTaskSpec, MethodConfig)):
                v = v.to_dict()
            elif isinstance(v, TrainConfig):
                v = v.to_dict()
            d[k] = copy.deepcopy(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        if isinstance(d.get("task"), dict):
            d["task"] = SyntheticTaskSpec.from_dict(d["task"])
        if isinstance(d.get("method_config"), dict):
            d["method_config"] = MethodConfig.from_dict(d["method_config"])
        for key in ("teacher_train", "student_train", "attributor_train"):
            if isinstance(d.get(key), dict):
                base = getattr(cls(), key).to_dict()
                base.update(d[key])
                d[key] = TrainConfig(**base)
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        """Read a YAML (or JSON) experiment document."""
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: experiment config must be a mapping")
        return cls.from_dict(doc)

    def fingerprint(self) -> str:
        """Hash of the fields that shape artifact contents.

        Grid selectors (seeds, origin, methods, injection axes) are left out:
        each artifact records them as manifest tags instead.
        """
        d = self.to_dict()
        for k in GRID_FIELDS:
            d.pop(k, None)
        return fingerprint(d)


def make_injection(operator: str, site: str, head_mask: str, n_heads: int, max_length: int) -> InjectionConfig:
    mask = None if head_mask == "all" else InjectionConfig.every_other_head(n_heads)
    return InjectionConfig(operator, site, mask, max_length)


def injection_tag(inj: InjectionConfig | None) -> str:
    if inj is None:
        return "none"
    hm = "all" if inj.head_mask is None or all(inj.head_mask) else "".join("1" if h else "0" for h in inj.head_mask)
    return f"{inj.operator}-{inj.site}-{hm}"


def resolve_output_root(explicit: str | None = None, cfg: ExperimentConfig | None = None) -> Path:
    """CLI flag, then the environment variable, then the config, then ./runs."""
    for candidate in (explicit, os.environ.get(ENV_OUTPUT_ROOT), cfg.output_dir if cfg else None):
        if candidate:
            return Path(candidate)
    return Path(DEFAULT_OUTPUT_ROOT)


# -- the run directory --------------------------------------------------------------------------


@dataclass
class CorpusBundle:
    corpus: Corpus
    src_tok: Tokenizer
    tgt_tok: Tokenizer

    def pairs(self, split: str, limit: int | None = None) -> list[ParallelExample]:
        exs = self.corpus.splits()[split]
        return exs if limit is None else exs[:limit]


class Run:
    """A run directory plus the experiment config that owns it."""

    def __init__(self, cfg: ExperimentConfig, output_root=None):
        self.cfg = cfg
        self.root = resolve_output_root(None if output_root is None else str(output_root), cfg).resolve()
        self.dir = self.root / cfg.name
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(self.dir)
        self.fp = cfg.fingerprint()
        cfg_path = self.dir / "config.json"
        if cfg_path.exists():
            stored = read_json(cfg_path)
            if stored.get("fingerprint") != self.fp:
                log.warning("run %s was created with a different config (%s != %s)", self.dir,
                            stored.get("fingerprint"), self.fp)
        write_json(cfg_path, {"fingerprint": self.fp, "config": cfg.to_dict()})
        self._bundle: CorpusBundle | None = None

    # paths
    @property
    def corpus_dir(self) -> Path:
        return self.dir / "corpus"

    @property
    def teacher_path(self) -> Path:
        return self.dir / "teacher" / "teacher.ckpt"

    def attribution_path(self, method: str, origin: str) -> Path:
        return self.dir / "attributions" / origin / f"{method}.jsonl"

    def targets_path(self, origin: str) -> Path:
        return self.dir / "attributions" / origin / "targets.json"

    def student_dir(self, source: str, inj: InjectionConfig | None, seed: int, origin: str) -> Path:
        if source == "none":
            return self.dir / "students" / origin / "none" / f"seed{seed}"
        return self.dir / "students" / origin / source / injection_tag(inj) / f"seed{seed}"

    def attributor_dir(self, method: str, seed: int, origin: str) -> Path:
        return self.dir / "attributors" / origin / method / f"seed{seed}"

    def subset(self, split: str) -> int | None:
        return self.cfg.subset.get(split)

    # corpus
    def corpus(self) -> CorpusBundle:
        if self._bundle is None:
            self._bundle = prepare_corpus(self)
        return self._bundle

    def pair_ids(self, split: str) -> list[str]:
        n = len(self.corpus().pairs(split, self.subset(split)))
        return [f"{split}-{i:06d}" for i in range(n)]


def prepare_corpus(run: Run) -> CorpusBundle:
    cfg = run.cfg
    vocab_path = run.corpus_dir / "vocab.json"
    if (run.corpus_dir / "corpus.json").exists() and vocab_path.exists():
        corpus = read_corpus(run.corpus_dir)
        vocab = read_json(vocab_path)
        return CorpusBundle(corpus, Tokenizer.from_list(vocab["source"]), Tokenizer.from_list(vocab["target"]))
    if cfg.corpus_dir is not None:
        src_dir = Path(cfg.corpus_dir)
        if not (src_dir / "corpus.json").exists():
            raise FileNotFoundError(f"corpus not found: {src_dir} has no corpus.json")
        corpus = read_corpus(src_dir)
        corpus = Corpus(*(corpus_filter(exs, cfg.filter_min_len, cfg.filter_max_ratio)
                          for exs in (corpus.train, corpus.valid, corpus.test)), corpus.spec)
    else:
        corpus = generate_corpus(cfg.task)
    src_tok = Tokenizer.build(e.source for e in corpus.train)
    tgt_tok = Tokenizer.build(e.target for e in corpus.train)
    path = write_corpus(corpus, run.corpus_dir)
    write_json(vocab_path, {"source": src_tok.to_list(), "target": tgt_tok.to_list()})
    run.manifest.append("corpus", run.fp, {"corpus": path, "vocab": vocab_path},
                        {k: len(v) for k, v in corpus.splits().items()})
    return CorpusBundle(corpus, src_tok, tgt_tok)


def _encode(bundle: CorpusBundle, sources: list[list[str]], targets: list[list[str]]) -> list[EncodedPair]:
    return [EncodedPair(bundle.src_tok.encode(s), bundle.tgt_tok.encode(t)) for s, t in zip(sources, targets)]


# -- teacher ------------------------------------------------------------------------------------


def train_teacher(run: Run) -> dict:
    cfg = run.cfg
    bundle = run.corpus()
    train = _encode(bundle, [e.source for e in bundle.corpus.train], [e.target for e in bundle.corpus.train])
    valid = _encode(bundle, [e.source for e in bundle.corpus.valid], [e.target for e in bundle.corpus.valid])
    if not train:
        raise PipelineError("training split is empty")
    model = Seq2SeqModel(cfg.model_config(len(bundle.src_tok), len(bundle.tgt_tok)), seed=cfg.teacher_seed)
    tcfg = TrainConfig(**{**cfg.teacher_train.to_dict(), "seed": cfg.teacher_seed})
    t0 = time.time()
    result = train_translation(model, train, valid, tcfg)
    acc = token_accuracy(model, valid) if valid else float("nan")
    metrics = {"valid_token_accuracy": acc, "train_loss": result.train_loss, "valid_loss": result.valid_loss,
               "best_epoch": result.best_epoch, "seconds": round(time.time() - t0, 1), "warnings": []}
    if not acc >= cfg.teacher_accuracy_threshold:
        msg = f"teacher validation token accuracy {acc:.3f} is below the threshold {cfg.teacher_accuracy_threshold}"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        metrics["warnings"].append(msg)
    run.teacher_path.parent.mkdir(parents=True, exist_ok=True)
    model.save(run.teacher_path)
    write_json(run.teacher_path.with_name("train.json"), metrics)
    run.manifest.append("train-teacher", run.fp, {"teacher": run.teacher_path},
                        {"valid_token_accuracy": acc, "best_epoch": result.best_epoch})
    return metrics


def load_teacher(run: Run) -> Seq2SeqModel:
    if not run.teacher_path.exists():
        raise PipelineError(f"no teacher checkpoint at {run.teacher_path}; run train-teacher first")
    return Seq2SeqModel.load(run.teacher_path)


# -- extraction ---------------------------------------------------------------------------------


def _generated_targets(run: Run, teacher: Seq2SeqModel) -> dict[str, list[list[str]]]:
    """Teacher outputs (words, no EOS) for every pair of the working subset, cached on disk."""
    path = run.targets_path("teacher-generated")
    if path.exists():
        return read_json(path)
    bundle = run.corpus()
    out = {}
    max_words = teacher.config.max_length - 1
    for split in SPLITS:
        exs = bundle.pairs(split, run.subset(split))
        if not exs:
            out[split] = []
            continue
        hyps = translate(teacher, [bundle.src_tok.encode(e.source) for e in exs],
                         strategy=run.cfg.decoding, beam_width=run.cfg.beam_width)
        out[split] = [bundle.tgt_tok.decode(h)[:max_words] for h in hyps]
    write_json(path, out)
    return out


def targets_for(run: Run, origin: str) -> dict[str, list[list[str]]]:
    bundle = run.corpus()
    if origin == "gold":
        return {s: [e.target for e in bundle.pairs(s, run.subset(s))] for s in SPLITS}
    path = run.targets_path(origin)
    if not path.exists():
        raise PipelineError(f"no teacher-generated targets at {path}; run extract with that origin first")
    return read_json(path)


def extract(run: Run, methods: list[str] | None = None, origin: str | None = None) -> dict[str, Path]:
    """Attribute every pair of the working subset with each method; one file per method."""
    cfg = run.cfg
    methods = list(methods or cfg.methods)
    origin = origin or cfg.target_origin
    teacher = load_teacher(run)
    bundle = run.corpus()
    targets = _generated_targets(run, teacher) if origin == "teacher-generated" else targets_for(run, "gold")
    records: dict[str, list[AttributionRecord]] = {m: [] for m in methods}
    skipped: dict[str, int] = {m: 0 for m in methods}
    teacher_id = file_digest(run.teacher_path)
    t0 = time.time()
    n_done = 0
    for split_idx, split in enumerate(SPLITS):
        exs = bundle.pairs(split, run.subset(split))
        for i, (ex, tgt) in enumerate(zip(exs, targets[split])):
            pair_id = f"{split}-{i:06d}"
            ctx = PairContext(bundle.src_tok.encode(ex.source), bundle.tgt_tok.encode(tgt),
                              map_tokens(ex.source), map_tokens(tgt),
                              {"teacher": teacher_id,
                               "target_origin": origin, "pair_id": pair_id})
            for m in methods:
                rng = ad.make_rng([cfg.teacher_seed, 17, split_idx, i, METHODS.index(m)])
                try:
                    amap = attribute_all([m], teacher, ctx, cfg.method_config, rng)[m]
                except Exception as e:  # noqa: BLE001 - a failing pair is skipped, not fatal
                    log.warning("extraction of %s failed on %s: %s", m, pair_id, e)
                    skipped[m] += 1
                    continue
                records[m].append(AttributionRecord(pair_id, origin, amap))
            n_done += 1
            if n_done % 200 == 0:
                log.info("extracted %d pairs (%.0fs)", n_done, time.time() - t0)
    paths = {}
    for m in methods:
        path = run.attribution_path(m, origin)
        write_attribution_file(path, records[m])
        paths[m] = path
        run.manifest.append("extract", run.fp, {"attributions": path},
                            {"records": len(records[m]), "skipped": skipped[m]},
                            {"method": m, "origin": origin})
    return paths


# -- maps for students and attributors ------------------------------------------------------------


def load_method_maps(run: Run, method: str, origin: str) -> dict[str, dict[str, AttributionMap]]:
    """Raw maps of one method split by split; error when any working-subset pair is missing."""
    path = run.attribution_path(method, origin)
    if not path.exists():
        raise PipelineError(f"no attribution file for {method!r} ({origin}); run extract first")
    records = read_attribution_file(path)
    out = {}
    for split in SPLITS:
        ids = run.pair_ids(split)
        missing = [pid for pid in ids if pid not in records]
        if missing:
            raise PipelineError(f"{path} lacks records for {len(missing)} pairs (e.g. {missing[0]})")
        out[split] = {pid: records[pid].map for pid in ids}
    return out


def source_matrices(run: Run, source: str, origin: str, seed: int) -> dict[str, list[np.ndarray]]:
    """Un-normalised j x k maps per split for a method, oracle or sanity source."""
    bundle = run.corpus()
    targets = targets_for(run, origin)
    out: dict[str, list[np.ndarray]] = {}
    if source in METHODS:
        maps = load_method_maps(run, source, origin)
        return {s: [maps[s][pid].matrix for pid in run.pair_ids(s)] for s in SPLITS}
    for split_idx, split in enumerate(SPLITS):
        exs = bundle.pairs(split, run.subset(split))
        shapes = [(len(e.source) + 1, len(t) + 1) for e, t in zip(exs, targets[split])]
        if source == "gold":
            if origin != "gold":
                raise PipelineError("gold-alignment maps only exist for reference targets")
            out[split] = [gold_map_matrix(e) for e in exs]
        elif source == "random":
            rng = ad.make_rng([seed, 23, split_idx])
            out[split] = [rng.random(shape) for shape in shapes]
        elif source == "diagonal":
            out[split] = [diagonal_matrix(*shape) for shape in shapes]
        else:
            raise ValueError(f"unknown map source {source!r}; expected one of {MAP_SOURCES}")
    return out


def injection_matrices(matrices: list[np.ndarray], inj: InjectionConfig) -> list[np.ndarray]:
    return [orient_and_pad(minmax_columns(m), inj.site, inj.max_length) for m in matrices]


# -- students -------------------------------------------------------------------------------------


@dataclass
class StudentResult:
    report: EvalReport
    checkpoint: Path
    train_loss: list[float]
    valid_loss: list[float]


def _student_train_cfg(run: Run, seed: int) -> TrainConfig:
    return TrainConfig(**{**run.cfg.student_train.to_dict(), "seed": seed})


def _fit_student(run: Run, source: str, inj: InjectionConfig | None, seed: int, origin: str,
                 maps: dict[str, list[np.ndarray]] | None = None):
    bundle = run.corpus()
    targets = targets_for(run, origin)
    enc = {s: _encode(bundle, [e.source for e in bundle.pairs(s, run.subset(s))], targets[s]) for s in SPLITS}
    if inj is not None:
        if maps is None:
            maps = source_matrices(run, source, origin, seed)
        injected = {s: injection_matrices(maps[s], inj) for s in SPLITS}
    else:
        injected = {s: None for s in SPLITS}
    model = Seq2SeqModel(run.cfg.model_config(len(bundle.src_tok), len(bundle.tgt_tok)), seed=seed, injection=inj)
    result = train_translation(model, enc["train"], enc["valid"], _student_train_cfg(run, seed),
                               injected["train"], injected["valid"])
    refs = [list(t) for t in targets["test"]]
    report = evaluate(model, enc["test"], bundle.tgt_tok, injected["test"], references=refs,
                      fingerprint=run.fp, strategy=run.cfg.decoding, beam_width=run.cfg.beam_width)
    return model, result, report


def _store_student(run, source, inj, seed, origin, model, result, report) -> StudentResult:
    d = run.student_dir(source, inj, seed, origin)
    d.mkdir(parents=True, exist_ok=True)
    ckpt = d / "student.ckpt"
    model.save(ckpt)
    rec = {"source": source, "origin": origin, "seed": seed, "injection": None if inj is None else inj.to_dict(),
           "report": report.to_dict(), "train_loss": result.train_loss, "valid_loss": result.valid_loss}
    path = write_json(d / "report.json", rec)
    tags = {"source": source, "origin": origin, "seed": seed, "injection": injection_tag(inj)}
    run.manifest.append("train-student", run.fp, {"student": ckpt, "report": path},
                        {"bleu": report.bleu, "chrf": report.chrf, "delta_bleu": report.delta_bleu,
                         "delta_chrf": report.delta_chrf}, tags)
    return StudentResult(report, ckpt, result.train_loss, result.valid_loss)


def baseline_report(run: Run, seed: int, origin: str | None = None) -> EvalReport:
    """The uninjected student for (seed, origin), trained on demand and cached."""
    origin = origin or run.cfg.target_origin
    path = run.student_dir("none", None, seed, origin) / "report.json"
    if path.exists():
        rec = read_json(path)
        if rec["report"].get("fingerprint") == run.fp:
            return EvalReport(**rec["report"])
    model, result, report = _fit_student(run, "none", None, seed, origin)
    _store_student(run, "none", None, seed, origin, model, result, report)
    return report


def train_student(run: Run, source: str, inj: InjectionConfig | None = None, seed: int | None = None,
                  origin: str | None = None, maps: dict[str, list[np.ndarray]] | None = None) -> StudentResult:
    """Train and evaluate a student fed by ``source`` maps ("none" = baseline).

    The report's deltas refer to the baseline with the same seed, corpus and
    model/training config. ``maps`` may supply raw matrices directly.
    """
    seed = run.cfg.seeds[0] if seed is None else seed
    origin = origin or run.cfg.target_origin
    if source == "none":
        base = baseline_report(run, seed, origin)
        base.with_baseline("none", base)
        d = run.student_dir("none", None, seed, origin)
        rec = read_json(d / "report.json")
        return StudentResult(base, d / "student.ckpt", rec["train_loss"], rec["valid_loss"])
    if inj is None:
        inj = run.cfg.injection_grid()[0]
    if source not in MAP_SOURCES and maps is None:
        raise ValueError(f"unknown map source {source!r}")
    base = baseline_report(run, seed, origin)
    model, result, report = _fit_student(run, source, inj, seed, origin, maps)
    report.with_baseline(f"none/seed{seed}", base)
    return _store_student(run, source, inj, seed, origin, model, result, report)


def evaluate_student(run: Run, checkpoint, source: str, seed: int | None = None, origin: str | None = None) -> EvalReport:
    """Re-evaluate a stored student checkpoint on the test subset."""
    seed = run.cfg.seeds[0] if seed is None else seed
    origin = origin or run.cfg.target_origin
    model = Seq2SeqModel.load(checkpoint)
    bundle = run.corpus()
    targets = targets_for(run, origin)
    exs = bundle.pairs("test", run.subset("test"))
    enc = _encode(bundle, [e.source for e in exs], targets["test"])
    inj = None
    if model.injection is not None:
        if source == "none":
            raise PipelineError("checkpoint expects injected maps; give their source")
        inj = injection_matrices(source_matrices(run, source, origin, seed)["test"], model.injection)
    report = evaluate(model, enc, bundle.tgt_tok, inj, references=[list(t) for t in targets["test"]],
                      fingerprint=run.fp, strategy=run.cfg.decoding, beam_width=run.cfg.beam_width)
    if source != "none":
        report.with_baseline(f"none/seed{seed}", baseline_report(run, seed, origin))
    return report


def sanity(run: Run, kinds=SANITY_SOURCES, inj: InjectionConfig | None = None, seeds=None,
           origin: str | None = None) -> dict[str, list[StudentResult]]:
    seeds = run.cfg.seeds if seeds is None else seeds
    out = {}
    for kind in kinds:
        if kind not in SANITY_SOURCES:
            raise ValueError(f"unknown sanity map kind {kind!r}")
        out[kind] = [train_student(run, kind, inj, s, origin) for s in seeds]
    return out


# -- attributors ------------------------------------------------------------------------------------


def attributor_examples(run: Run, matrices: dict[str, list[np.ndarray]], origin: str) -> dict[str, list[AttributorExample]]:
    bundle = run.corpus()
    targets = targets_for(run, origin)
    out = {}
    for split in SPLITS:
        exs = bundle.pairs(split, run.subset(split))
        out[split] = [AttributorExample(bundle.src_tok.encode(e.source), bundle.tgt_tok.encode(t), gold_rows(m))
                      for e, t, m in zip(exs, targets[split], matrices[split])]
    return out


def train_attributor_stage(run: Run, method: str, seed: int | None = None, origin: str | None = None) -> dict:
    """Fit an Attributor to one method's maps and score it on the test subset."""
    seed = run.cfg.seeds[0] if seed is None else seed
    origin = origin or run.cfg.target_origin
    bundle = run.corpus()
    data = attributor_examples(run, source_matrices(run, method, origin, seed), origin)
    acfg = AttributorConfig(len(bundle.src_tok), len(bundle.tgt_tok),
                            **{"max_length": run.cfg.model_config(8, 8).max_length, **run.cfg.attributor})
    budget = TrainConfig(**{**run.cfg.attributor_train.to_dict(), "seed": seed})
    fitted = train_attributor(data["train"], data["valid"], acfg, budget, seed=seed)
    stats = evaluate_attributor(fitted.model, data["test"])
    d = run.attributor_dir(method, seed, origin)
    d.mkdir(parents=True, exist_ok=True)
    ckpt = d / "attributor.ckpt"
    fitted.model.save(ckpt)
    summary = {"method": method, "origin": origin, "seed": seed, "initial_valid_kl": fitted.initial_valid_kl,
               "curves": fitted.curves, "best_epoch": fitted.result.best_epoch,
               "stats": {k: v for k, v in stats.to_dict().items() if k != "column_entropies"}}
    path = write_json(d / "stats.json", summary)
    run.manifest.append("train-attributor", run.fp, {"attributor": ckpt, "stats": path},
                        summary["stats"], {"method": method, "origin": origin, "seed": seed})
    return summary


# -- report ---------------------------------------------------------------------------------------


def _median(xs):
    return float(np.median(xs)) if len(xs) else float("nan")


def entropy_summary(run: Run, method: str, origin: str, split: str = "test") -> dict:
    """Per-pair mean column entropy of raw maps: median and mean over the split."""
    maps = load_method_maps(run, method, origin)[split]
    per_pair = [float(column_entropy(m.matrix).mean()) for m in maps.values()]
    return {"method": method, "origin": origin, "split": split, "n_pairs": len(per_pair),
            "median_entropy": _median(per_pair), "mean_entropy": float(np.mean(per_pair)) if per_pair else None}


def _latest_by_tags(run: Run, stage: str, keys: tuple[str, ...]) -> list:
    seen = {}
    for entry in run.manifest.entries():
        if entry.stage == stage and entry.fingerprint == run.fp:
            seen[tuple(str(entry.tags.get(k)) for k in keys)] = entry
    return list(seen.values())


def collect_records(run: Run) -> dict:
    students = []
    for e in _latest_by_tags(run, "train-student", ("source", "origin", "seed", "injection")):
        rec = read_json(run.manifest.resolve(e.artifacts["report"]))
        inj = rec["injection"] or {}
        students.append({"source": rec["source"], "origin": rec["origin"], "seed": rec["seed"],
                         "injection": e.tags["injection"], "operator": inj.get("operator"), "site": inj.get("site"),
                         "bleu": rec["report"]["bleu"], "chrf": rec["report"]["chrf"],
                         "delta_bleu": rec["report"]["delta_bleu"], "delta_chrf": rec["report"]["delta_chrf"]})
    attributors = []
    for e in _latest_by_tags(run, "train-attributor", ("method", "origin", "seed")):
        s = read_json(run.manifest.resolve(e.artifacts["stats"]))
        attributors.append({"method": s["method"], "origin": s["origin"], "seed": s["seed"], **s["stats"]})
    entropy = []
    for e in _latest_by_tags(run, "extract", ("method", "origin")):
        try:
            entropy.append(entropy_summary(run, e.tags["method"], e.tags["origin"]))
        except PipelineError as err:
            log.warning("entropy summary skipped: %s", err)
    return {"students": students, "attributors": attributors, "entropy": entropy}


def correlations(records: dict) -> tuple[list[dict], list[str]]:
    """BLEU (median over seeds) vs Attributor metrics across methods, per injection setting."""
    notices = []
    out = []
    approx: dict[tuple[str, str], dict[str, float]] = {}
    for a in records["attributors"]:
        approx.setdefault((a["origin"], a["method"]), {})
        for m in APPROX_METRICS:
            approx[(a["origin"], a["method"])].setdefault(m, []).append(a[m])
    groups: dict[tuple[str, str], dict[str, list[float]]] = {}
    for s in records["students"]:
        if s["source"] in METHODS:
            groups.setdefault((s["origin"], s["injection"]), {}).setdefault(s["source"], []).append(s["bleu"])
    for (origin, inj), by_method in sorted(groups.items()):
        methods = sorted(m for m in by_method if (origin, m) in approx)
        if len(methods) < 3:
            notices.append(f"correlation omitted for {origin}/{inj}: {len(methods)} method(s) with both "
                           "student and Attributor results (need >= 3)")
            continue
        bleu = [_median(by_method[m]) for m in methods]
        for metric in APPROX_METRICS:
            ys = [_median(approx[(origin, m)][metric]) for m in methods]
            row = {"origin": origin, "injection": inj, "metric": metric, "methods": methods, "n_methods": len(methods)}
            for kind in ("pearson", "spearman"):
                try:
                    row[kind] = correlate(bleu, ys, kind)
                except ValueError as err:
                    row[kind] = None
                    notices.append(f"{kind} undefined for {origin}/{inj}/{metric}: {err}")
            out.append(row)
    return out, notices


def _format_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    line = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()  # noqa: E731
    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(r) for r in rows])


def score_tables(records: dict, metric: str = "bleu") -> str:
    """One table per (origin, site, head mask): operators down, map sources across."""
    delta_key = "delta_" + metric
    blocks = []
    students = records["students"]
    baselines: dict[str, list[float]] = {}
    for s in students:
        if s["source"] == "none":
            baselines.setdefault(s["origin"], []).append(s[metric])
    groups: dict[tuple[str, str], dict] = {}
    for s in students:
        if s["source"] == "none":
            continue
        op, rest = s["injection"].split("-", 1)
        groups.setdefault((s["origin"], rest), {}).setdefault(op, {}).setdefault(s["source"], []).append(s)
    order = [m for m in MAP_SOURCES]
    for (origin, setting), by_op in sorted(groups.items()):
        sources = [m for m in order if any(m in d for d in by_op.values())]
        header = ["op"] + [METHOD_LABELS.get(m, m) for m in sources]
        rows = []
        for op in sorted(by_op):
            row = [op]
            for m in sources:
                runs = by_op[op].get(m, [])
                if not runs:
                    row.append("-")
                    continue
                deltas = [r[delta_key] for r in runs if r[delta_key] is not None]
                row.append(format_delta(_median([r[metric] for r in runs]), _median(deltas) if deltas else None))
            rows.append(row)
        base = _median(baselines.get(origin, []))
        blocks.append(f"{metric.upper()} | origin={origin} | {setting} | baseline {base:.2f}\n"
                      + _format_table(header, rows))
    return "\n\n".join(blocks) if blocks else f"(no student results for {metric})"


def report(run: Run) -> dict:
    """Emit text tables and machine-readable records for everything in the manifest."""
    records = collect_records(run)
    corr, notices = correlations(records)
    records["correlations"] = corr
    records["notices"] = notices
    parts = [score_tables(records, "bleu"), score_tables(records, "chrf")]
    if records["attributors"]:
        rows = [[a["method"], a["origin"], str(a["seed"]), f"{a['mean_kl']:.4f}", f"{a['overlap_at_k']:.3f}",
                 f"{a['tau_at_k']:.3f}"] for a in sorted(records["attributors"], key=lambda a: (a["origin"], a["method"], a["seed"]))]
        parts.append("ATTRIBUTOR\n" + _format_table(["method", "origin", "seed", "KL", "overlap@3", "tau@3"], rows))
    if records["entropy"]:
        rows = [[e["method"], e["origin"], f"{e['median_entropy']:.4f}", str(e["n_pairs"])]
                for e in sorted(records["entropy"], key=lambda e: (e["origin"], e["median_entropy"]))]
        parts.append("COLUMN ENTROPY (raw maps, nats)\n" + _format_table(["method", "origin", "median", "pairs"], rows))
    if corr:
        rows = [[c["origin"], c["injection"], c["metric"], str(c["n_methods"]),
                 "n/a" if c["pearson"] is None else f"{c['pearson']:+.3f}",
                 "n/a" if c["spearman"] is None else f"{c['spearman']:+.3f}"] for c in corr]
        parts.append("CORRELATION (student BLEU vs Attributor metric)\n"
                     + _format_table(["origin", "injection", "metric", "n", "pearson", "spearman"], rows))
    if notices:
        parts.append("NOTICES\n" + "\n".join(f"- {n}" for n in notices))
    text = "\n\n".join(parts) + "\n"
    out_dir = run.dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "tables.txt").write_text(text, encoding="utf-8")
    rec_path = write_json(out_dir / "records.json", records)
    run.manifest.append("report", run.fp, {"tables": out_dir / "tables.txt", "records": rec_path},
                        {"n_students": len(records["students"]), "n_attributors": len(records["attributors"]),
                         "n_correlations": len(corr)})
    records["text"] = text
    return records


def run_all(run: Run) -> dict:
    """The full grid: teacher, extraction, students, sanity maps, attributors and report."""
    cfg = run.cfg
    if not run.teacher_path.exists():
        train_teacher(run)
    extract(run)
    for inj in cfg.injection_grid():
        for seed in cfg.seeds:
            for m in cfg.methods:
                train_student(run, m, inj, seed)
            for kind in SANITY_SOURCES:
                train_student(run, kind, inj, seed)
    for seed in cfg.seeds:
        for m in cfg.methods:
            train_attributor_stage(run, m, seed)
    return report(run)
