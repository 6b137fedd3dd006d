"""Acceptance criteria 1-10 at their stated tolerances.

Each test prints one ``criterion N: PASS/FAIL ...`` line (also repeated in the
terminal summary). Criteria that train models share session-scoped runs; set
``ATTRSIM_ACCEPTANCE_ROOT`` to keep those runs between sessions (stages whose
artifacts already exist are then reused instead of retrained).
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import rankdata

import oracles
from attrsim import autodiff as ad
from attrsim.attribution import MethodConfig, PairContext, TeacherScorer, attribute, per_dimension
from attrsim.autodiff import Tape, Tensor
from attrsim.data import gold_map_matrix, map_tokens
from attrsim.injection import InjectionConfig, minmax_columns
from attrsim.maps import METHODS
from attrsim.metrics import column_entropy, kendall_tau_at_k, overlap_at_k, pearson, rowwise_kl, spearman
from attrsim.pipeline import (ExperimentConfig, Run, collect_records, correlations, extract, load_teacher,
                              make_injection, train_attributor_stage, train_student, train_teacher)
from attrsim.transformer import BOS, PAD, Seq2SeqModel, pad_batch

from conftest import ACCEPTANCE_LINES

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

SEEDS = (0, 1, 2)
TEACHER_BUDGET = {"epochs": 8, "lr": 1e-3, "patience": 2}
# students for the ordering experiment: two passes over the 8k-pair corpus
STUDENT_BUDGET_6 = {"epochs": 2, "lr": 1e-3, "patience": 3}
# the correlation experiment works on a 2000/200/300 subset, so students get more epochs
STUDENT_BUDGET_9 = {"epochs": 8, "lr": 1e-3, "patience": 3}
ATTRIBUTOR_BUDGET = {"epochs": 10, "lr": 1e-3, "patience": 3}
SUBSET = {"train": 2000, "valid": 200, "test": 300}
N_METHOD_FAMILY_PAIRS = 200


def report(criterion: int, passed: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


# -- shared runs ----------------------------------------------------------------------------------


@pytest.fixture(scope="session")
def acceptance_root(tmp_path_factory) -> Path:
    env = os.environ.get("ATTRSIM_ACCEPTANCE_ROOT")
    return Path(env) if env else tmp_path_factory.mktemp("acceptance")


def _teacher_run(root: Path, seed: int, **extra) -> Run:
    cfg = ExperimentConfig.from_dict({"name": f"teacher-seed{seed}", "teacher_seed": seed,
                                      "teacher_train": TEACHER_BUDGET, **extra})
    run = Run(cfg, root)
    if not run.teacher_path.exists():
        train_teacher(run)
    return run


@pytest.fixture(scope="session")
def main_run(acceptance_root) -> Run:
    """Seed-0 teacher on the default adjacent-swap task, working subset for extraction."""
    return _teacher_run(acceptance_root, 0, subset=SUBSET, method_config={"ig_steps": 8, "shap_samples": 8},
                        student_train=STUDENT_BUDGET_9, attributor_train=ATTRIBUTOR_BUDGET)


@pytest.fixture(scope="session")
def teacher_runs(acceptance_root, main_run) -> dict[int, Run]:
    return {0: main_run, **{s: _teacher_run(acceptance_root, s) for s in SEEDS[1:]}}


@pytest.fixture(scope="session")
def attributor_results(main_run) -> dict:
    """Attributor summaries per method, filled lazily (criteria 8 and 9 share them)."""
    return {}


def _attributor(run: Run, cache: dict, method: str) -> dict:
    if method not in cache:
        if not run.attribution_path(method, "gold").exists():
            extract(run, [method])
        cache[method] = train_attributor_stage(run, method, seed=0)
    return cache[method]


def _contexts(run: Run, n: int) -> list[tuple]:
    bundle = run.corpus()
    out = []
    for ex in bundle.pairs("test", n):
        ctx = PairContext(bundle.src_tok.encode(ex.source), bundle.tgt_tok.encode(ex.target),
                          map_tokens(ex.source), map_tokens(ex.target))
        out.append((ex, ctx))
    return out


@pytest.fixture(scope="session")
def family_maps(teacher_runs) -> dict:
    """Attention, Value Zeroing and GradientSHAP maps (default settings) on test pairs, per teacher seed."""
    out = {}
    for seed, run in teacher_runs.items():
        teacher = load_teacher(run)
        maps = {m: [] for m in ("attention", "value_zeroing", "gradient_shap")}
        golds = []
        for i, (ex, ctx) in enumerate(_contexts(run, N_METHOD_FAMILY_PAIRS)):
            golds.append(gold_map_matrix(ex))
            for m in maps:
                rng = ad.make_rng([seed, 17, 2, i, METHODS.index(m)])
                maps[m].append(attribute(m, teacher, ctx, MethodConfig(), rng).matrix)
        out[seed] = {"gold": golds, **maps}
    return out


# -- 1: gradient correctness ----------------------------------------------------------------------


def _central_difference(fn, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Fourth-order central stencil: truncation ~h^4, round-off ~1e-16/h, both far below the tolerance."""
    out = np.empty(x.size)
    flat = x.reshape(-1)

    def at(i, step):
        shifted = flat.copy()
        shifted[i] += step
        return fn(Tensor(shifted.reshape(x.shape))).item()

    for i in range(flat.size):
        out[i] = (-at(i, 2 * h) + 8 * at(i, h) - 8 * at(i, -h) + at(i, -2 * h)) / (12 * h)
    return out


def _random_network(r: np.random.Generator):
    """A random composition of the engine's ops mapping an (n, d) input to a scalar."""
    # widths >= 3: LayerNorm over two features is constant (+-1) and has no gradient to check
    n, d = int(r.integers(1, 4)), int(r.integers(3, 7))
    acts = [ad.swish, ad.gelu, ad.tanh, ad.sigmoid]
    layers = []
    width = d
    for _ in range(int(r.integers(1, 4))):
        out_w = int(r.integers(3, 7))
        layers.append((r.normal(size=(width, out_w)) / math.sqrt(width), r.normal(size=out_w) * 0.5,
                       acts[int(r.integers(len(acts)))], bool(r.random() < 0.5),
                       r.normal(size=out_w), r.normal(size=out_w) * 0.3))
        width = out_w
    attn = r.random() < 0.5
    wq, wk = r.normal(size=(d, 3)), r.normal(size=(d, 3))
    mask = np.where(np.tril(np.ones((n, n))) > 0, 0.0, ad.MASK_VALUE)
    head = r.normal(size=width)
    final = int(r.integers(3))

    def fn(x):
        h = x
        if attn:
            w = ad.softmax((x @ wq) @ ad.transpose(x @ wk) / math.sqrt(3), mask=mask)
            h = w @ x + x
        for w, b, act, norm, g, beta in layers:
            h = act(h @ w + b)
            if norm:
                h = ad.layer_norm(h, g, beta)
        if final == 0:
            return (h * head).sum()
        if final == 1:
            return (ad.log_softmax(h) * head).sum()
        return ad.cross_entropy(h, np.zeros(h.shape[0], dtype=np.int64))

    return fn, r.normal(size=(n, d))


def test_criterion_1_gradient_correctness():
    t0 = time.time()
    worst = 0.0
    for seed in range(100):
        fn, point = _random_network(ad.make_rng([1, seed]))
        x = Tensor(point, requires_grad=True)
        with Tape() as tape:
            out = fn(x)
        analytic = ad.backward(tape, out)[x].reshape(-1)
        central = _central_difference(fn, point)
        err = np.abs(analytic - central) / (np.abs(analytic) + np.abs(central) + 1e-12)
        worst = max(worst, float(err.max()))
    elapsed = time.time() - t0
    passed = worst < 1e-4 and elapsed < 60
    report(1, passed, f"max relative error {worst:.2e} over 100 networks (< 1e-4) in {elapsed:.1f}s (< 60s)")
    assert passed


# -- 2: IG completeness ---------------------------------------------------------------------------


def test_criterion_2_ig_completeness(main_run):
    teacher = load_teacher(main_run)
    pairs = _contexts(main_run, 50)
    t0 = time.time()
    worst = 0.0
    with teacher.frozen():
        for _, ctx in pairs:
            scorer = TeacherScorer(teacher, ctx.src_ids, ctx.tgt_ids)
            per = per_dimension("integrated_gradients", scorer, MethodConfig(ig_steps=256))
            x = scorer.embeddings()
            gap = scorer.score(x) - scorer.score(np.zeros_like(x))
            worst = max(worst, float(np.abs(per.sum(axis=(0, 2)) - gap).max()))
    elapsed = time.time() - t0
    passed = worst <= 1e-3 and elapsed < 120
    report(2, passed, f"max |sum(IG) - (S(x) - S(0))| = {worst:.2e} over 50 pairs x all steps (<= 1e-3), "
                      f"m=256, {elapsed:.1f}s (< 120s)")
    assert passed


# -- 3: injection identity laws -------------------------------------------------------------------


def test_criterion_3_injection_identity_laws(main_run):
    teacher = load_teacher(main_run)
    cfg = teacher.config
    bundle = main_run.corpus()
    exs = bundle.pairs("test", 16)
    src = pad_batch([bundle.src_tok.encode(e.source) for e in exs])
    tgt = [bundle.tgt_tok.encode(e.target) for e in exs]
    tgt_in = pad_batch([[BOS, *t[:-1]] for t in tgt])
    L = cfg.max_length
    b = src.shape[0]
    with ad.no_grad():
        plain = teacher.forward(src, tgt_in).logits.data

    def injected(operator, site, mask):
        m = Seq2SeqModel(cfg, injection=InjectionConfig(operator, site, mask, L))
        m.load_state_dict(teacher.state_dict())
        return m

    masks = [None, InjectionConfig.every_other_head(cfg.n_heads)]
    worst_identity = 0.0
    for site in ("encoder-self", "cross"):
        for mask in masks:
            for operator, fill in (("multiply", 1.0), ("add", 0.0)):
                with ad.no_grad():
                    out = injected(operator, site, mask).forward(src, tgt_in, injection=np.full((b, L, L), fill))
                worst_identity = max(worst_identity, float(np.abs(out.logits.data - plain).max()))

    worst_uniform = 0.0
    rng = ad.make_rng(3)
    for site in ("encoder-self", "cross"):
        with ad.no_grad():
            out = injected("replace", site, None).forward(src, tgt_in, injection=np.full((b, L, L), rng.random()))
        layers = out.trace.encoder if site == "encoder-self" else out.trace.cross
        keys = src != PAD  # both sites attend over source positions
        for rec in layers:
            w = rec.weights  # (B, H, Tq, Tk)
            uniform = keys[:, None, None, :] / keys.sum(axis=1)[:, None, None, None]
            rows = (src != PAD) if site == "encoder-self" else (tgt_in != PAD)
            diff = np.abs(w - uniform)[np.broadcast_to(rows[:, None, :, None], w.shape)]
            worst_uniform = max(worst_uniform, float(diff.max()))
    passed = worst_identity <= 1e-9 and worst_uniform <= 1e-6
    report(3, passed, f"identity max |dlogit| {worst_identity:.1e} (<= 1e-9); replace/uniform max weight "
                      f"deviation {worst_uniform:.1e} (<= 1e-6); both sites, all and every-other heads")
    assert passed


# -- 4: metric oracles ----------------------------------------------------------------------------


def _fixture(r: np.random.Generator) -> np.ndarray:
    # half the fixtures draw from a small integer range so ties are common
    return r.integers(0, 4, size=(6, 6)).astype(float) if r.random() < 0.5 else r.random((6, 6))


def test_criterion_4_metric_oracles():
    r = ad.make_rng(4)
    mismatches = {"overlap@3": 0, "tau@3": 0, "kl": 0, "pearson": 0, "spearman": 0, "ranks": 0}
    worst = 0.0
    for _ in range(1000):
        gold, pred = _fixture(r), _fixture(r)
        for t in range(6):
            if overlap_at_k(gold[:, t], pred[:, t], 3) != oracles.overlap(gold[:, t], pred[:, t], 3):
                mismatches["overlap@3"] += 1
            if kendall_tau_at_k(gold[:, t], pred[:, t], 3) != oracles.tau_at_k(gold[:, t], pred[:, t], 3):
                mismatches["tau@3"] += 1
        p = r.dirichlet(np.ones(6), 6)
        p[r.random((6, 6)) < 0.2] = 0.0
        p[:, 0] += 1e-3  # keep every row non-empty
        p /= p.sum(axis=1, keepdims=True)
        q = r.dirichlet(np.full(6, 0.3), 6)
        d = abs(rowwise_kl(p, q) - oracles.kl_rows(p.tolist(), q.tolist()))
        worst = max(worst, d)
        mismatches["kl"] += d > 1e-12
        x, y = gold.ravel(), pred.ravel()
        d = abs(pearson(x, y) - oracles.pearson(x, y))
        worst = max(worst, d)
        mismatches["pearson"] += d > 1e-12
        d = abs(spearman(x, y) - oracles.spearman(x, y))
        worst = max(worst, d)
        mismatches["spearman"] += d > 1e-12
        # the package ranks with scipy; ranks must agree exactly
        mismatches["ranks"] += list(rankdata(x)) != oracles.average_ranks(list(x))
    passed = not any(mismatches.values())
    report(4, passed, f"1000 fixtures; mismatches {mismatches}; worst float deviation {worst:.1e} (<= 1e-12); "
                      "overlap, tau and ranks compared exactly")
    assert passed


# -- 5: normalisation contract --------------------------------------------------------------------


def test_criterion_5_minmax_contract():
    r = ad.make_rng(5)
    failures = []
    for n in range(1000):
        j, k = int(r.integers(1, 13)), int(r.integers(1, 13))
        m = r.normal(size=(j, k)) * 10.0 ** r.integers(-6, 7)
        for c in np.flatnonzero(r.random(k) < 0.2):
            m[:, c] = r.normal()  # constant column
        out = minmax_columns(m)
        const = np.ptp(m, axis=0) == 0
        ok = (np.all((out >= 0) & (out <= 1))
              and np.all(out[:, const] == 0)
              and np.all(out[:, ~const].min(axis=0) == 0) and np.all(out[:, ~const].max(axis=0) == 1)
              and np.array_equal(minmax_columns(out), out)
              and all(np.allclose(out[:, c], oracles.minmax_column(m[:, c].tolist()), rtol=0, atol=1e-12)
                      for c in range(k)))
        if not ok:
            failures.append(n)
    passed = not failures
    report(5, passed, f"1000 maps: range, extremes, constant columns, idempotence, oracle; failures {failures[:5]}")
    assert passed


# -- 6: simulatability ordering -------------------------------------------------------------------


def test_criterion_6_simulatability_ordering(acceptance_root):
    t0 = time.time()
    run = Run(ExperimentConfig.from_dict({"name": "ordering", "student_train": STUDENT_BUDGET_6}), acceptance_root)
    mc = run.cfg.model_config(8, 8)
    inj = make_injection("multiply", "encoder-self", "all", mc.n_heads, mc.max_length)
    bleu = {"none": [], "gold": [], "random": []}
    for seed in SEEDS:
        for source in bleu:
            bleu[source].append(train_student(run, source, inj if source != "none" else None, seed=seed).report.bleu)
    med = {s: float(np.median(v)) for s, v in bleu.items()}
    elapsed = time.time() - t0
    a = med["gold"] >= med["none"] + 5
    b = med["random"] <= med["none"] + 1 and med["gold"] - med["random"] > 4
    passed = a and b and elapsed <= 3600
    per_seed = ", ".join(f"{s}={[round(x, 2) for x in v]}" for s, v in bleu.items())
    report(6, passed, f"median BLEU baseline {med['none']:.2f}, gold {med['gold']:.2f}, random {med['random']:.2f}; "
                      f"(a) gold >= baseline+5: {'PASS' if a else 'FAIL'}; (b) random <= baseline+1 and "
                      f"gold-random > 4: {'PASS' if b else 'FAIL'}; {elapsed:.0f}s; per seed {per_seed}")
    assert passed


# -- 7: method-family signal ----------------------------------------------------------------------


def _overlap_at_1(gold: np.ndarray, amap: np.ndarray) -> float:
    return float(np.mean([overlap_at_k(gold[:, t], amap[:, t], 1) for t in range(gold.shape[1])]))


def test_criterion_7_method_family_signal(family_maps):
    medians = {m: [] for m in ("attention", "value_zeroing", "gradient_shap")}
    for seed, maps in family_maps.items():
        for m in medians:
            medians[m].append(float(np.median([_overlap_at_1(g, a) for g, a in zip(maps["gold"], maps[m])])))
    agg = {m: float(np.median(v)) for m, v in medians.items()}
    passed = agg["attention"] > agg["gradient_shap"] and agg["value_zeroing"] > agg["gradient_shap"]
    report(7, passed, f"median overlap@1 vs gold (median of per-seed medians, {N_METHOD_FAMILY_PAIRS} test pairs x "
                      f"{len(family_maps)} teachers): attention {agg['attention']:.3f}, value zeroing "
                      f"{agg['value_zeroing']:.3f}, gradient SHAP {agg['gradient_shap']:.3f}; per seed {medians}")
    assert passed


# -- 8: Attributor learning -----------------------------------------------------------------------


def test_criterion_8_attributor_learns_attention(main_run, attributor_results):
    t0 = time.time()
    summary = _attributor(main_run, attributor_results, "attention")
    elapsed = time.time() - t0
    best = summary["curves"]["valid_kl"][summary["best_epoch"]]
    drop = 1 - best / summary["initial_valid_kl"]
    bundle = main_run.corpus()
    # a uniformly random top-3 shares min(3, j)^2 / j positions with the gold top-3 on average
    guess = float(np.mean([min(3, j) / j for j in (len(e.source) + 1 for e in bundle.pairs("test", SUBSET["test"]))]))
    overlap = summary["stats"]["overlap_at_k"]
    passed = drop >= 0.5 and overlap > 2 * guess and elapsed <= 900
    report(8, passed, f"valid KL {summary['initial_valid_kl']:.3f} -> {best:.3f} (drop {drop:.0%}, >= 50%); "
                      f"test overlap@3 {overlap:.3f} vs 2 x uniform guess {2 * guess:.3f}; {elapsed:.0f}s (<= 900s)")
    assert passed


# -- 9: approximability-utility correlation -------------------------------------------------------


def test_criterion_9_approximability_utility_correlation(main_run, attributor_results):
    missing = [m for m in METHODS if not main_run.attribution_path(m, "gold").exists()]
    if missing:
        extract(main_run, missing)
    inj = main_run.cfg.injection_grid()[0]
    for m in METHODS:
        train_student(main_run, m, inj, seed=0)
        _attributor(main_run, attributor_results, m)
    rows, notices = correlations(collect_records(main_run))
    row = next(r for r in rows if r["metric"] == "overlap_at_k" and r["injection"] == "multiply-encoder-self-all")
    records = collect_records(main_run)
    bleu = {s["source"]: s["bleu"] for s in records["students"] if s["injection"] == "multiply-encoder-self-all"}
    overlap = {a["method"]: a["overlap_at_k"] for a in records["attributors"]}
    pairs = ", ".join(f"{m} {bleu[m]:.1f}/{overlap[m]:.3f}" for m in row["methods"])
    passed = row["n_methods"] >= 6 and row["pearson"] is not None and row["pearson"] > 0.5 \
        and row["spearman"] is not None and row["spearman"] > 0
    report(9, passed, f"{row['n_methods']} methods, Pearson r {row['pearson']:.3f} (> 0.5), Spearman "
                      f"{row['spearman']:.3f} (> 0); BLEU/overlap@3: {pairs}")
    assert passed


# -- 10: entropy ordering -------------------------------------------------------------------------


def test_criterion_10_entropy_ordering(family_maps):
    maps = family_maps[0]
    med = {m: float(np.median([column_entropy(a).mean() for a in maps[m]]))
           for m in ("attention", "value_zeroing", "gradient_shap")}
    passed = med["attention"] < med["gradient_shap"] and med["value_zeroing"] < med["gradient_shap"]
    report(10, passed, f"median per-pair mean column entropy (nats) of raw maps, seed-0 teacher, "
                       f"{N_METHOD_FAMILY_PAIRS} test pairs: attention {med['attention']:.3f}, value zeroing "
                       f"{med['value_zeroing']:.3f}, gradient SHAP {med['gradient_shap']:.3f}")
    assert passed
