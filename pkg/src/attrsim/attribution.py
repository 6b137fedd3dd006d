"""Source x target attribution maps from a frozen teacher.

Gradient methods produce a (j, k, l) array of per-dimension scores, one
column per target step, which :func:`aggregate_l2` reduces to (j, k).
A step's score is the teacher-forced logit (or log-probability) of the
reference token. Each step needs its own backward pass; rows of one batched
forward pass carry different steps, so a single backward covers all columns.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .maps import METHODS, AttributionMap
from .transformer import BOS, Seq2SeqModel

log = logging.getLogger(__name__)

GRADIENT_METHODS = (
    "saliency",
    "input_x_gradient",
    "layer_gradient_x_activation",
    "integrated_gradients",
    "gradient_shap",
    "deeplift",
)


@dataclass
class MethodConfig:
    ig_steps: int = 32
    ig_baseline: str = "zero"
    shap_samples: int = 32
    shap_noise: float = 0.05  # noise std as a multiple of the embedding RMS
    shap_baselines: tuple[str, ...] = ("zero",)
    shap_alpha: float | None = None  # fixed interpolation point instead of U(0, 1)
    deeplift_baseline: str = "zero"
    target_score: str = "logit"
    lgxa_layer: int = -1  # -1: final (normalised) encoder output
    batch_rows: int = 384

    def __post_init__(self):
        if self.ig_steps < 1 or self.shap_samples < 1:
            raise ValueError("step and sample counts must be >= 1")
        if self.shap_noise < 0:
            raise ValueError("noise scale must be >= 0")
        if not self.shap_baselines:
            raise ValueError("baseline pool is empty")
        if self.target_score not in ("logit", "logprob"):
            raise ValueError(f"unknown target score {self.target_score!r}")
        for b in (self.ig_baseline, self.deeplift_baseline, *self.shap_baselines):
            if b not in BASELINES:
                raise ValueError(f"unknown baseline {b!r}")
        self.shap_baselines = tuple(self.shap_baselines)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shap_baselines"] = list(self.shap_baselines)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MethodConfig":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "shap_baselines" in d:
            d["shap_baselines"] = tuple(d["shap_baselines"])
        return cls(**d)


BASELINES: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "zero": np.zeros_like,
    "mean": lambda x: np.broadcast_to(x.mean(axis=0, keepdims=True), x.shape).copy(),
}


class AttributionError(RuntimeError):
    pass


class Scorer(Protocol):
    """What gradient methods need from a model."""

    n_steps: int

    def embeddings(self) -> np.ndarray: ...

    def __call__(self, emb: Tensor, steps: np.ndarray) -> Tensor: ...


class TeacherScorer:
    """Per-step target scores of a seq2seq teacher as a function of source embeddings."""

    def __init__(self, model: Seq2SeqModel, src_ids, tgt_ids, target_score: str = "logit", layer: int = -1):
        self.model = model
        self.src = np.asarray(src_ids, dtype=np.int64)
        self.tgt = np.asarray(tgt_ids, dtype=np.int64)
        self.tgt_in = np.concatenate([[BOS], self.tgt[:-1]])
        self.n_steps = len(self.tgt)
        self.target_score = target_score
        self.layer = layer
        self.hidden: Tensor | None = None

    def embeddings(self) -> np.ndarray:
        return self.model.embed_source(self.src)

    def __call__(self, emb: Tensor, steps: np.ndarray) -> Tensor:
        n = emb.shape[0]
        src = np.broadcast_to(self.src, (n, self.src.size))
        tgt_in = np.broadcast_to(self.tgt_in, (n, self.tgt_in.size))
        hidden: list[Tensor] = []
        memory = self.model.encode_batch(src, src_embeddings=emb, hidden=hidden)
        self.hidden = memory if self.layer == -1 else hidden[self.layer]
        logits, _ = self.model.decode_batch(memory, src, tgt_in)
        rows = ad.getitem(logits, (np.arange(n), steps))
        if self.target_score == "logprob":
            rows = ad.log_softmax(rows)
        return ad.gather_last(rows, self.tgt[steps])

    def score(self, emb: np.ndarray) -> np.ndarray:
        """All k step scores for one embedding matrix, without gradients."""
        with ad.no_grad():
            e = Tensor(np.broadcast_to(emb, (self.n_steps, *emb.shape)))
            return self(e, np.arange(self.n_steps)).data


class LinearScorer:
    """Score ``sum(w * emb)`` for every step; handy as an analytic test probe."""

    def __init__(self, weights, embeddings, n_steps: int = 1):
        self.w = np.asarray(weights, dtype=np.float64)
        self.x = np.asarray(embeddings, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        self.w = self.w.reshape(self.x.shape)
        self.n_steps = n_steps
        self.hidden: Tensor | None = None

    def embeddings(self) -> np.ndarray:
        return self.x

    def __call__(self, emb: Tensor, steps: np.ndarray) -> Tensor:
        self.hidden = emb
        return ad.tsum(emb * self.w, axis=(1, 2))

    def score(self, emb: np.ndarray) -> np.ndarray:
        return np.full(self.n_steps, float((self.w * emb).sum()))


def aggregate_l2(per_dim: np.ndarray) -> np.ndarray:
    """(j, k, l) -> (j, k) Euclidean norm over the last axis."""
    per_dim = np.asarray(per_dim, dtype=np.float64)
    if per_dim.ndim != 3 or per_dim.shape[-1] < 1:
        raise ValueError(f"expected a (j, k, l) array, got {per_dim.shape}")
    return np.sqrt((per_dim * per_dim).sum(axis=-1))


# -- gradient plumbing --------------------------------------------------------------------


def _gradients(scorer, points: np.ndarray, steps: np.ndarray, batch_rows: int, want_hidden: bool = False):
    """Gradient of step ``steps[n]``'s score at ``points[n]`` for every row n."""
    grads = np.empty_like(points)
    hid = hgrad = None
    for start in range(0, len(points), batch_rows):
        sl = slice(start, start + batch_rows)
        emb = Tensor(points[sl], requires_grad=True)
        with ad.Tape() as tape:
            out = scorer(emb, steps[sl])
        try:
            g = ad.backward(tape, out)
        except ad.NonFiniteGradientError as e:
            raise AttributionError(f"non-finite gradient for target step(s) {sorted(set(steps[sl].tolist()))}: {e}") from e
        grads[sl] = g[emb]
        if want_hidden:
            h = scorer.hidden
            if hid is None:
                hid = np.empty((len(points), *h.shape[1:]))
                hgrad = np.empty_like(hid)
            hid[sl] = h.data
            hgrad[sl] = g[h]
    return grads, hid, hgrad


def _to_jkl(rows: np.ndarray, k: int) -> np.ndarray:
    """(k, j, l) step-major rows -> (j, k, l)."""
    return np.transpose(rows.reshape(k, *rows.shape[1:]), (1, 0, 2))


def _per_step_base(scorer, cfg):
    x = scorer.embeddings()
    k = scorer.n_steps
    return x, k, np.broadcast_to(x, (k, *x.shape)).copy(), np.arange(k)


def saliency_per_dim(scorer, cfg: MethodConfig) -> np.ndarray:
    x, k, pts, steps = _per_step_base(scorer, cfg)
    g, _, _ = _gradients(scorer, pts, steps, cfg.batch_rows)
    return _to_jkl(np.abs(g), k)


def input_x_gradient_per_dim(scorer, cfg: MethodConfig) -> np.ndarray:
    x, k, pts, steps = _per_step_base(scorer, cfg)
    g, _, _ = _gradients(scorer, pts, steps, cfg.batch_rows)
    return _to_jkl(g * x, k)


def layer_gradient_x_activation_per_dim(scorer, cfg: MethodConfig) -> np.ndarray:
    x, k, pts, steps = _per_step_base(scorer, cfg)
    _, h, hg = _gradients(scorer, pts, steps, cfg.batch_rows, want_hidden=True)
    return _to_jkl(h * hg, k)


def integrated_gradients_per_dim(scorer, cfg: MethodConfig) -> np.ndarray:
    """Midpoint Riemann sum of the path integral, signed, shape (j, k, l)."""
    x = scorer.embeddings()
    k, m = scorer.n_steps, cfg.ig_steps
    base = BASELINES[cfg.ig_baseline](x)
    alphas = (np.arange(m) + 0.5) / m
    path = base[None] + alphas[:, None, None] * (x - base)[None]  # (m, j, l)
    pts = np.broadcast_to(path, (k, m, *x.shape)).reshape(k * m, *x.shape)
    steps = np.repeat(np.arange(k), m)
    g, _, _ = _gradients(scorer, pts, steps, cfg.batch_rows)
    avg = g.reshape(k, m, *x.shape).mean(axis=1)
    return _to_jkl(avg * (x - base)[None], k)


def gradient_shap_per_dim(scorer, cfg: MethodConfig, rng: np.random.Generator) -> np.ndarray:
    x = scorer.embeddings()
    k, n = scorer.n_steps, cfg.shap_samples
    sigma = cfg.shap_noise * float(np.sqrt((x * x).mean()))
    pool = [BASELINES[b](x) for b in cfg.shap_baselines]
    noisy = x[None, None] + rng.normal(0.0, 1.0, (k, n, *x.shape)) * sigma
    choice = rng.integers(0, len(pool), (k, n))
    base = np.stack(pool)[choice]
    if cfg.shap_alpha is None:
        alpha = rng.random((k, n))
    else:
        alpha = np.full((k, n), cfg.shap_alpha)
    delta = noisy - base
    pts = (base + alpha[..., None, None] * delta).reshape(k * n, *x.shape)
    g, _, _ = _gradients(scorer, pts, np.repeat(np.arange(k), n), cfg.batch_rows)
    contrib = (g.reshape(k, n, *x.shape) * delta).mean(axis=1)
    return _to_jkl(contrib, k)


def deeplift_per_dim(scorer, cfg: MethodConfig) -> np.ndarray:
    """Rescale-rule contributions ``(x - x') * m``; sums to S(x) - S(x') on linear/elementwise paths."""
    x, k, pts, steps = _per_step_base(scorer, cfg)
    base = BASELINES[cfg.deeplift_baseline](x)
    ref_pts = np.broadcast_to(base, pts.shape).copy()
    mult = np.empty_like(pts)
    for start in range(0, k, cfg.batch_rows):
        sl = slice(start, start + cfg.batch_rows)
        with ad.Tape() as ref_tape:
            scorer(Tensor(ref_pts[sl], requires_grad=True), steps[sl])
        emb = Tensor(pts[sl], requires_grad=True)
        with ad.Tape() as tape:
            out = scorer(emb, steps[sl])
        try:
            mult[sl] = ad.backward(tape, out, reference=ref_tape)[emb]
        except ad.NonFiniteGradientError as e:
            raise AttributionError(f"non-finite DeepLIFT multiplier: {e}") from e
    return _to_jkl(mult * (x - base)[None], k)


def per_dimension(method: str, scorer, cfg: MethodConfig | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    cfg = cfg or MethodConfig()
    if method == "saliency":
        return saliency_per_dim(scorer, cfg)
    if method == "input_x_gradient":
        return input_x_gradient_per_dim(scorer, cfg)
    if method == "layer_gradient_x_activation":
        return layer_gradient_x_activation_per_dim(scorer, cfg)
    if method == "integrated_gradients":
        return integrated_gradients_per_dim(scorer, cfg)
    if method == "gradient_shap":
        return gradient_shap_per_dim(scorer, cfg, rng if rng is not None else ad.make_rng(0))
    if method == "deeplift":
        return deeplift_per_dim(scorer, cfg)
    raise ValueError(f"{method!r} is not a gradient method")


# -- model-internal methods ---------------------------------------------------------------------


def attention_matrix(model: Seq2SeqModel, src_ids, tgt_ids) -> np.ndarray:
    """Cross-attention averaged over decoder layers and heads, (j, k)."""
    _, trace = model.forward_teacher_forced(src_ids, tgt_ids)
    if not trace.cross:
        raise AttributionError("forward pass produced no cross-attention trace")
    w = np.mean([rec.weights[0].mean(axis=0) for rec in trace.cross], axis=0)  # (k, j)
    return w.T.copy()


def _cosine_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    ok = (na > 0) & (nb > 0)
    cos = (a * b).sum(-1) / np.where(ok, na * nb, 1.0)
    return np.where(ok, 1.0 - np.clip(cos, -1.0, 1.0), 0.0)


def value_zeroing_matrix(model: Seq2SeqModel, src_ids, tgt_ids) -> np.ndarray:
    """Cosine distance of decoder-layer states after zeroing one source value vector, (j, k)."""
    src = np.asarray(src_ids, dtype=np.int64)
    tgt = np.asarray(tgt_ids, dtype=np.int64)
    tgt_in = np.concatenate([[BOS], tgt[:-1]])
    j, n_layers = len(src), model.config.n_decoder_layers
    n = n_layers * j
    zero = {}
    for layer in range(n_layers):
        z = np.zeros((n, j), bool)
        z[layer * j : (layer + 1) * j] = np.eye(j, dtype=bool)
        zero[layer] = z
    with ad.no_grad():
        ref = model.forward(src[None], tgt_in[None], with_trace=False)
        abl = model.forward(np.broadcast_to(src, (n, j)), np.broadcast_to(tgt_in, (n, len(tgt_in))),
                            zero_values=zero, with_trace=False)
    per_layer = []
    for layer in range(n_layers):
        orig = ref.decoder_states[layer].data[0]  # (k, d)
        ablated = abl.decoder_states[layer].data[layer * j : (layer + 1) * j]  # (j, k, d)
        per_layer.append(_cosine_distance(ablated, orig[None]))
    return np.mean(per_layer, axis=0)


# -- public entry points ---------------------------------------------------------------------------


@dataclass
class PairContext:
    """One (source, target) pair in token and id form, words plus EOS."""

    src_ids: list[int]
    tgt_ids: list[int]
    source_tokens: list[str]
    target_tokens: list[str]
    provenance: dict = field(default_factory=dict)


def _make_map(ctx: PairContext, method: str, matrix: np.ndarray, extra: dict) -> AttributionMap:
    prov = dict(ctx.provenance)
    prov.update(extra)
    return AttributionMap(ctx.source_tokens, ctx.target_tokens, method, matrix, False, prov)


def attribute(method: str, teacher: Seq2SeqModel, ctx: PairContext, cfg: MethodConfig | None = None,
              rng: np.random.Generator | None = None) -> AttributionMap:
    cfg = cfg or MethodConfig()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    with teacher.frozen():
        if method == "attention":
            return _make_map(ctx, method, attention_matrix(teacher, ctx.src_ids, ctx.tgt_ids), {})
        if method == "value_zeroing":
            return _make_map(ctx, method, value_zeroing_matrix(teacher, ctx.src_ids, ctx.tgt_ids), {})
        scorer = TeacherScorer(teacher, ctx.src_ids, ctx.tgt_ids, cfg.target_score, cfg.lgxa_layer)
        per_dim = per_dimension(method, scorer, cfg, rng)
    return _make_map(ctx, method, aggregate_l2(per_dim), {"target_score": cfg.target_score})


def attribute_all(methods, teacher: Seq2SeqModel, ctx: PairContext, cfg: MethodConfig | None = None,
                  rng: np.random.Generator | None = None) -> dict[str, AttributionMap]:
    """Several methods for one pair; saliency, IxG and LGxA share one backward pass."""
    cfg = cfg or MethodConfig()
    methods = list(methods)
    out: dict[str, AttributionMap] = {}
    shared = {"saliency", "input_x_gradient", "layer_gradient_x_activation"} & set(methods)
    if shared:
        with teacher.frozen():
            scorer = TeacherScorer(teacher, ctx.src_ids, ctx.tgt_ids, cfg.target_score, cfg.lgxa_layer)
            x, k, pts, steps = _per_step_base(scorer, cfg)
            g, h, hg = _gradients(scorer, pts, steps, cfg.batch_rows,
                                  want_hidden="layer_gradient_x_activation" in shared)
        extra = {"target_score": cfg.target_score}
        if "saliency" in shared:
            out["saliency"] = _make_map(ctx, "saliency", aggregate_l2(_to_jkl(np.abs(g), k)), extra)
        if "input_x_gradient" in shared:
            out["input_x_gradient"] = _make_map(ctx, "input_x_gradient", aggregate_l2(_to_jkl(g * x, k)), extra)
        if "layer_gradient_x_activation" in shared:
            out["layer_gradient_x_activation"] = _make_map(
                ctx, "layer_gradient_x_activation", aggregate_l2(_to_jkl(h * hg, k)), extra)
    for method in methods:
        if method not in out:
            out[method] = attribute(method, teacher, ctx, cfg, rng)
    return {m: out[m] for m in methods}
