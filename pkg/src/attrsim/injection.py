"""Normalising attribution maps and composing them with attention scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, affine_const
from .maps import AttributionMap

OPERATORS = ("add", "multiply", "average", "replace")
SITES = ("encoder-self", "cross")


@dataclass(frozen=True)
class InjectionConfig:
    operator: str = "multiply"
    site: str = "encoder-self"
    head_mask: tuple[bool, ...] | None = None  # None: every head
    max_length: int = 16

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ValueError(f"unknown operator {self.operator!r}; expected one of {OPERATORS}")
        if self.site not in SITES:
            raise ValueError(f"unknown site {self.site!r}; expected one of {SITES}")
        if self.head_mask is not None:
            object.__setattr__(self, "head_mask", tuple(bool(h) for h in self.head_mask))
            if not any(self.head_mask):
                raise ValueError("head mask must select at least one head")

    def heads(self, n_heads: int) -> np.ndarray:
        if self.head_mask is None:
            return np.ones(n_heads, dtype=bool)
        if len(self.head_mask) != n_heads:
            raise ValueError(f"head mask has {len(self.head_mask)} entries for {n_heads} heads")
        return np.array(self.head_mask, dtype=bool)

    @staticmethod
    def every_other_head(n_heads: int) -> tuple[bool, ...]:
        return tuple(h % 2 == 0 for h in range(n_heads))

    def to_dict(self) -> dict:
        return {
            "operator": self.operator,
            "site": self.site,
            "head_mask": None if self.head_mask is None else list(self.head_mask),
            "max_length": self.max_length,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InjectionConfig":
        hm = d.get("head_mask")
        return cls(d["operator"], d["site"], None if hm is None else tuple(hm), d.get("max_length", 16))


def minmax_columns(matrix: np.ndarray) -> np.ndarray:
    """Column-wise min-max scaling; constant columns become zeros."""
    m = np.asarray(matrix, dtype=np.float64)
    lo = m.min(axis=0, keepdims=True)
    span = m.max(axis=0, keepdims=True) - lo
    const = span <= 0
    out = (m - lo) / np.where(const, 1.0, span)
    out[:, const[0]] = 0.0
    return out


def minmax_normalize_columns(amap: AttributionMap) -> AttributionMap:
    out = amap.with_matrix(minmax_columns(amap.matrix), normalized=True)
    out.provenance["normalization"] = "minmax-columns"
    return out


def orient_and_pad(matrix: np.ndarray, site: str, max_length: int) -> np.ndarray:
    """Place a normalised j x k map in an L x L matrix for the given site.

    Encoder site keeps source rows and target columns; cross site transposes
    so row t lines up with decoder step t.
    """
    m = np.asarray(matrix, dtype=np.float64)
    j, k = m.shape
    if j > max_length or k > max_length:
        raise ValueError(f"map {m.shape} exceeds max length {max_length}")
    if site not in SITES:
        raise ValueError(f"unknown site {site!r}")
    if site == "cross":
        m = m.T
    out = np.zeros((max_length, max_length))
    out[: m.shape[0], : m.shape[1]] = m
    return out


def composition_coefficients(injection: np.ndarray, operator: str, heads: np.ndarray):
    """Return (scale, shift) with composed scores = scores * scale + shift.

    ``injection`` has shape (B, Tq, Tk); the results have shape
    (B, H, Tq, Tk). Heads outside the mask get scale 1, shift 0.
    """
    e = np.asarray(injection, dtype=np.float64)[:, None, :, :]
    hm = np.asarray(heads, dtype=np.float64)[None, :, None, None]
    if operator == "add":
        scale, shift = np.ones_like(hm), hm * e
    elif operator == "multiply":
        scale, shift = 1.0 - hm + hm * e, np.zeros_like(hm)
    elif operator == "average":
        scale, shift = 1.0 - 0.5 * hm, 0.5 * hm * e
    elif operator == "replace":
        scale, shift = 1.0 - hm, hm * e
    else:
        raise ValueError(f"unknown operator {operator!r}")
    shape = np.broadcast_shapes(scale.shape, shift.shape)
    return np.broadcast_to(scale, shape), np.broadcast_to(shift, shape)


def compose(scores: Tensor, injection: np.ndarray, operator: str, heads: np.ndarray | None = None) -> Tensor:
    """Apply an injection operator to pre-softmax scores of shape (B, H, Tq, Tk)."""
    b, h, tq, tk = scores.shape
    injection = np.asarray(injection, dtype=np.float64)
    if injection.ndim == 2:
        injection = injection[None]
    if injection.shape[-2:] != (tq, tk) or injection.shape[0] not in (1, b):
        raise ShapeError("compose", scores.shape, injection.shape)
    heads = np.ones(h, dtype=bool) if heads is None else np.asarray(heads, dtype=bool)
    if heads.shape != (h,):
        raise ShapeError("compose", scores.shape, heads.shape)
    scale, shift = composition_coefficients(injection, operator, heads)
    return affine_const(scores, scale, shift)


def make_random_map(j: int, k: int, rng: np.random.Generator) -> AttributionMap:
    if j < 1 or k < 1:
        raise ValueError("map dimensions must be positive")
    return AttributionMap([f"s{i}" for i in range(j)], [f"t{i}" for i in range(k)], "random",
                          rng.random((j, k)))


def diagonal_matrix(j: int, k: int) -> np.ndarray:
    if j < 1 or k < 1:
        raise ValueError("map dimensions must be positive")
    m = np.zeros((j, k))
    for t in range(k):
        centre = int(np.clip(np.floor((t + 0.5) * j / k), 0, j - 1))
        m[centre, t] = 1.0
        for i in (centre - 1, centre + 1):
            if 0 <= i < j:
                m[i, t] = 0.5
    return m


def make_diagonal_map(j: int, k: int) -> AttributionMap:
    return AttributionMap([f"s{i}" for i in range(j)], [f"t{i}" for i in range(k)], "diagonal",
                          diagonal_matrix(j, k))
