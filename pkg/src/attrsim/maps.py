"""Attribution map container and method identifiers."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

METHODS = (
    "saliency",
    "input_x_gradient",
    "layer_gradient_x_activation",
    "integrated_gradients",
    "gradient_shap",
    "deeplift",
    "attention",
    "value_zeroing",
)

# short labels used in report tables
METHOD_LABELS = {
    "saliency": "Saliency",
    "input_x_gradient": "IxG",
    "layer_gradient_x_activation": "LGxA",
    "integrated_gradients": "IG",
    "gradient_shap": "GSHAP",
    "deeplift": "DeepLIFT",
    "attention": "Attention",
    "value_zeroing": "ValueZeroing",
    "gold": "Gold",
    "random": "Random",
    "diagonal": "Diagonal",
}


@dataclass
class AttributionMap:
    """Source x target importance matrix (rows are source tokens)."""

    source_tokens: list[str]
    target_tokens: list[str]
    method: str
    matrix: np.ndarray
    normalized: bool = False
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.source_tokens = list(self.source_tokens)
        self.target_tokens = list(self.target_tokens)
        j, k = len(self.source_tokens), len(self.target_tokens)
        if self.matrix.shape != (j, k):
            raise ValueError(f"matrix shape {self.matrix.shape} does not match tokens ({j}, {k})")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError(f"{self.method} map has non-finite entries")

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def with_matrix(self, matrix: np.ndarray, **changes) -> "AttributionMap":
        return replace(self, matrix=matrix, provenance=dict(self.provenance), **changes)
