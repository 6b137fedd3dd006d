"""Simulatability of attribution maps for seq2seq transformers.

A teacher translation model is explained by eight attribution methods; the
resulting source x target maps are injected into a student's attention and
judged by how much they help it, and an Attributor network measures how
learnable each method's maps are.
"""

from .attribution import MethodConfig, attribute, attribute_all
from .attributor import Attributor, AttributorConfig, evaluate_attributor, train_attributor
from .data import SyntheticTaskSpec, Tokenizer, generate_corpus
from .injection import InjectionConfig, compose, minmax_normalize_columns, orient_and_pad
from .maps import METHODS, AttributionMap
from .metrics import EvalReport, MapStats, chrf, corpus_bleu
from .pipeline import ExperimentConfig, Run
from .transformer import ModelConfig, Seq2SeqModel

__version__ = "0.1.0"

__all__ = [
    "METHODS",
    "AttributionMap",
    "Attributor",
    "AttributorConfig",
    "EvalReport",
    "ExperimentConfig",
    "InjectionConfig",
    "MapStats",
    "MethodConfig",
    "ModelConfig",
    "Run",
    "Seq2SeqModel",
    "SyntheticTaskSpec",
    "Tokenizer",
    "attribute",
    "attribute_all",
    "chrf",
    "compose",
    "corpus_bleu",
    "evaluate_attributor",
    "generate_corpus",
    "minmax_normalize_columns",
    "orient_and_pad",
    "train_attributor",
]
