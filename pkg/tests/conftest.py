import numpy as np
import pytest

from attrsim.autodiff import make_rng
from attrsim.transformer import ModelConfig, Seq2SeqModel

# one "criterion N: PASS/FAIL ..." line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(src_vocab_size=12, tgt_vocab_size=11, d_model=16, n_encoder_layers=1,
                       n_decoder_layers=2, n_heads=2, d_ff=24, max_length=8)


@pytest.fixture
def tiny_model(tiny_config):
    return Seq2SeqModel(tiny_config, seed=3)


def random_ids(rng, n, vocab, low=4):
    """Token ids that avoid the special symbols, plus a trailing EOS."""
    return np.concatenate([rng.integers(low, vocab, n), [2]]).astype(np.int64)


def tiny_experiment(**overrides) -> dict:
    """A complete experiment small enough to run every stage in seconds."""
    doc = {
        "name": "tiny",
        "task": {"vocab_size": 12, "min_length": 2, "max_length": 5, "n_train": 60, "n_valid": 12, "n_test": 8,
                 "model_max_length": 8},
        "model": {"d_model": 16, "n_heads": 2, "n_encoder_layers": 1, "n_decoder_layers": 1, "d_ff": 16,
                  "max_length": 8},
        "attributor": {"d_model": 16, "n_heads": 2, "n_encoder_layers": 1, "n_decoder_layers": 1, "d_ff": 16,
                       "gate_hidden": 8},
        "teacher_train": {"epochs": 2, "batch_size": 16, "lr": 3e-3},
        "student_train": {"epochs": 1, "batch_size": 16, "lr": 3e-3},
        "attributor_train": {"epochs": 1, "batch_size": 16, "lr": 3e-3},
        "teacher_accuracy_threshold": 0.0,
        "methods": ["saliency", "attention", "value_zeroing"],
        "method_config": {"ig_steps": 2, "shap_samples": 2},
        "subset": {"train": 40, "valid": 10, "test": 8},
    }
    doc.update(overrides)
    return doc
