import numpy as np
import pytest

from attrsim import autodiff as ad
from attrsim.attributor import (Attributor, AttributorConfig, AttributorExample, _batch, attributor_loss,
                                evaluate_attributor, gold_rows, score_maps, train_attributor)
from attrsim.autodiff import Tensor
from attrsim.metrics import overlap_at_k
from attrsim.training import TrainConfig
from attrsim.transformer import PAD, pad_batch

from conftest import random_ids


@pytest.fixture
def small_cfg():
    return AttributorConfig(src_vocab_size=12, tgt_vocab_size=11, d_model=16, n_encoder_layers=1,
                            n_decoder_layers=1, n_heads=4, d_ff=16, gate_hidden=8, max_length=8)


def _examples(rng, n, aligned=True):
    out = []
    for _ in range(n):
        j = int(rng.integers(2, 6))
        src = random_ids(rng, j, 12)
        tgt = np.concatenate([src[:-1] - 1, [2]])  # parallel toy target, same length
        gold = np.eye(j + 1) if aligned else rng.dirichlet(np.ones(j + 1), j + 1)
        out.append(AttributorExample(list(src), list(tgt), gold))
    return out


class TestForward:
    def test_rows_and_gates_are_distributions(self, small_cfg, rng):
        model = Attributor(small_cfg, seed=0)
        src = pad_batch([random_ids(rng, 4, 12), random_ids(rng, 2, 12)])
        tgt = pad_batch([random_ids(rng, 3, 11), random_ids(rng, 5, 11)])
        out = model.forward(src, tgt)
        assert out.matrix.shape == (2, 6, 5) and out.head_weights.shape == (2, 6, 4)
        np.testing.assert_allclose(out.matrix.sum(-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(out.head_weights.sum(-1), 1.0, atol=1e-12)
        assert np.all(out.matrix[1, :, 3:] < 1e-300)  # padded sources

    def test_mixture_of_head_scores(self, small_cfg, rng):
        model = Attributor(small_cfg, seed=0)
        src, tgt = random_ids(rng, 4, 12)[None], random_ids(rng, 3, 11)[None]
        out = model.forward(src, tgt)
        mixed = np.einsum("bkh,bhkj->bkj", out.head_weights, out.head_scores)
        np.testing.assert_allclose(out.logits.data, mixed, atol=1e-12)

    def test_row_t_ignores_later_target_tokens(self, small_cfg, rng):
        model = Attributor(small_cfg, seed=0)
        src = random_ids(rng, 4, 12)[None]
        a = model.forward(src, np.array([[5, 6, 7, 2]])).matrix
        b = model.forward(src, np.array([[5, 6, 9, 2]])).matrix
        np.testing.assert_allclose(a[:, :2], b[:, :2], atol=1e-12)
        assert not np.allclose(a[:, 2], b[:, 2])

    def test_input_validation(self, small_cfg):
        model = Attributor(small_cfg)
        with pytest.raises(ValueError, match="empty"):
            model.forward([[PAD, PAD]], [[5]])
        with pytest.raises(ValueError, match="vocabulary"):
            model.forward([[99]], [[5]])
        with pytest.raises(ValueError, match="batch"):
            model.forward([[5], [6]], [[5]])

    def test_checkpoint_round_trip(self, small_cfg, tmp_path, rng):
        model = Attributor(small_cfg, seed=4)
        model.save(tmp_path / "a.ckpt")
        back = Attributor.load(tmp_path / "a.ckpt")
        src, tgt = random_ids(rng, 3, 12), random_ids(rng, 3, 11)
        np.testing.assert_array_equal(model.predict(src, tgt), back.predict(src, tgt))


class TestLoss:
    def test_equals_rowwise_kl(self, rng):
        logits = rng.normal(size=(2, 3, 4))
        gold = rng.dirichlet(np.ones(4), (2, 3))
        gold[0, 0] = [1.0, 0, 0, 0]
        valid = np.array([[1, 1, 1], [1, 1, 0]], bool)
        loss = attributor_loss(Tensor(logits), gold, valid).item()
        q = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
        kl = [sum(p * np.log(p / qq) for p, qq in zip(gold[b, t], q[b, t]) if p > 0)
              for b in range(2) for t in range(3) if valid[b, t]]
        assert loss == pytest.approx(np.mean(kl), abs=1e-12)

    def test_gradient(self, rng):
        gold = rng.dirichlet(np.ones(4), (1, 3))
        valid = np.ones((1, 3), bool)
        mask = np.array([[[0, 0, 0, ad.MASK_VALUE]]], float)
        gold[..., 3] = 0
        gold /= gold.sum(-1, keepdims=True)
        fn = lambda x: attributor_loss(x, gold, valid, mask)  # noqa: E731
        assert ad.finite_difference_check(fn, rng.normal(size=(1, 3, 4))) < 1e-6

    def test_rejects_bad_gold(self):
        with pytest.raises(ValueError, match="distributions"):
            attributor_loss(Tensor(np.zeros((1, 1, 2))), np.array([[[0.3, 0.3]]]), np.ones((1, 1), bool))
        with pytest.raises(ValueError, match="valid"):
            attributor_loss(Tensor(np.zeros((1, 1, 2))), np.array([[[0.5, 0.5]]]), np.zeros((1, 1), bool))


class TestGoldRows:
    def test_normalisation_chain(self):
        m = np.array([[1.0, 2.0], [3.0, 2.0]])
        # column 0 -> minmax [0, 1]; column 1 is constant -> zeros -> uniform
        np.testing.assert_allclose(gold_rows(m), [[0.0, 1.0], [0.5, 0.5]])

    def test_batch_padding(self, rng):
        exs = _examples(rng, 3)
        src, tgt, gold, valid = _batch(exs, [0, 1, 2])
        assert gold.shape == (3, tgt.shape[1], src.shape[1])
        np.testing.assert_array_equal(valid, tgt != PAD)
        for r, e in enumerate(exs):
            np.testing.assert_array_equal(gold[r, :len(e.tgt), :len(e.src)], e.gold)


class TestTraining:
    def test_zero_epochs_returns_initialisation(self, small_cfg, rng):
        exs = _examples(rng, 8)
        fitted = train_attributor(exs, exs, small_cfg, TrainConfig(epochs=0), seed=2)
        fresh = Attributor(small_cfg, seed=2)
        for k, p in fresh.params.items():
            np.testing.assert_array_equal(fitted.model.params[k].data, p.data)
        assert fitted.result.train_loss == []

    def test_reproducible_and_learns(self, small_cfg, rng):
        exs = _examples(rng, 48)
        budget = TrainConfig(epochs=6, batch_size=16, lr=3e-3, patience=6)
        a = train_attributor(exs[:40], exs[40:], small_cfg, budget, seed=1)
        b = train_attributor(exs[:40], exs[40:], small_cfg, budget, seed=1)
        assert a.curves == b.curves
        assert min(a.curves["valid_kl"]) < a.initial_valid_kl

    def test_evaluate_shapes(self, small_cfg, rng):
        exs = _examples(rng, 5, aligned=False)
        stats = evaluate_attributor(Attributor(small_cfg), exs)
        assert stats.n_pairs == 5 and stats.k == 3
        assert 0 <= stats.overlap_at_k <= 1 and -1 <= stats.tau_at_k <= 1 and stats.mean_kl >= 0
        with pytest.raises(ValueError):
            evaluate_attributor(Attributor(small_cfg), [])


class TestUniformGuessBaseline:
    def test_random_predictions_overlap_about_k_over_j(self, rng):
        # a random ranking shares k*k/j of its top-k positions with any fixed top-k set on average
        j, k = 9, 3
        gold = [rng.random((j, j)) for _ in range(400)]
        pred = [rng.random((j, j)) for _ in range(400)]
        est = np.mean([overlap_at_k(g[t], p[t], k) for g, p in zip(gold, pred) for t in range(j)])
        assert est == pytest.approx(k / j, abs=0.02)

    def test_perfect_prediction_scores_one(self, rng):
        gold = [rng.dirichlet(np.ones(5), 4) for _ in range(3)]
        stats = score_maps(gold, gold)
        assert stats.overlap_at_k == 1.0 and stats.tau_at_k == pytest.approx(1.0) and stats.mean_kl == 0.0
