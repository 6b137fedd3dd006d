import numpy as np
import pytest

from attrsim import autodiff as ad
from attrsim.autodiff import Tensor
from attrsim.checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from attrsim.injection import InjectionConfig
from attrsim.transformer import BOS, EOS, PAD, ModelConfig, Seq2SeqModel, pad_batch

from conftest import random_ids


def _logits(model, src, tgt_in, **kw):
    with ad.no_grad():
        return model.forward(src, tgt_in, **kw).logits.data


class TestConfig:
    def test_rejects_indivisible_heads(self):
        with pytest.raises(ValueError):
            ModelConfig(10, 10, d_model=10, n_heads=3)

    def test_rejects_unknown_activation(self):
        with pytest.raises(ValueError):
            ModelConfig(10, 10, activation="softplus")

    def test_round_trip(self, tiny_config):
        assert ModelConfig.from_dict(tiny_config.to_dict()) == tiny_config


class TestForward:
    def test_same_seed_same_parameters(self, tiny_config):
        a, b = Seq2SeqModel(tiny_config, seed=5), Seq2SeqModel(tiny_config, seed=5)
        assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
        c = Seq2SeqModel(tiny_config, seed=6)
        assert not np.array_equal(a.params["src_embed"].data, c.params["src_embed"].data)

    def test_shapes_and_trace(self, tiny_model, rng):
        src = pad_batch([random_ids(rng, 4, 12), random_ids(rng, 2, 12)])
        tgt = pad_batch([[BOS, 5, 6], [BOS, 7]])
        out = tiny_model.forward(src, tgt)
        assert out.logits.shape == (2, 3, 11)
        assert len(out.trace.encoder) == 1 and len(out.trace.cross) == 2
        w = out.trace.cross[0].weights
        assert w.shape == (2, 2, 3, src.shape[1])
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)

    def test_padding_does_not_change_real_positions(self, tiny_model, rng):
        src = random_ids(rng, 4, 12)
        tgt_in = np.array([[BOS, 5, 6]])
        short = _logits(tiny_model, src[None], tgt_in)
        padded = _logits(tiny_model, np.concatenate([src, [PAD, PAD]])[None], tgt_in)
        np.testing.assert_allclose(short, padded, atol=1e-9)

    def test_padded_keys_get_no_attention(self, tiny_model, rng):
        src = np.concatenate([random_ids(rng, 3, 12), [PAD, PAD]])[None]
        out = tiny_model.forward(src, np.array([[BOS, 4]]))
        for rec in out.trace.encoder + out.trace.cross:
            assert np.all(rec.weights[..., -2:] < 1e-300)

    def test_decoder_is_causal(self, tiny_model, rng):
        src = random_ids(rng, 5, 12)[None]
        a = _logits(tiny_model, src, np.array([[BOS, 5, 6, 7]]))
        b = _logits(tiny_model, src, np.array([[BOS, 5, 9, 4]]))
        np.testing.assert_allclose(a[:, :2], b[:, :2], atol=1e-12)
        assert not np.allclose(a[:, 2:], b[:, 2:])

    def test_batch_rows_are_independent(self, tiny_model, rng):
        srcs = [random_ids(rng, 5, 12), random_ids(rng, 5, 12)]
        tgt = np.array([[BOS, 5, 6], [BOS, 8, 4]])
        both = _logits(tiny_model, np.stack(srcs), tgt)
        one = _logits(tiny_model, srcs[1][None], tgt[1:])
        np.testing.assert_allclose(both[1:], one, atol=1e-12)

    def test_gradients_through_the_model(self, tiny_model, rng):
        src = random_ids(rng, 3, 12)[None]
        tgt_in = np.array([[BOS, 5, 6]])
        targets = np.array([[5, 6, EOS]])
        emb = tiny_model.embed_source(src)
        with tiny_model.frozen():
            fn = lambda e: ad.cross_entropy(tiny_model.forward(src, tgt_in, src_embeddings=e, with_trace=False).logits,  # noqa: E731
                                            targets)
            assert ad.finite_difference_check(fn, emb) < 1e-5

    def test_parameter_gradients(self, tiny_config, rng):
        model = Seq2SeqModel(tiny_config, seed=0)
        src = random_ids(rng, 3, 12)[None]
        with ad.Tape() as tape:
            loss = ad.cross_entropy(model.forward(src, np.array([[BOS, 5]]), with_trace=False).logits,
                                    np.array([[5, EOS]]))
        grads = ad.backward(tape, loss)
        w = model.params["dec.1.ffn.ff2.w"]
        i, j = 3, 4
        base = w.data[i, j]
        vals = []
        for step in (1e-5, -1e-5):
            w.data[i, j] = base + step
            with ad.no_grad():
                vals.append(ad.cross_entropy(model.forward(src, np.array([[BOS, 5]]), with_trace=False).logits,
                                             np.array([[5, EOS]])).item())
        w.data[i, j] = base
        assert grads[w][i, j] == pytest.approx((vals[0] - vals[1]) / 2e-5, rel=1e-5)

    def test_frozen_restores_flags(self, tiny_model):
        with tiny_model.frozen():
            assert not any(p.requires_grad for p in tiny_model.parameters())
        assert all(p.requires_grad for p in tiny_model.parameters())


class TestValidation:
    def test_too_long(self, tiny_model):
        with pytest.raises(ValueError, match="max_length"):
            tiny_model.forward(np.full((1, 9), 5), np.array([[BOS]]))

    def test_out_of_vocabulary(self, tiny_model):
        with pytest.raises(ValueError, match="vocabulary"):
            tiny_model.forward(np.array([[5, 12]]), np.array([[BOS]]))

    def test_empty_source(self, tiny_model):
        with pytest.raises(ValueError, match="empty"):
            tiny_model.generate([PAD, PAD])

    def test_unknown_strategy(self, tiny_model):
        with pytest.raises(ValueError):
            tiny_model.generate([5, EOS], strategy="sample")


class TestInjection:
    def _pair(self, rng):
        return random_ids(rng, 5, 12)[None], np.array([[BOS, 5, 6, 7]])

    @pytest.mark.parametrize("site", ["encoder-self", "cross"])
    @pytest.mark.parametrize("operator,fill", [("multiply", 1.0), ("add", 0.0)])
    def test_identity_laws(self, tiny_config, rng, site, operator, fill):
        src, tgt = self._pair(rng)
        plain = Seq2SeqModel(tiny_config, seed=1)
        injected = Seq2SeqModel(tiny_config, seed=1, injection=InjectionConfig(operator, site, max_length=8))
        e = np.full((1, 8, 8), fill)
        np.testing.assert_allclose(_logits(injected, src, tgt, injection=e), _logits(plain, src, tgt), atol=1e-9)

    def test_replace_uniform_gives_uniform_weights(self, tiny_config, rng):
        src, tgt = self._pair(rng)
        src = np.concatenate([src, [[PAD]]], axis=1)
        model = Seq2SeqModel(tiny_config, seed=1, injection=InjectionConfig("replace", "encoder-self", max_length=8))
        out = model.forward(src, tgt, injection=np.full((1, 8, 8), 0.7))
        w = out.trace.encoder[0].weights[0]
        np.testing.assert_allclose(w[..., :-1], 1.0 / (src.shape[1] - 1), atol=1e-12)

    def test_head_mask_leaves_other_heads_alone(self, tiny_config, rng):
        src, tgt = self._pair(rng)
        plain = Seq2SeqModel(tiny_config, seed=1)
        masked = Seq2SeqModel(tiny_config, seed=1,
                              injection=InjectionConfig("multiply", "cross", (True, False), max_length=8))
        e = rng.random((1, 8, 8))
        a = plain.forward(src, tgt).trace.cross[0]
        b = masked.forward(src, tgt, injection=e).trace.cross[0]
        np.testing.assert_allclose(a.weights[:, 1], b.weights[:, 1], atol=1e-12)
        np.testing.assert_allclose(b.composed[:, 0], a.scores[:, 0] * e[:, :4, :6], atol=1e-12)

    def test_other_site_is_untouched(self, tiny_config, rng):
        src, tgt = self._pair(rng)
        model = Seq2SeqModel(tiny_config, seed=1, injection=InjectionConfig("add", "cross", max_length=8))
        out = model.forward(src, tgt, injection=rng.random((1, 8, 8)))
        for rec in out.trace.encoder:
            np.testing.assert_array_equal(rec.scores, rec.composed)


class TestZeroValues:
    def test_batched_matches_single(self, tiny_model, rng):
        src = random_ids(rng, 4, 12)
        tgt = [5, 6, EOS]
        ref = tiny_model.recompute_with_zeroed_value(src, tgt, layer=1, position=2)
        zero = np.zeros((1, 5), bool)
        zero[0, 2] = True
        out = tiny_model.forward(src[None], np.array([[BOS, 5, 6]]), zero_values={1: zero}, with_trace=False)
        np.testing.assert_allclose(out.decoder_states[1].data[0], ref, atol=1e-12)

    def test_zeroing_changes_only_later_layers(self, tiny_model, rng):
        src = random_ids(rng, 4, 12)
        with ad.no_grad():
            plain = tiny_model.forward(src[None], np.array([[BOS, 5, 6]]), with_trace=False)
        ablated = tiny_model.recompute_with_zeroed_value(src, [5, 6, EOS], layer=1, position=0)
        assert not np.allclose(ablated, plain.decoder_states[1].data[0])

    def test_index_errors(self, tiny_model):
        with pytest.raises(IndexError):
            tiny_model.recompute_with_zeroed_value([5, EOS], [5, EOS], layer=2, position=0)
        with pytest.raises(IndexError):
            tiny_model.recompute_with_zeroed_value([5, EOS], [5, EOS], layer=0, position=2)


class TestDecoding:
    def test_greedy_matches_step_by_step_argmax(self, tiny_model, rng):
        src = random_ids(rng, 4, 12)
        out = tiny_model.generate(src)
        prefix = [BOS]
        for tok in out:
            logits = _logits(tiny_model, src[None], np.array([prefix]))
            assert logits[0, -1].argmax() == tok
            prefix.append(tok)
        assert out[-1] == EOS or len(out) == tiny_model.config.max_length

    def test_batch_equals_single(self, tiny_model, rng):
        srcs = [random_ids(rng, n, 12) for n in (2, 5, 3)]
        assert tiny_model.generate_batch(srcs) == [tiny_model.generate(s) for s in srcs]

    def test_beam_width_one_is_greedy(self, tiny_model, rng):
        for _ in range(3):
            src = random_ids(rng, 4, 12)
            assert tiny_model.generate(src, "beam", beam_width=1) == tiny_model.generate(src)

    def test_beam_score_not_worse_than_greedy(self, tiny_model, rng):
        def logprob(src, seq):
            lp = ad.log_softmax(Tensor(_logits(tiny_model, src[None], np.array([[BOS] + seq[:-1]])))).data[0]
            return lp[np.arange(len(seq)), seq].sum()

        for _ in range(3):
            src = random_ids(rng, 4, 12)
            greedy, beam = tiny_model.generate(src), tiny_model.generate(src, "beam", beam_width=4)
            if greedy[-1] == EOS and beam[-1] == EOS:
                assert logprob(src, beam) >= logprob(src, greedy) - 1e-9


class TestCheckpoint:
    def test_model_round_trip(self, tiny_config, tmp_path, rng):
        model = Seq2SeqModel(tiny_config, seed=9, injection=InjectionConfig("average", "cross", (True, False), 8))
        path = tmp_path / "m.ckpt"
        model.save(path)
        loaded = Seq2SeqModel.load(path)
        assert loaded.injection == model.injection and loaded.config == model.config
        src, tgt = random_ids(rng, 4, 12)[None], np.array([[BOS, 5]])
        e = rng.random((1, 8, 8))
        np.testing.assert_array_equal(_logits(model, src, tgt, injection=e), _logits(loaded, src, tgt, injection=e))

    def test_container_layout(self, tmp_path):
        path = tmp_path / "c.ckpt"
        t = {"a": np.arange(6.0).reshape(2, 3), "scalar": np.array(2.5)}
        write_checkpoint(path, {"kind": "x", "n": 1}, t)
        raw = path.read_bytes()
        assert raw[:8] == b"ATSMCKPT"
        cfg, back = read_checkpoint(path)
        assert cfg == {"kind": "x", "n": 1}
        assert list(back) == ["a", "scalar"]
        np.testing.assert_array_equal(back["a"], t["a"])
        assert back["scalar"].shape == () and back["scalar"] == 2.5

    def test_corruption_is_detected(self, tmp_path):
        path = tmp_path / "c.ckpt"
        write_checkpoint(path, {}, {"a": np.ones(3)})
        good = path.read_bytes()
        path.write_bytes(b"XXXXXXXX" + good[8:])
        with pytest.raises(CheckpointError, match="magic"):
            read_checkpoint(path)
        path.write_bytes(good + b"\0")
        with pytest.raises(CheckpointError, match="trailing"):
            read_checkpoint(path)

    def test_wrong_kind(self, tmp_path):
        path = tmp_path / "c.ckpt"
        write_checkpoint(path, {"kind": "attributor"}, {})
        with pytest.raises(ValueError, match="attributor"):
            Seq2SeqModel.load(path)

    def test_state_dict_mismatch(self, tiny_model, tiny_config):
        state = tiny_model.state_dict()
        state.pop("out.w")
        with pytest.raises(ValueError):
            Seq2SeqModel(tiny_config).load_state_dict(state)
