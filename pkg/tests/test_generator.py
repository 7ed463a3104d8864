"""Generator tests: vocabulary, input assembly, transformer invariants,
scoring, beam search, and supervised training."""

import json
import math
import os

import numpy as np
import pytest

import suggen.autodiff as nd
import suggen.generator as gen
from suggen.corpus import UserContext
from suggen.generator import (
    BOS,
    CLS,
    EOS,
    PAD,
    SEP,
    UNK,
    GenModel,
    Vocab,
    assemble_input,
    beam_search,
    load_gen,
    pad_batch,
    save_gen,
    score_sequence,
    sft_loss,
    token_cross_entropy,
    train_sft,
)


def tiny_model(vocab, **kw):
    args = dict(d_model=16, n_layers=1, n_heads=2, d_ff=32,
                max_enc_len=64, max_dec_len=12, seed=0)
    args.update(kw)
    return GenModel(len(vocab), **args)


def zero_logit_model(vocab, **kw):
    # Zero embeddings make every tied logit zero, hence uniform outputs.
    m = tiny_model(vocab, **kw)
    m.params["emb"].data[:] = 0.0
    return m


class TestVocab:
    def test_special_ids(self):
        v = Vocab.build(["ab"])
        assert v.tokens[:6] == list(gen.SPECIAL_TOKENS)
        assert (CLS, SEP, BOS, EOS, PAD, UNK) == (0, 1, 2, 3, 4, 5)

    def test_build_always_contains_joiner_chars(self):
        v = Vocab.build(["plain words only"])
        for c in ",:|":
            assert v.encode(c) != [UNK]

    def test_round_trip_text(self):
        v = Vocab.build(["red dress", "usb cable 3.0"])
        for text in ["red dress", "usb", "3.0 cable"]:
            assert v.decode(v.encode(text)) == text

    def test_round_trip_ids(self):
        v = Vocab.build(["abc"])
        ids = v.encode("cab,a")
        assert v.encode(v.decode(ids)) == ids

    def test_unknown_char_maps_to_unk(self):
        v = Vocab.build(["abc"])
        assert v.encode("aZb") == [v.encode("a")[0], UNK, v.encode("b")[0]]

    def test_decode_skips_specials(self):
        v = Vocab.build(["ab"])
        a = v.encode("a")[0]
        assert v.decode([CLS, a, SEP, a, EOS, PAD]) == "aa"

    def test_file_round_trip(self, tmp_path):
        v = Vocab.build(["the quick brown fox 123"])
        path = str(tmp_path / "tok.json")
        v.save(path)
        loaded = Vocab.load(path)
        assert loaded.tokens == v.tokens
        assert loaded.encode("quick 12") == v.encode("quick 12")

    def test_file_lists_tokens_in_id_order(self, tmp_path):
        v = Vocab.build(["ba"])
        path = str(tmp_path / "tok.json")
        v.save(path)
        with open(path) as f:
            tokens = json.load(f)["tokens"]
        assert all(tokens[i] == v.tokens[i] for i in range(len(v)))

    def test_load_rejects_missing_specials(self, tmp_path):
        path = str(tmp_path / "bad.json")
        with open(path, "w") as f:
            json.dump({"schema": 1, "tokens": ["a", "b"]}, f)
        with pytest.raises(ValueError):
            Vocab.load(path)

    def test_duplicate_chars_rejected(self):
        with pytest.raises(ValueError):
            Vocab(["a", "a"])


class TestAssembleInput:
    def test_hand_layout(self):
        v = Vocab([" ", "a", "e", "r"])
        ctx = UserContext(prefix="re", related=("ar",))
        # [CLS] r e [SEP] a r [SEP] [SEP]
        assert assemble_input(ctx, v) == [0, 9, 8, 1, 7, 9, 1, 1]

    def test_fixture_with_all_fields(self):
        v = Vocab.build(["red dress", "usb cable", "cat:apparel", "re"])
        cid = {c: v.tokens.index(c)
               for c in set("red dress" "usb cable" "cat:apparel" "re")}
        ctx = UserContext(prefix="re", related=("red dress",),
                          history=("usb cable",), profile="cat:apparel")
        expected = ([CLS] + [cid[c] for c in "re"] + [SEP]
                    + [cid[c] for c in "red dress"] + [SEP]
                    + [cid[c] for c in "usb cable"] + [SEP]
                    + [cid[c] for c in "cat:apparel"])
        assert assemble_input(ctx, v) == expected

    def test_comma_joins_multiple_items(self):
        v = Vocab.build(["ab"])
        comma = v.encode(",")[0]
        out = assemble_input(UserContext(prefix="a", related=("a", "b")), v)
        a, b = v.encode("a")[0], v.encode("b")[0]
        assert out == [CLS, a, SEP, a, comma, b, SEP, SEP]

    def test_empty_prefix_rejected(self):
        v = Vocab.build(["ab"])
        with pytest.raises(ValueError):
            assemble_input(UserContext(prefix=""), v)

    def test_truncation_order_history_first(self):
        v = Vocab.build(["abcdx"])
        ctx = UserContext(prefix="ab", related=("cccc",),
                          history=("dddd",), profile="x")
        ids = {c: v.encode(c)[0] for c in "abcdx"}

        def expect(rel, hist):
            out = [CLS, ids["a"], ids["b"], SEP]
            out += [ids[c] for c in rel] + [SEP]
            out += [ids[c] for c in hist] + [SEP, ids["x"]]
            return out

        assert assemble_input(ctx, v, max_enc_len=15) == expect("cccc", "dddd")
        assert assemble_input(ctx, v, max_enc_len=13) == expect("cccc", "dd")
        assert assemble_input(ctx, v, max_enc_len=11) == expect("cccc", "")
        assert assemble_input(ctx, v, max_enc_len=9) == expect("cc", "")
        assert assemble_input(ctx, v, max_enc_len=7) == expect("", "")
        with pytest.raises(ValueError):
            assemble_input(ctx, v, max_enc_len=6)

    def test_length_never_exceeds_cap(self):
        v = Vocab.build(["query words here"])
        ctx = UserContext(prefix="que", related=tuple(["query words here"] * 40),
                          history=tuple(["query words here"] * 40),
                          profile="cat:here|grp:a")
        out = assemble_input(ctx, v, max_enc_len=160)
        assert len(out) <= 160
        assert out[0] == CLS and out.count(SEP) >= 3

    def test_item_caps_apply_before_truncation(self):
        v = Vocab.build(["ab"])
        ctx = UserContext(prefix="a", related=tuple("ab" for _ in range(30)))
        out = assemble_input(ctx, v, max_enc_len=160, max_related=2)
        comma = v.encode(",")[0]
        assert out.count(comma) == 1


class TestCrossEntropy:
    def test_uniform_logits_give_log_vocab(self):
        logits = nd.Tensor(np.zeros((2, 3, 7)))
        loss = token_cross_entropy(logits, np.zeros((2, 3), dtype=np.int64),
                                   np.ones((2, 3)))
        assert abs(loss.item() - math.log(7)) < 1e-12

    def test_one_hot_logits_give_near_zero(self):
        tgt = np.array([[1, 2], [3, 0]])
        logits = np.zeros((2, 2, 5))
        for b in range(2):
            for t in range(2):
                logits[b, t, tgt[b, t]] = 50.0
        loss = token_cross_entropy(nd.Tensor(logits), tgt, np.ones((2, 2)))
        assert loss.item() < 1e-12

    def test_masked_positions_ignored(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(2, 3, 6))
        tgt = rng.integers(0, 6, size=(2, 3))
        mask = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
        shifted = logits - logits.max(-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(-1, keepdims=True))
        picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
        want = -(picked * mask).sum() / mask.sum()
        got = token_cross_entropy(nd.Tensor(logits), tgt, mask).item()
        assert abs(got - want) < 1e-12

    def test_empty_mask_rejected(self):
        with pytest.raises(ValueError):
            token_cross_entropy(nd.Tensor(np.zeros((1, 2, 3))),
                                np.zeros((1, 2), dtype=np.int64),
                                np.zeros((1, 2)))


class TestPadBatch:
    def test_shapes_and_mask(self):
        ids, valid = pad_batch([[7, 8], [9]])
        assert ids.tolist() == [[7, 8], [9, PAD]]
        assert valid.tolist() == [[1.0, 1.0], [1.0, 0.0]]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            pad_batch([])


class TestModelInvariants:
    def _batch(self, vocab):
        ctxs = [UserContext(prefix="ab", related=("ba",)),
                UserContext(prefix="b")]
        inputs = [assemble_input(c, vocab) for c in ctxs]
        targets = [vocab.encode("ab"), vocab.encode("a")]
        return inputs, targets

    def test_every_softmax_row_sums_to_one(self, monkeypatch):
        vocab = Vocab.build(["ab"])
        model = tiny_model(vocab)
        sums = []
        real = nd.softmax

        def probe(t):
            out = real(t)
            sums.append(out.data.sum(-1).ravel())
            return out

        monkeypatch.setattr(nd, "softmax", probe)
        inputs, targets = self._batch(vocab)
        with nd.no_grad():
            loss = sft_loss(model, inputs, targets)
        assert math.isfinite(loss.item())
        # 1 self-attn per encoder layer + 2 per decoder layer, 2 heads each.
        assert len(sums) == model.n_layers * 3 * model.n_heads
        for row_sums in sums:
            assert np.max(np.abs(row_sums - 1.0)) < 1e-9
        probs = nd.softmax(nd.Tensor(np.random.default_rng(0).normal(
            size=(2, 4, len(vocab)))))
        assert np.max(np.abs(probs.data.sum(-1) - 1.0)) < 1e-9

    def test_decoder_is_strictly_causal(self):
        vocab = Vocab.build(["abcd"])
        model = tiny_model(vocab, seed=2)
        enc_ids, enc_valid = pad_batch([[CLS] + vocab.encode("ab")])
        dec = vocab.encode("abcdab")
        with nd.no_grad():
            enc_out = model.encode(enc_ids, enc_valid)
            base = model.decode(np.array([dec]), np.ones((1, len(dec))),
                                enc_out, enc_valid).data
            poked = list(dec)
            assert poked[3] != vocab.encode("a")[0]
            poked[3] = vocab.encode("a")[0]
            out = model.decode(np.array([poked]), np.ones((1, len(dec))),
                               enc_out, enc_valid).data
        assert np.array_equal(base[0, :3], out[0, :3])
        assert not np.allclose(base[0, 3:], out[0, 3:])

    def test_padding_does_not_change_example_loss(self):
        vocab = Vocab.build(["ab"])
        model = tiny_model(vocab, seed=1)
        inputs, targets = self._batch(vocab)
        with nd.no_grad():
            both = sft_loss(model, inputs, targets).item()
            l0 = sft_loss(model, inputs[:1], targets[:1]).item()
            l1 = sft_loss(model, inputs[1:], targets[1:]).item()
        n0, n1 = len(targets[0]) + 1, len(targets[1]) + 1
        want = (n0 * l0 + n1 * l1) / (n0 + n1)
        assert abs(both - want) < 1e-9

    def test_uniform_model_loss_is_log_vocab(self):
        vocab = Vocab.build(["abc"])
        model = zero_logit_model(vocab)
        inputs, targets = self._batch(vocab)
        with nd.no_grad():
            loss = sft_loss(model, inputs, targets).item()
        assert abs(loss - math.log(len(vocab))) < 1e-10

    def test_gradients_match_finite_differences(self):
        vocab = Vocab(["a", "b"])
        model = GenModel(len(vocab), d_model=8, n_layers=1, n_heads=2,
                         d_ff=8, max_enc_len=16, max_dec_len=8, seed=0)
        inputs = [[CLS] + vocab.encode("ab") + [SEP],
                  [CLS] + vocab.encode("b") + [SEP]]
        targets = [vocab.encode("a"), vocab.encode("ba")]
        err = nd.check_gradient(lambda: sft_loss(model, inputs, targets),
                                model.parameters(), h=1e-5)
        assert err <= 1e-4

    def test_length_guards(self):
        vocab = Vocab.build(["ab"])
        model = tiny_model(vocab, max_enc_len=4, max_dec_len=3)
        with pytest.raises(ValueError):
            sft_loss(model, [[CLS] + vocab.encode("aaaa")], [vocab.encode("a")])
        with pytest.raises(ValueError):
            sft_loss(model, [[CLS]], [vocab.encode("aaaa")])


class TestScoreSequence:
    def test_uniform_single_token(self):
        vocab = Vocab.build(["abcd"])
        model = zero_logit_model(vocab)
        inp = [CLS] + vocab.encode("a") + [SEP]
        got = score_sequence(model, inp, vocab.encode("a"))
        assert abs(got - math.log(1.0 / len(vocab))) < 1e-12

    def test_uniform_score_scales_with_length(self):
        vocab = Vocab.build(["abcd"])
        model = zero_logit_model(vocab)
        inp = [CLS] + vocab.encode("a") + [SEP]
        got = score_sequence(model, inp, vocab.encode("abc") + [EOS])
        assert abs(got - 4 * math.log(1.0 / len(vocab))) < 1e-12

    def test_matches_numpy_teacher_forced_oracle(self):
        vocab = Vocab.build(["abcd"])
        model = tiny_model(vocab, seed=5)
        inp = [CLS] + vocab.encode("cab") + [SEP]
        query = vocab.encode("bad") + [EOS]
        dec_in = [BOS] + query[:-1]
        with nd.no_grad():
            enc_ids, enc_valid = pad_batch([inp])
            enc_out = model.encode(enc_ids, enc_valid)
            logits = model.decode(np.array([dec_in]),
                                  np.ones((1, len(dec_in))),
                                  enc_out, enc_valid).data[0]
        shifted = logits - logits.max(-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(-1, keepdims=True))
        want = sum(logp[t, tok] for t, tok in enumerate(query))
        assert abs(score_sequence(model, inp, query) - want) < 1e-9

    def test_stepwise_increments_are_conditionals(self):
        vocab = Vocab.build(["abcd"])
        model = tiny_model(vocab, seed=7)
        inp = [CLS] + vocab.encode("ab") + [SEP]
        query = vocab.encode("dcba")
        total = score_sequence(model, inp, query)
        acc = 0.0
        for t in range(1, len(query) + 1):
            inc = (score_sequence(model, inp, query[:t])
                   - score_sequence(model, inp, query[:t - 1]))
            acc += inc
        assert abs(total - acc) < 1e-9

    def test_empty_query_scores_zero(self):
        vocab = Vocab.build(["ab"])
        assert score_sequence(tiny_model(vocab), [CLS], []) == 0.0

    def test_too_long_query_rejected(self):
        vocab = Vocab.build(["ab"])
        model = tiny_model(vocab, max_dec_len=3)
        with pytest.raises(ValueError):
            score_sequence(model, [CLS], vocab.encode("aaaa"))


class TestBeamSearch:
    def test_uniform_model_orders_ties_lexicographically(self):
        vocab = Vocab(["a", "b", "c", "d"])
        model = zero_logit_model(vocab)
        inp = [CLS] + vocab.encode("a") + [SEP]
        hyps = beam_search(model, vocab, inp, beam_size=5, max_len=3)
        # Uniform logits: shorter is better, ties break on token ids.
        assert [h.ids for h in hyps] == [
            (EOS,), (6, EOS), (6, 6, EOS), (6, 6, 6), (6, 6, 7)]
        logp = math.log(1.0 / len(vocab))
        for h in hyps:
            assert abs(h.score - len(h.ids) * logp) < 1e-12

    def test_beam_one_is_greedy(self):
        vocab = Vocab.build(["abcd"])
        model = tiny_model(vocab, seed=11)
        inp = [CLS] + vocab.encode("ba") + [SEP]
        allowed = [EOS] + list(range(6, len(vocab)))
        enc_ids, enc_valid = pad_batch([inp])
        with nd.no_grad():
            enc_out = model.encode(enc_ids, enc_valid)
        ids: list[int] = []
        for _ in range(6):
            dec_in = np.array([[BOS] + ids])
            with nd.no_grad():
                logits = model.decode(dec_in, np.ones(dec_in.shape),
                                      enc_out, enc_valid)
                logp = nd.log_softmax(logits).data[0, -1]
            best = min(allowed, key=lambda t: (-logp[t], t))
            ids.append(best)
            if best == EOS:
                break
        top = beam_search(model, vocab, inp, beam_size=1, max_len=6)[0]
        assert top.ids == tuple(ids)
        assert top.score == score_sequence(model, inp, list(top.ids))

    def test_scores_reproducible_and_sorted(self):
        vocab = Vocab.build(["abcd"])
        model = tiny_model(vocab, seed=13)
        inp = [CLS] + vocab.encode("ca") + [SEP]
        hyps = beam_search(model, vocab, inp, beam_size=8, max_len=4)
        assert len(hyps) >= 2
        for h in hyps:
            assert h.score == score_sequence(model, inp, list(h.ids))
        keys = [(-h.score, h.ids) for h in hyps]
        assert keys == sorted(keys)
        texts = [vocab.decode(h.ids) for h in hyps]
        assert len(set(texts)) == len(texts)

    def test_exhaustive_oracle_tiny_vocab(self):
        chars = [6, 7, 8, 9]
        vocab = Vocab(["a", "b", "c", "d"])
        model = tiny_model(vocab, seed=3)
        inp = [CLS] + vocab.encode("ad") + [SEP]
        pool = [(EOS,)]
        pool += [(c, EOS) for c in chars]
        pool += [(c1, c2, EOS) for c1 in chars for c2 in chars]
        pool += [(c1, c2, c3) for c1 in chars for c2 in chars
                 for c3 in chars]
        scored = [(ids, score_sequence(model, inp, list(ids)))
                  for ids in pool]
        scored.sort(key=lambda c: (-c[1], c[0]))
        want = scored[:64]
        got = beam_search(model, vocab, inp, beam_size=64, max_len=3)
        assert [h.ids for h in got] == [ids for ids, _ in want]
        assert [h.score for h in got] == [s for _, s in want]

    def test_validation(self):
        vocab = Vocab.build(["ab"])
        model = tiny_model(vocab)
        with pytest.raises(ValueError):
            beam_search(model, vocab, [CLS], beam_size=0)
        with pytest.raises(ValueError):
            beam_search(model, vocab, [CLS], beam_size=4,
                        max_len=model.max_dec_len + 1)


class TestTraining:
    def _dataset(self):
        queries = ["red dress", "red shoes", "blue lamp", "oak table",
                   "usb cable", "gold ring", "wool sock", "tea mug"]
        return [(UserContext(prefix=q[:2]), q) for q in queries]

    def _fit(self, epochs, seed=0, lr=5e-3, ckpt=None):
        data = self._dataset()
        vocab = Vocab.build([q for _, q in data])
        model = GenModel(len(vocab), d_model=32, n_layers=1, n_heads=2,
                         d_ff=64, max_enc_len=32, max_dec_len=12, seed=seed)
        model, curve = train_sft(model, vocab, data, epochs=epochs, batch=8,
                                 seed=seed, lr=lr, checkpoint_dir=ckpt)
        return model, vocab, curve

    def test_deterministic_and_decreasing(self):
        _, _, c1 = self._fit(epochs=4)
        _, _, c2 = self._fit(epochs=4)
        assert c1 == c2
        assert c1[0] > c1[1] > c1[2]

    def test_overfits_small_dataset(self):
        model, vocab, curve = self._fit(epochs=220)
        assert curve[-1] < 0.1
        ctx, query = self._dataset()[0]
        inp = assemble_input(ctx, vocab, model.max_enc_len)
        top = beam_search(model, vocab, inp, beam_size=4)[0]
        assert vocab.decode(top.ids) == query

    def test_checkpoints_per_epoch(self, tmp_path):
        self._fit(epochs=2, ckpt=str(tmp_path))
        names = sorted(os.listdir(tmp_path))
        assert names == ["sft_epoch00.json", "sft_epoch01.json"]
        loaded = load_gen(str(tmp_path / "sft_epoch01.json"))
        assert loaded.d_model == 32

    def test_checkpoint_round_trip_exact(self, tmp_path):
        vocab = Vocab.build(["abc"])
        model = tiny_model(vocab, seed=9)
        path = str(tmp_path / "gen.json")
        save_gen(model, path, "h")
        loaded = load_gen(path)
        inp = [[CLS] + vocab.encode("ab") + [SEP]]
        tgt = [vocab.encode("ca")]
        with nd.no_grad():
            a = sft_loss(model, inp, tgt).item()
            b = sft_loss(loaded, inp, tgt).item()
        assert a == b

    def test_empty_dataset_rejected(self):
        vocab = Vocab.build(["ab"])
        with pytest.raises(ValueError):
            train_sft(tiny_model(vocab), vocab, [])
