"""Reward shaping and preference-loss tests: closed forms at
policy = reference, finite-difference gradients away from hinge kinks,
and the frozen-reference training contract."""

import math

import numpy as np
import pytest

import suggen.autodiff as nd
from suggen.corpus import LEVEL_NAMES, PreferenceGroup, ScoredQuery, UserContext
from suggen.generator import CLS, EOS, SEP, GenModel, Vocab, score_sequence
from suggen.preference import (
    RewardParams,
    TokenizedGroup,
    _sequence_logprobs,
    clone_model,
    dpo_batch_loss,
    implicit_reward,
    listwise_loss,
    pairwise_loss,
    reward,
    reward_weight,
    tokenize_groups,
    train_dpo,
)


def tiny_model(vocab, seed=0, **kw):
    args = dict(d_model=8, n_layers=1, n_heads=2, d_ff=8,
                max_enc_len=24, max_dec_len=8, seed=seed)
    args.update(kw)
    return GenModel(len(vocab), **args)


def make_group(vocab, win="ab", loses=("ba",), rw=None):
    inp = [CLS] + vocab.encode("a") + [SEP]
    return TokenizedGroup(
        input_ids=tuple(inp),
        win_ids=tuple(vocab.encode(win)) + (EOS,),
        lose_ids=tuple(tuple(vocab.encode(l)) + (EOS,) for l in loses),
        rw=tuple(rw if rw is not None else [0.5] * len(loses)))


def mean_token_nll(model, group):
    lp = score_sequence(model, list(group.input_ids), list(group.win_ids))
    return -lp / len(group.win_ids)


class TestRewardParams:
    def test_defaults_valid(self):
        p = RewardParams()
        assert p.weight_of("Order") == 2.0
        assert p.weight_of("Rand") == 0.0

    def test_strictly_decreasing_enforced(self):
        with pytest.raises(ValueError):
            RewardParams(level_weights=(2.0, 1.5, 1.5, 0.5, 0.2, 0.0))

    def test_count_enforced(self):
        with pytest.raises(ValueError):
            RewardParams(level_weights=(2.0, 1.0))

    def test_scalar_bounds(self):
        with pytest.raises(ValueError):
            RewardParams(delta=-0.1)
        with pytest.raises(ValueError):
            RewardParams(rw_max=0.0)
        with pytest.raises(ValueError):
            RewardParams(beta_dpo=0.0)

    def test_unknown_level(self):
        with pytest.raises(ValueError):
            RewardParams().weight_of("Nope")


class TestReward:
    def test_click_baseline(self):
        assert reward("Click", 0.0) == 1.0

    def test_rand_is_zero(self):
        for pi in (0.0, 0.3, 1.0):
            assert reward("Rand", pi) == 0.0

    def test_order_top(self):
        assert abs(reward("Order", 1.0) - 2.0 * math.e) < 1e-12

    def test_pi_out_of_range(self):
        with pytest.raises(ValueError):
            reward("Click", -0.1)
        with pytest.raises(ValueError):
            reward("Click", 1.5)

    def test_monotone_in_pi(self):
        for level in LEVEL_NAMES[:-1]:
            vals = [reward(level, pi) for pi in (0.0, 0.25, 0.5, 1.0)]
            assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_level_order_at_fixed_pi(self):
        vals = [reward(level, 0.4) for level in LEVEL_NAMES]
        assert all(a > b for a, b in zip(vals, vals[1:-1]))
        assert vals[-1] == 0.0


class TestRewardWeight:
    def test_inverse_gap(self):
        assert reward_weight(2.0, 0.0) == 0.5
        assert reward_weight(3.0, 2.0) == 1.0

    def test_clamped(self):
        assert reward_weight(1.0, 0.95) == 10.0

    def test_non_positive_gap_rejected(self):
        with pytest.raises(ValueError):
            reward_weight(1.0, 1.0)
        with pytest.raises(ValueError):
            reward_weight(0.5, 1.0)


class TestImplicitReward:
    def test_policy_equals_reference_is_zero(self):
        vocab = Vocab.build(["ab"])
        model = tiny_model(vocab)
        inp = [CLS] + vocab.encode("a") + [SEP]
        q = vocab.encode("ab") + [EOS]
        assert implicit_reward(model, model, inp, q) == 0.0

    def test_beta_linearity_and_composition(self):
        vocab = Vocab.build(["ab"])
        pol, ref = tiny_model(vocab, seed=1), tiny_model(vocab, seed=2)
        inp = [CLS] + vocab.encode("b") + [SEP]
        q = vocab.encode("ba") + [EOS]
        one = implicit_reward(pol, ref, inp, q, beta_dpo=0.1)
        two = implicit_reward(pol, ref, inp, q, beta_dpo=0.2)
        assert abs(two - 2.0 * one) < 1e-12
        want = 0.1 * (score_sequence(pol, inp, q) - score_sequence(ref, inp, q))
        assert one == want


class TestTokenizeGroups:
    def _group(self, rw=(0.5,)):
        return PreferenceGroup(
            context=UserContext(prefix="ab"),
            win=ScoredQuery("abba", "Click", 0.5),
            loses=(ScoredQuery("baab", "Show", 0.1),),
            rw=rw)

    def test_eos_closed_and_assembled(self):
        vocab = Vocab.build(["ab"])
        tg = tokenize_groups([self._group()], vocab, 32, 8)[0]
        assert tg.win_ids[-1] == EOS and tg.lose_ids[0][-1] == EOS
        assert tg.input_ids[0] == CLS
        assert tg.win_ids == tuple(vocab.encode("abba")) + (EOS,)

    def test_truncates_to_decoder_budget(self):
        vocab = Vocab.build(["ab"])
        long = PreferenceGroup(
            context=UserContext(prefix="a"),
            win=ScoredQuery("ab" * 20, "Click", 0.0),
            loses=(ScoredQuery("ba", "Show", 0.0),), rw=(1.0,))
        tg = tokenize_groups([long], vocab, 32, 8)[0]
        assert len(tg.win_ids) == 8 and tg.win_ids[-1] == EOS

    def test_rw_validated(self):
        vocab = Vocab.build(["ab"])
        with pytest.raises(ValueError):
            tokenize_groups([self._group(rw=(0.0,))], vocab, 32, 8)
        with pytest.raises(ValueError):
            tokenize_groups([self._group(rw=(11.0,))], vocab, 32, 8)
        with pytest.raises(ValueError):
            tokenize_groups([self._group(rw=(0.5, 0.5))], vocab, 32, 8)


class TestSequenceLogprobs:
    def test_matches_score_sequence_rowwise(self):
        vocab = Vocab.build(["abcd"])
        model = tiny_model(vocab, seed=4)
        inp = [CLS] + vocab.encode("ca") + [SEP]
        seqs = [vocab.encode("abc") + [EOS], vocab.encode("d") + [EOS],
                vocab.encode("ddcba") + [EOS]]
        with nd.no_grad():
            got = _sequence_logprobs(model, inp, seqs).data
        for i, s in enumerate(seqs):
            assert abs(got[i] - score_sequence(model, inp, s)) < 1e-9


class TestPairwiseLoss:
    def test_closed_form_at_reference(self):
        vocab = Vocab.build(["ab"])
        model = tiny_model(vocab, seed=3)
        group = make_group(vocab)
        p = RewardParams()
        with nd.no_grad():
            loss = pairwise_loss(model, model, group, p).item()
        want = math.log(2.0) + p.alpha * mean_token_nll(model, group)
        assert abs(loss - want) < 1e-10

    def test_large_gap_leaves_only_sft_term(self):
        vocab = Vocab.build(["ab"])
        model = tiny_model(vocab, seed=3)
        group = make_group(vocab, rw=[10.0])
        p = RewardParams()
        lp_w = score_sequence(model, list(group.input_ids), list(group.win_ids))
        lp_l = score_sequence(model, list(group.input_ids),
                              list(group.lose_ids[0]))
        refs = (lp_w - 500.0, lp_l)
        with nd.no_grad():
            loss = pairwise_loss(model, model, group, p,
                                 ref_scores=refs).item()
        assert abs(loss - p.alpha * mean_token_nll(model, group)) < 1e-8

    def test_corrected_hinge_penalizes_violation(self):
        vocab = Vocab.build(["ab"])
        model = tiny_model(vocab, seed=3)
        group = make_group(vocab)
        p = RewardParams()
        with nd.no_grad():
            printed = pairwise_loss(model, model, group, p).item()
            fixed = pairwise_loss(model, model, group, p,
                                  corrected_pair_hinge=True).item()
        want = (-math.log(1.0 / (1.0 + math.exp(group.rw[0] * p.delta)))
                + p.alpha * mean_token_nll(model, group))
        assert abs(fixed - want) < 1e-10
        assert fixed > printed

    def test_multi_lose_rejected(self):
        vocab = Vocab.build(["ab"])
        model = tiny_model(vocab)
        group = make_group(vocab, loses=("ba", "bb"))
        with pytest.raises(ValueError):
            pairwise_loss(model, model, group)

    def _grad_setup(self, active):
        vocab = Vocab(["a", "b"])
        model = tiny_model(vocab, seed=0)
        group = make_group(vocab)
        lp_w = score_sequence(model, list(group.input_ids), list(group.win_ids))
        lp_l = score_sequence(model, list(group.input_ids),
                              list(group.lose_ids[0]))
        shift = -6.0 if active else 6.0
        refs = (lp_w + shift, lp_l)
        p = RewardParams()
        gap = p.beta_dpo * ((lp_w - lp_l) - (refs[0] - refs[1]))
        assert abs(gap - p.delta) > 0.2
        return model, group, refs, p

    def test_gradients_active_hinge(self):
        model, group, refs, p = self._grad_setup(active=True)
        err = nd.check_gradient(
            lambda: pairwise_loss(model, model, group, p, ref_scores=refs),
            model.parameters(), h=1e-5)
        assert err <= 1e-4

    def test_gradients_inactive_hinge(self):
        model, group, refs, p = self._grad_setup(active=False)
        err = nd.check_gradient(
            lambda: pairwise_loss(model, model, group, p, ref_scores=refs),
            model.parameters(), h=1e-5)
        assert err <= 1e-4


class TestListwiseLoss:
    def test_single_negative_closed_form(self):
        vocab = Vocab.build(["ab"])
        model = tiny_model(vocab, seed=3)
        group = make_group(vocab)
        p = RewardParams()
        with nd.no_grad():
            loss = listwise_loss(model, model, group, p).item()
        want = math.log(2.0) + p.alpha * mean_token_nll(model, group)
        assert abs(loss - want) < 1e-10

    def test_n_negative_closed_form(self):
        vocab = Vocab.build(["ab"])
        model = tiny_model(vocab, seed=3)
        group = make_group(vocab, loses=("ba", "bb", "aa"), rw=[0.5, 1.0, 2.0])
        p = RewardParams()
        with nd.no_grad():
            loss = listwise_loss(model, model, group, p).item()
        n = 3
        want = (-math.log(1.0 / (1.0 + math.exp(math.log(n))))
                + p.alpha * mean_token_nll(model, group))
        assert abs(loss - want) < 1e-10

    def test_identical_negatives_scale_inner_sum(self):
        vocab = Vocab.build(["ab"])
        model = tiny_model(vocab, seed=6)
        p = RewardParams()
        n = 4
        group = make_group(vocab, loses=["ba"] * n, rw=[2.0] * n)
        lp_w = score_sequence(model, list(group.input_ids), list(group.win_ids))
        lp_l = score_sequence(model, list(group.input_ids),
                              list(group.lose_ids[0]))
        refs = (lp_w + 6.0,) + (lp_l,) * n
        with nd.no_grad():
            loss = listwise_loss(model, model, group, p,
                                 ref_scores=refs).item()
        h = 2.0 * max(0.0, p.beta_dpo * ((lp_l - lp_w) - (refs[1] - refs[0]))
                      - p.delta)
        assert h > 0.1
        inner = n * math.exp(h)
        sigma = 1.0 / (1.0 + math.exp(math.log(inner)))
        want = -math.log(sigma) + p.alpha * mean_token_nll(model, group)
        assert abs(loss - want) < 1e-9

    def test_empty_loses_rejected(self):
        vocab = Vocab.build(["ab"])
        model = tiny_model(vocab)
        group = TokenizedGroup((CLS,), (6, EOS), (), ())
        with pytest.raises(ValueError):
            listwise_loss(model, model, group)

    def test_gradients_away_from_kinks(self):
        vocab = Vocab(["a", "b"])
        model = tiny_model(vocab, seed=7)
        group = make_group(vocab, loses=("ba", "bb"), rw=[1.0, 2.0])
        p = RewardParams()
        lps = [score_sequence(model, list(group.input_ids), list(s))
               for s in (group.win_ids,) + group.lose_ids]
        # One hinge decisively active, one decisively inactive.
        refs = (lps[0] + 6.0, lps[1], lps[2] + 12.0)
        for i in (1, 2):
            gap = p.beta_dpo * ((lps[i] - lps[0]) - (refs[i] - refs[0]))
            assert abs(gap - p.delta) > 0.2
        err = nd.check_gradient(
            lambda: listwise_loss(model, model, group, p, ref_scores=refs),
            model.parameters(), h=1e-5)
        assert err <= 1e-4


class TestBatchLoss:
    def test_mean_of_group_losses(self):
        vocab = Vocab.build(["ab"])
        model = tiny_model(vocab, seed=8)
        g1 = make_group(vocab, win="ab", loses=("ba",))
        g2 = make_group(vocab, win="bb", loses=("aa", "ab"), rw=[1.0, 1.0])
        with nd.no_grad():
            both = dpo_batch_loss(model, model, [g1, g2], "list").item()
            l1 = listwise_loss(model, model, g1).item()
            l2 = listwise_loss(model, model, g2).item()
        assert abs(both - (l1 + l2) / 2.0) < 1e-12

    def test_validation(self):
        vocab = Vocab.build(["ab"])
        model = tiny_model(vocab)
        with pytest.raises(ValueError):
            dpo_batch_loss(model, model, [], "list")
        with pytest.raises(ValueError):
            dpo_batch_loss(model, model, [make_group(vocab)], "rank")


class TestTrainDpo:
    def _groups(self):
        out = []
        for win, lose in [("red dress", "red sofa"), ("red shoes", "red mug"),
                          ("blue lamp", "blue shoe"), ("oak table", "oak cup")]:
            out.append(PreferenceGroup(
                context=UserContext(prefix=win[:2]),
                win=ScoredQuery(win, "Click", 0.5),
                loses=(ScoredQuery(lose, "Show", 0.1),),
                rw=(1.0,)))
        return out

    def _model(self, seed=0):
        texts = [g.win.query for g in self._groups()]
        texts += [l.query for g in self._groups() for l in g.loses]
        vocab = Vocab.build(texts)
        return GenModel(len(vocab), d_model=16, n_layers=1, n_heads=2,
                        d_ff=32, max_enc_len=32, max_dec_len=12), vocab

    def test_zero_lr_curve_matches_reference_closed_form(self):
        model, vocab = self._model()
        groups = self._groups()
        _, curve = train_dpo(model, vocab, groups, mode="list", epochs=2,
                             batch=4, lr=0.0)
        p = RewardParams()
        toks = tokenize_groups(groups, vocab, 32, 12)
        want = float(np.mean([math.log(2.0) + p.alpha * mean_token_nll(model, t)
                              for t in toks]))
        assert abs(curve[0] - want) < 1e-9
        assert curve[0] == curve[1]

    def test_deterministic(self):
        m1, vocab = self._model()
        m2, _ = self._model()
        _, c1 = train_dpo(m1, vocab, self._groups(), epochs=2, batch=2,
                          seed=3, lr=1e-3)
        _, c2 = train_dpo(m2, vocab, self._groups(), epochs=2, batch=2,
                          seed=3, lr=1e-3)
        assert c1 == c2

    def test_win_implicit_reward_increases(self):
        model, vocab = self._model()
        reference = clone_model(model)
        groups = self._groups()
        toks = tokenize_groups(groups, vocab, 32, 12)
        model, _ = train_dpo(model, vocab, groups, mode="list", epochs=6,
                             batch=4, lr=2e-3)
        after = np.mean([implicit_reward(model, reference,
                                         list(t.input_ids), list(t.win_ids))
                         for t in toks])
        assert after > 0.01

    def test_reference_stays_frozen(self):
        model, vocab = self._model()
        snapshot = {k: t.data.copy() for k, t in model.params.items()}
        reference = clone_model(model)
        train_dpo(model, vocab, self._groups(), epochs=2, batch=4, lr=2e-3)
        moved = any(not np.array_equal(model.params[k].data, snapshot[k])
                    for k in snapshot)
        assert moved
        for k in snapshot:
            assert np.array_equal(reference.params[k].data, snapshot[k])

    def test_pair_mode_requires_single_lose(self):
        model, vocab = self._model()
        bad = [PreferenceGroup(
            context=UserContext(prefix="re"),
            win=ScoredQuery("red dress", "Click", 0.2),
            loses=(ScoredQuery("red mug", "Show", 0.0),
                   ScoredQuery("red cup", "Show", 0.0)),
            rw=(1.0, 1.0))]
        with pytest.raises(ValueError):
            train_dpo(model, vocab, bad, mode="pair")

    def test_empty_groups_rejected(self):
        model, vocab = self._model()
        with pytest.raises(ValueError):
            train_dpo(model, vocab, [])
