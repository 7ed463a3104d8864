"""Reward shaping and preference-alignment losses for the generator.

Feedback levels carry decreasing base weights; observed pairs become
win/lose groups whose reward gap sets a per-pair weight.  Alignment
fine-tunes the generator against a frozen reference copy with either a
pair-wise hinge loss or a list-wise multi-negative loss, both mixed with
a supervised term on the win sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as nd
from .corpus import LEVEL_NAMES, PreferenceGroup
from .generator import (
    BOS,
    EOS,
    GenModel,
    Vocab,
    assemble_input,
    pad_batch,
    score_sequence,
)


@dataclass(frozen=True)
class RewardParams:
    """Per-level reward weights (strongest feedback first), pair-weight
    clamp, margin, SFT mix, and implicit-reward scale."""

    level_weights: tuple[float, ...] = (2.0, 1.5, 1.0, 0.5, 0.2, 0.0)
    rw_max: float = 10.0
    delta: float = 0.1
    alpha: float = 0.5
    beta_dpo: float = 0.1

    def __post_init__(self):
        if len(self.level_weights) != len(LEVEL_NAMES):
            raise ValueError("one weight per feedback level required")
        if any(a <= b for a, b in zip(self.level_weights,
                                      self.level_weights[1:])):
            raise ValueError("level weights must be strictly decreasing")
        if self.delta < 0 or self.rw_max <= 0 or self.beta_dpo <= 0:
            raise ValueError("delta must be >= 0; rw_max and beta_dpo > 0")

    def weight_of(self, level: str) -> float:
        try:
            return self.level_weights[LEVEL_NAMES.index(level)]
        except ValueError:
            raise ValueError(f"unknown feedback level {level!r}") from None


def reward(level: str, pi: float, params: RewardParams = RewardParams()) -> float:
    """Level weight scaled by e to the query's within-level frequency."""
    if not 0.0 <= pi <= 1.0:
        raise ValueError(f"pi must lie in [0, 1], got {pi}")
    return params.weight_of(level) * math.exp(pi)


def reward_weight(r_w: float, r_l: float,
                  params: RewardParams = RewardParams()) -> float:
    """Inverse reward gap, clamped at rw_max.  Requires r_w > r_l."""
    gap = r_w - r_l
    if gap <= 0:
        raise ValueError(f"reward gap must be positive, got {gap}")
    return min(params.rw_max, 1.0 / gap)


@dataclass(frozen=True)
class TokenizedGroup:
    """A preference group with token ids precomputed for the generator."""

    input_ids: tuple[int, ...]
    win_ids: tuple[int, ...]
    lose_ids: tuple[tuple[int, ...], ...]
    rw: tuple[float, ...]


def tokenize_groups(groups: list[PreferenceGroup], vocab: Vocab,
                    max_enc_len: int, max_dec_len: int,
                    params: RewardParams = RewardParams()) -> list[TokenizedGroup]:
    """Assembles inputs and closes win/lose sequences with [EOS]."""
    def seq(q: str) -> tuple[int, ...]:
        return tuple(vocab.encode(q)[:max_dec_len - 1]) + (EOS,)

    out = []
    for g in groups:
        if len(g.rw) != len(g.loses):
            raise ValueError("one rw entry per lose required")
        if any(not 0.0 < w <= params.rw_max for w in g.rw):
            raise ValueError("rw entries must be positive and <= rw_max")
        out.append(TokenizedGroup(
            input_ids=tuple(assemble_input(g.context, vocab, max_enc_len)),
            win_ids=seq(g.win.query),
            lose_ids=tuple(seq(l.query) for l in g.loses),
            rw=tuple(g.rw)))
    return out


def _sequence_logprobs(model: GenModel, input_ids, seqs) -> nd.Tensor:
    """Differentiable teacher-forced log-prob sums, one per sequence,
    sharing a single encoder pass over input_ids."""
    enc_ids, enc_valid = pad_batch([list(input_ids)])
    enc_out = model.encode(enc_ids, enc_valid)
    dec_in = [[BOS] + list(s[:-1]) for s in seqs]
    dec_ids, dec_valid = pad_batch(dec_in)
    tgt_ids, tgt_valid = pad_batch([list(s) for s in seqs])
    big_enc = nd.concat([enc_out] * len(seqs), axis=0)
    big_valid = np.repeat(enc_valid, len(seqs), axis=0)
    logits = model.decode(dec_ids, dec_valid, big_enc, big_valid)
    picked = nd.gather_last(nd.log_softmax(logits), tgt_ids)
    return nd.sum(nd.mul(picked, nd.Tensor(tgt_valid)), axis=1)


def implicit_reward(policy: GenModel, reference: GenModel, input_ids,
                    query_ids, beta_dpo: float = 0.1) -> float:
    """Scaled log-likelihood ratio of the policy over the reference."""
    return beta_dpo * (score_sequence(policy, list(input_ids), list(query_ids))
                       - score_sequence(reference, list(input_ids),
                                        list(query_ids)))


def _reference_scores(reference: GenModel, group: TokenizedGroup) -> tuple:
    return tuple(score_sequence(reference, list(group.input_ids), list(s))
                 for s in (group.win_ids,) + group.lose_ids)


def _scalar(x: float) -> nd.Tensor:
    return nd.Tensor(np.array([float(x)]))


def _group_terms(policy: GenModel, reference: GenModel, group: TokenizedGroup,
                 params: RewardParams, ref_scores=None):
    """Returns (per-sequence policy logprobs, reference floats, SFT term)."""
    seqs = (group.win_ids,) + group.lose_ids
    lps = _sequence_logprobs(policy, group.input_ids, seqs)
    refs = _reference_scores(reference, group) if ref_scores is None \
        else ref_scores
    lp_w = nd.narrow(lps, 0, 0, 1)
    sft = nd.scale(lp_w, -params.alpha / len(group.win_ids))
    return lps, refs, lp_w, sft


def pairwise_loss(policy: GenModel, reference: GenModel,
                  group: TokenizedGroup,
                  params: RewardParams = RewardParams(),
                  corrected_pair_hinge: bool = False,
                  ref_scores=None) -> nd.Tensor:
    """-log sigma(rw * max(0, r_w - r_l - delta)) - alpha * mean-token
    log-likelihood of the win; single-negative groups only.

    As printed, the hinge zeroes the preference gradient once the pair is
    violated; corrected_pair_hinge swaps in -max(0, delta - (r_w - r_l)),
    which penalizes exactly the violated region instead.
    """
    if len(group.lose_ids) != 1:
        raise ValueError("pairwise_loss needs exactly one lose")
    lps, refs, lp_w, sft = _group_terms(policy, reference, group, params,
                                        ref_scores)
    lp_l = nd.narrow(lps, 0, 1, 1)
    gap = nd.scale(nd.sub(nd.sub(lp_w, lp_l), _scalar(refs[0] - refs[1])),
                   params.beta_dpo)
    if corrected_pair_hinge:
        arg = nd.scale(nd.relu(nd.sub(_scalar(params.delta), gap)), -1.0)
    else:
        arg = nd.relu(nd.sub(gap, _scalar(params.delta)))
    pref = nd.scale(nd.log_sigmoid(nd.scale(arg, group.rw[0])), -1.0)
    return nd.sum(nd.add(pref, sft))


def listwise_loss(policy: GenModel, reference: GenModel,
                  group: TokenizedGroup,
                  params: RewardParams = RewardParams(),
                  ref_scores=None) -> nd.Tensor:
    """-log sigma(-log sum_l exp(rw_l * max(0, r_l - r_w - delta)))
    - alpha * mean-token log-likelihood of the win."""
    if not group.lose_ids:
        raise ValueError("listwise_loss needs at least one lose")
    lps, refs, lp_w, sft = _group_terms(policy, reference, group, params,
                                        ref_scores)
    inner = None
    for i in range(len(group.lose_ids)):
        lp_l = nd.narrow(lps, 0, 1 + i, 1)
        gap = nd.scale(nd.sub(nd.sub(lp_l, lp_w),
                              _scalar(refs[1 + i] - refs[0])),
                       params.beta_dpo)
        term = nd.exp(nd.scale(nd.relu(nd.sub(gap, _scalar(params.delta))),
                               group.rw[i]))
        inner = term if inner is None else nd.add(inner, term)
    pref = nd.scale(nd.log_sigmoid(nd.scale(nd.log(inner), -1.0)), -1.0)
    return nd.sum(nd.add(pref, sft))


def dpo_batch_loss(policy: GenModel, reference: GenModel,
                   groups: list[TokenizedGroup], mode: str = "list",
                   params: RewardParams = RewardParams(),
                   corrected_pair_hinge: bool = False,
                   ref_cache: dict | None = None) -> nd.Tensor:
    """Mean group loss for the selected mode."""
    if mode not in ("pair", "list"):
        raise ValueError(f"mode must be 'pair' or 'list', got {mode!r}")
    if not groups:
        raise ValueError("empty batch")
    total = None
    for i, g in enumerate(groups):
        refs = None if ref_cache is None else ref_cache[id(g)]
        if mode == "pair":
            term = pairwise_loss(policy, reference, g, params,
                                 corrected_pair_hinge, refs)
        else:
            term = listwise_loss(policy, reference, g, params, refs)
        total = term if total is None else nd.add(total, term)
    return nd.scale(total, 1.0 / len(groups))


def clone_model(model: GenModel) -> GenModel:
    twin = GenModel(model.vocab_size, d_model=model.d_model,
                    n_layers=model.n_layers, n_heads=model.n_heads,
                    d_ff=model.d_ff, max_enc_len=model.max_enc_len,
                    max_dec_len=model.max_dec_len)
    for name, tensor in twin.params.items():
        tensor.data = model.params[name].data.copy()
    return twin


def train_dpo(model: GenModel, vocab: Vocab, groups: list[PreferenceGroup],
              mode: str = "list", params: RewardParams = RewardParams(),
              epochs: int = 3, batch: int = 8, seed: int = 0,
              lr: float = 1e-4,
              corrected_pair_hinge: bool = False) -> tuple[GenModel, list[float]]:
    """Aligns the model against a frozen copy of itself; returns the
    policy and per-epoch mean losses."""
    if not groups:
        raise ValueError("train_dpo needs a non-empty group list")
    tokenized = tokenize_groups(groups, vocab, model.max_enc_len,
                                model.max_dec_len, params)
    if mode == "pair" and any(len(g.lose_ids) != 1 for g in tokenized):
        raise ValueError("pair mode requires single-lose groups")
    reference = clone_model(model)
    # The reference never moves, so its scores are constants.
    ref_cache = {id(g): _reference_scores(reference, g) for g in tokenized}
    rng = np.random.default_rng(seed)
    opt = nd.Adam(model.parameters(), lr=lr)
    curve: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(len(tokenized))
        losses = []
        for start in range(0, len(tokenized), batch):
            chunk = [tokenized[i] for i in order[start:start + batch]]
            with nd.Graph() as g:
                loss = dpo_batch_loss(model, reference, chunk, mode, params,
                                      corrected_pair_hinge, ref_cache)
                nd.backward(loss, g)
            opt.step()
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
    return model, curve
