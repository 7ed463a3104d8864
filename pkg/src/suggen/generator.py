"""Unified encoder-decoder query generator.

One character-level transformer consumes the assembled request context
(prefix, related queries, user history, profile) and decodes suggestion
candidates auto-regressively.  Includes supervised next-token training,
teacher-forced sequence scoring, and beam-search decoding.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as nd
from .artifacts import load_checkpoint, save_checkpoint
from .corpus import UserContext

SPECIAL_TOKENS = ("[CLS]", "[SEP]", "[BOS]", "[EOS]", "[PAD]", "[UNK]")
CLS, SEP, BOS, EOS, PAD, UNK = range(6)


class Vocab:
    """Character vocabulary with six reserved specials at ids 0-5."""

    def __init__(self, chars: list[str]):
        if len(set(chars)) != len(chars):
            raise ValueError("duplicate characters in vocabulary")
        self.chars = list(chars)
        self.tokens = list(SPECIAL_TOKENS) + self.chars
        self._char_id = {c: i + len(SPECIAL_TOKENS)
                         for i, c in enumerate(self.chars)}

    @classmethod
    def build(cls, texts: list[str]) -> "Vocab":
        # The joiner and profile punctuation must always be encodable.
        charset = set(",:|") | {c for t in texts for c in t}
        return cls(sorted(charset))

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self._char_id.get(c, UNK) for c in text]

    def decode(self, ids) -> str:
        return "".join(self.tokens[i] for i in ids
                       if i >= len(SPECIAL_TOKENS))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"schema": 1, "tokens": self.tokens}, f, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            tokens = json.load(f)["tokens"]
        if tuple(tokens[:6]) != SPECIAL_TOKENS:
            raise ValueError("tokenizer file is missing the reserved specials")
        return cls(tokens[6:])


def assemble_input(ctx: UserContext, vocab: Vocab, max_enc_len: int = 160,
                   max_related: int = 10, max_history: int = 10) -> list[int]:
    """[CLS] p [SEP] related [SEP] history [SEP] profile, comma-joined lists.

    When the sequence exceeds max_enc_len, history tokens are dropped from
    the right first, then related tokens; the prefix and profile are never
    truncated.
    """
    if not ctx.prefix:
        raise ValueError("prefix must be non-empty")

    def join(items) -> list[int]:
        out: list[int] = []
        for i, q in enumerate(items):
            if i:
                out.extend(vocab.encode(","))
            out.extend(vocab.encode(q))
        return out

    prefix_ids = vocab.encode(ctx.prefix)
    related = join(list(ctx.related)[:max_related])
    history = join(list(ctx.history)[:max_history])
    profile_ids = vocab.encode(ctx.profile) if ctx.profile else []

    def total(rel, hist):
        return 4 + len(prefix_ids) + len(rel) + len(hist) + len(profile_ids)

    overflow = total(related, history) - max_enc_len
    if overflow > 0:
        cut = min(overflow, len(history))
        history = history[:len(history) - cut]
        overflow -= cut
    if overflow > 0:
        cut = min(overflow, len(related))
        related = related[:len(related) - cut]
        overflow -= cut
    if overflow > 0:
        raise ValueError("prefix and profile alone exceed the encoder length")
    return ([CLS] + prefix_ids + [SEP] + related + [SEP] + history
            + [SEP] + profile_ids)


@dataclass(frozen=True)
class BeamHypothesis:
    ids: tuple[int, ...]
    score: float


def _sinusoidal(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None].astype(np.float64)
    dim = np.arange(d_model // 2)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * dim / d_model)
    pe = np.zeros((max_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


class GenModel:
    """Pre-norm transformer encoder-decoder with tied token embeddings."""

    def __init__(self, vocab_size: int, d_model: int = 64, n_layers: int = 2,
                 n_heads: int = 2, d_ff: int = 128, max_enc_len: int = 160,
                 max_dec_len: int = 24, seed: int = 0):
        if d_model % n_heads:
            raise ValueError("d_model must divide evenly across heads")
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.d_ff = d_ff
        self.max_enc_len = max_enc_len
        self.max_dec_len = max_dec_len
        self._pe = _sinusoidal(max(max_enc_len, max_dec_len), d_model)
        rng = np.random.default_rng(seed)
        p: dict[str, nd.Tensor] = {}

        def weight(name, shape, scale):
            p[name] = nd.Tensor(rng.normal(0.0, scale, shape),
                                requires_grad=True)

        def norm(name):
            p[name + "_g"] = nd.Tensor(np.ones(d_model), requires_grad=True)
            p[name + "_b"] = nd.Tensor(np.zeros(d_model), requires_grad=True)

        def block(name, cross: bool):
            for attn in (["self", "cross"] if cross else ["self"]):
                for w in ("wq", "wk", "wv", "wo"):
                    weight(f"{name}_{attn}_{w}", (d_model, d_model),
                           1.0 / math.sqrt(d_model))
                norm(f"{name}_{attn}_ln")
            weight(f"{name}_ff_w1", (d_model, d_ff), 1.0 / math.sqrt(d_model))
            p[f"{name}_ff_b1"] = nd.Tensor(np.zeros(d_ff), requires_grad=True)
            weight(f"{name}_ff_w2", (d_ff, d_model), 1.0 / math.sqrt(d_ff))
            p[f"{name}_ff_b2"] = nd.Tensor(np.zeros(d_model), requires_grad=True)
            norm(f"{name}_ff_ln")

        weight("emb", (vocab_size, d_model), 0.02)
        for i in range(n_layers):
            block(f"enc{i}", cross=False)
            block(f"dec{i}", cross=True)
        norm("enc_final_ln")
        norm("dec_final_ln")
        self.params = p

    def parameters(self) -> list[nd.Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def _ln(self, name: str, x: nd.Tensor) -> nd.Tensor:
        return nd.layer_norm(x, self.params[name + "_g"],
                             self.params[name + "_b"])

    def _attn(self, name: str, q_in: nd.Tensor, kv_in: nd.Tensor,
              add_mask: np.ndarray | None) -> nd.Tensor:
        p = self.params
        q = nd.matmul(q_in, p[name + "_wq"])
        k = nd.matmul(kv_in, p[name + "_wk"])
        v = nd.matmul(kv_in, p[name + "_wv"])
        heads = []
        for h in range(self.n_heads):
            lo = h * self.d_head
            qh = nd.narrow(q, 2, lo, self.d_head)
            kh = nd.narrow(k, 2, lo, self.d_head)
            vh = nd.narrow(v, 2, lo, self.d_head)
            scores = nd.scale(nd.matmul(qh, nd.transpose_last2(kh)),
                              1.0 / math.sqrt(self.d_head))
            if add_mask is not None:
                scores = nd.add(scores, nd.Tensor(add_mask))
            heads.append(nd.matmul(nd.softmax(scores), vh))
        return nd.matmul(nd.concat(heads, axis=2), p[name + "_wo"])

    def _ff(self, name: str, x: nd.Tensor) -> nd.Tensor:
        p = self.params
        h = nd.relu(nd.add(nd.matmul(x, p[name + "_ff_w1"]),
                           p[name + "_ff_b1"]))
        return nd.add(nd.matmul(h, p[name + "_ff_w2"]), p[name + "_ff_b2"])

    def _embed(self, ids: np.ndarray) -> nd.Tensor:
        x = nd.scale(nd.embedding(self.params["emb"], ids),
                     math.sqrt(self.d_model))
        return nd.add(x, nd.Tensor(self._pe[:ids.shape[1]]))

    def encode(self, ids: np.ndarray, valid: np.ndarray) -> nd.Tensor:
        x = self._embed(ids)
        mask = (1.0 - valid)[:, None, :] * -1e9
        for i in range(self.n_layers):
            name = f"enc{i}"
            h = self._ln(f"{name}_self_ln", x)
            x = nd.add(x, self._attn(f"{name}_self", h, h, mask))
            x = nd.add(x, self._ff(name, self._ln(f"{name}_ff_ln", x)))
        return self._ln("enc_final_ln", x)

    def decode(self, dec_ids: np.ndarray, dec_valid: np.ndarray,
               enc_out: nd.Tensor, enc_valid: np.ndarray) -> nd.Tensor:
        length = dec_ids.shape[1]
        causal = np.triu(np.full((length, length), -1e9), k=1)
        self_mask = causal[None] + (1.0 - dec_valid)[:, None, :] * -1e9
        cross_mask = (1.0 - enc_valid)[:, None, :] * -1e9
        x = self._embed(dec_ids)
        for i in range(self.n_layers):
            name = f"dec{i}"
            h = self._ln(f"{name}_self_ln", x)
            x = nd.add(x, self._attn(f"{name}_self", h, h, self_mask))
            h = self._ln(f"{name}_cross_ln", x)
            x = nd.add(x, self._attn(f"{name}_cross", h, enc_out, cross_mask))
            x = nd.add(x, self._ff(name, self._ln(f"{name}_ff_ln", x)))
        h = self._ln("dec_final_ln", x)
        return nd.matmul(h, nd.transpose_last2(self.params["emb"]))


def pad_batch(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pads with [PAD]; returns (ids, validity) float mask."""
    if not seqs:
        raise ValueError("empty batch")
    length = max(len(s) for s in seqs)
    ids = np.full((len(seqs), length), PAD, dtype=np.int64)
    valid = np.zeros((len(seqs), length))
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        valid[i, :len(s)] = 1.0
    return ids, valid


def token_cross_entropy(logits: nd.Tensor, targets: np.ndarray,
                        mask: np.ndarray) -> nd.Tensor:
    """Mean negative log-likelihood over unmasked target positions."""
    n = float(mask.sum())
    if n <= 0:
        raise ValueError("cross entropy needs at least one target token")
    picked = nd.gather_last(nd.log_softmax(logits), targets)
    return nd.scale(nd.sum(nd.mul(picked, nd.Tensor(mask))), -1.0 / n)


def _forward_logits(model: GenModel, input_batch: list[list[int]],
                    dec_in_batch: list[list[int]]):
    enc_ids, enc_valid = pad_batch(input_batch)
    dec_ids, dec_valid = pad_batch(dec_in_batch)
    if enc_ids.shape[1] > model.max_enc_len:
        raise ValueError("encoder input exceeds max_enc_len")
    if dec_ids.shape[1] > model.max_dec_len:
        raise ValueError("decoder input exceeds max_dec_len")
    enc_out = model.encode(enc_ids, enc_valid)
    return model.decode(dec_ids, dec_valid, enc_out, enc_valid)


def sft_loss(model: GenModel, input_ids: list[list[int]],
             target_query_ids: list[list[int]]) -> nd.Tensor:
    """Next-token cross entropy: [BOS]-shifted targets closed with [EOS]."""
    if any(len(t) < 1 for t in target_query_ids):
        raise ValueError("targets must have at least one token")
    dec_in = [[BOS] + list(t) for t in target_query_ids]
    logits = _forward_logits(model, input_ids, dec_in)
    targets_out = [list(t) + [EOS] for t in target_query_ids]
    tgt, tgt_valid = pad_batch(targets_out)
    return token_cross_entropy(logits, tgt, tgt_valid)


def train_sft(model: GenModel, vocab: Vocab,
              dataset: list[tuple[UserContext, str]], epochs: int = 5,
              batch: int = 16, seed: int = 0, lr: float = 1e-3,
              checkpoint_dir: str | None = None,
              cfg_hash: str = "") -> tuple[GenModel, list[float]]:
    """Adam over sft_loss; per-epoch mean loss curve, optional per-epoch
    checkpoints."""
    if not dataset:
        raise ValueError("train_sft needs a non-empty dataset")
    examples = [(assemble_input(ctx, vocab, model.max_enc_len),
                 vocab.encode(target)[:model.max_dec_len - 1])
                for ctx, target in dataset]
    rng = np.random.default_rng(seed)
    opt = nd.Adam(model.parameters(), lr=lr)
    curve: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(len(examples))
        losses = []
        for start in range(0, len(examples), batch):
            chunk = [examples[i] for i in order[start:start + batch]]
            with nd.Graph() as g:
                loss = sft_loss(model, [c[0] for c in chunk],
                                [c[1] for c in chunk])
                nd.backward(loss, g)
            opt.step()
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
        if checkpoint_dir is not None:
            save_gen(model, os.path.join(checkpoint_dir,
                                         f"sft_epoch{epoch:02d}.json"),
                     cfg_hash)
    return model, curve


def score_sequence(model: GenModel, input_ids: list[int],
                   query_ids: list[int]) -> float:
    """Teacher-forced sum of log-probabilities of query_ids as given."""
    if not query_ids:
        return 0.0
    if len(query_ids) > model.max_dec_len:
        raise ValueError("query exceeds max_dec_len")
    dec_in = [[BOS] + list(query_ids[:-1])]
    with nd.no_grad():
        logits = _forward_logits(model, [list(input_ids)], dec_in)
        logp = nd.log_softmax(logits).data[0]
    return float(sum(logp[t, tok] for t, tok in enumerate(query_ids)))


def beam_search(model: GenModel, vocab: Vocab, input_ids: list[int],
                beam_size: int = 32,
                max_len: int | None = None) -> list[BeamHypothesis]:
    """Breadth-first beam over log-prob sums, no length normalization.

    Hypotheses end at [EOS] or run to max_len.  Returned scores are exact
    teacher-forced recomputations; ties sort lexicographically by token ids
    and duplicate decoded strings keep the higher-scoring hypothesis.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be at least 1")
    max_len = model.max_dec_len if max_len is None else max_len
    if not 1 <= max_len <= model.max_dec_len:
        raise ValueError("max_len must lie in [1, max_dec_len]")
    allowed = [EOS] + list(range(len(SPECIAL_TOKENS), len(vocab)))

    enc_ids, enc_valid = pad_batch([list(input_ids)])
    with nd.no_grad():
        enc_out = model.encode(enc_ids, enc_valid)
    enc_out_c = nd.Tensor(enc_out.data)

    active: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    pool: list[tuple[int, ...]] = []
    for _ in range(max_len):
        dec_in = [[BOS] + list(ids) for ids, _ in active]
        dec_ids, dec_valid = pad_batch(dec_in)
        big_enc = nd.Tensor(np.repeat(enc_out_c.data, len(active), axis=0))
        big_valid = np.repeat(enc_valid, len(active), axis=0)
        with nd.no_grad():
            logits = model.decode(dec_ids, dec_valid, big_enc, big_valid)
            logp = nd.log_softmax(logits).data[:, -1, :]
        candidates = [(ids + (tok,), score + float(logp[i, tok]))
                      for i, (ids, score) in enumerate(active)
                      for tok in allowed]
        candidates.sort(key=lambda c: (-c[1], c[0]))
        top = candidates[:beam_size]
        active = []
        for ids, score in top:
            if ids[-1] == EOS or len(ids) >= max_len:
                pool.append(ids)
            else:
                active.append((ids, score))
        if not active:
            break

    rescored = [(ids, score_sequence(model, input_ids, list(ids)))
                for ids in pool]
    rescored.sort(key=lambda c: (-c[1], c[0]))
    best_by_text: dict[str, tuple[tuple[int, ...], float]] = {}
    ordered: list[tuple[tuple[int, ...], float]] = []
    for ids, score in rescored:
        text = vocab.decode(ids)
        if text not in best_by_text:
            best_by_text[text] = (ids, score)
            ordered.append((ids, score))
    return [BeamHypothesis(ids, score) for ids, score in ordered[:beam_size]]


def save_gen(model: GenModel, path: str, cfg_hash: str = "") -> None:
    arrays = {name: t.data for name, t in model.params.items()}
    meta = {"vocab_size": model.vocab_size, "d_model": model.d_model,
            "n_layers": model.n_layers, "n_heads": model.n_heads,
            "d_ff": model.d_ff, "max_enc_len": model.max_enc_len,
            "max_dec_len": model.max_dec_len}
    save_checkpoint(path, "generator", cfg_hash, arrays, meta)


def load_gen(path: str) -> GenModel:
    ckpt = load_checkpoint(path, "generator")
    m = ckpt["meta"]
    model = GenModel(vocab_size=m["vocab_size"], d_model=m["d_model"],
                     n_layers=m["n_layers"], n_heads=m["n_heads"],
                     d_ff=m["d_ff"], max_enc_len=m["max_enc_len"],
                     max_dec_len=m["max_dec_len"])
    for name, tensor in model.params.items():
        tensor.data = ckpt["arrays"][name]
    return model
