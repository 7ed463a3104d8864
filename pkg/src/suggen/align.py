"""Character-level text encoder aligned with batch-contrastive training.

Maps prefixes and queries onto one unit sphere so that a typed prefix lands
near the queries users go on to click.  Pair mining, the contrastive loss,
and the weighted prefix-augmentation step all live here.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as nd
from .artifacts import load_checkpoint, save_checkpoint
from .corpus import POSITIVE_LEVELS, InteractionRecord

_CHARSET = "abcdefghijklmnopqrstuvwxyz0123456789 -.&'"
# id 0 is the unknown token; charset characters start at 1.
_CHAR_ID = {c: i + 1 for i, c in enumerate(_CHARSET)}


@dataclass(frozen=True, eq=False)
class AlignedEmbedding:
    vector: np.ndarray
    source: str = "query"


def _vec(x) -> np.ndarray:
    return x.vector if isinstance(x, AlignedEmbedding) else np.asarray(x, dtype=np.float64)


def normalize_rows(x: nd.Tensor) -> nd.Tensor:
    """Scales each row along the last axis to unit L2 norm (grad-capable)."""
    sq = nd.sum(nd.mul(x, x), axis=-1, keepdims=True)
    return nd.div(x, nd.sqrt(nd.add(sq, nd.Tensor(1e-20))))


class TextEncoder:
    """Mean-pooled character embeddings through a two-layer feed-forward
    stack, unit-normalized.  Immutable after training; safe to share across
    threads for encoding."""

    def __init__(self, d_emb: int = 32, d_hidden: int = 64, d_out: int = 32,
                 tau: float = 0.05, seed: int = 0):
        self.d_emb = d_emb
        self.d_hidden = d_hidden
        self.d_out = d_out
        self.tau = tau
        rng = np.random.default_rng(seed)
        n_vocab = len(_CHARSET) + 1

        def param(shape, scale):
            return nd.Tensor(rng.normal(0.0, scale, shape), requires_grad=True)

        self.emb = param((n_vocab, d_emb), 0.5)
        self.w1 = param((d_emb, d_hidden), 1.0 / math.sqrt(d_emb))
        self.b1 = nd.Tensor(np.zeros(d_hidden), requires_grad=True)
        self.w2 = param((d_hidden, d_out), 1.0 / math.sqrt(d_hidden))
        self.b2 = nd.Tensor(np.zeros(d_out), requires_grad=True)

    def parameters(self) -> list[nd.Tensor]:
        return [self.emb, self.w1, self.b1, self.w2, self.b2]

    def tokenize(self, text: str) -> list[int]:
        if not text:
            raise ValueError("cannot encode empty text")
        return [_CHAR_ID.get(c, 0) for c in text.lower()]

    def encode_batch(self, texts: list[str]) -> nd.Tensor:
        """Returns a (B, d_out) tensor of unit rows; records gradients when
        a graph is active."""
        tokens = [self.tokenize(t) for t in texts]
        max_len = max(len(t) for t in tokens)
        ids = np.zeros((len(tokens), max_len), dtype=np.int64)
        mask = np.zeros((len(tokens), max_len, 1))
        for i, t in enumerate(tokens):
            ids[i, :len(t)] = t
            mask[i, :len(t), 0] = 1.0
        counts = mask.sum(axis=1)
        emb = nd.mul(nd.embedding(self.emb, ids), nd.Tensor(mask))
        pooled = nd.div(nd.sum(emb, axis=1), nd.Tensor(counts))
        hidden = nd.tanh(nd.add(nd.matmul(pooled, self.w1), self.b1))
        out = nd.add(nd.matmul(hidden, self.w2), self.b2)
        return normalize_rows(out)


def encode_text(encoder: TextEncoder, text: str, source: str = "query") -> AlignedEmbedding:
    with nd.no_grad():
        vec = encoder.encode_batch([text]).data[0].copy()
    return AlignedEmbedding(vec, source)


def encode_many(encoder: TextEncoder, texts: list[str]) -> np.ndarray:
    """Convenience batch encode to a plain (B, d) array."""
    if not texts:
        return np.zeros((0, encoder.d_out))
    with nd.no_grad():
        return encoder.encode_batch(texts).data.copy()


def batch_contrastive_loss(trigger_embs: nd.Tensor, target_embs: nd.Tensor,
                           tau: float) -> nd.Tensor:
    """Symmetric in-batch softmax cross-entropy over cosine logits.

    Row i of the triggers should score its own target above every other
    target in the batch, and vice versa.
    """
    if trigger_embs.shape != target_embs.shape:
        raise nd.ShapeError("batch_contrastive_loss", trigger_embs.shape,
                            target_embs.shape)
    batch = trigger_embs.shape[0]
    if batch == 0:
        raise ValueError("batch_contrastive_loss needs a non-empty batch")
    logits = nd.scale(nd.matmul(trigger_embs, nd.transpose_last2(target_embs)),
                      1.0 / tau)
    diag = np.arange(batch)
    t2q = nd.gather_last(nd.log_softmax(logits), diag)
    q2t = nd.gather_last(nd.log_softmax(nd.transpose_last2(logits)), diag)
    return nd.scale(nd.add(nd.mean(t2q), nd.mean(q2t)), -0.5)


def mine_pairs(records: list[InteractionRecord], min_cooccur: int = 2,
               min_sim: float = 0.3, encoder: TextEncoder | None = None,
               session_gap: int = 1800) -> list[tuple[str, str]]:
    """Mines (trigger, target) training pairs from the interaction log.

    Two sources: a prefix paired with a query it led to at a positive level,
    and two distinct queries clicked by one user inside one session (ts gaps
    of at most session_gap).  Either kind must co-occur at least min_cooccur
    times.  When an encoder is given, pairs whose cosine under it falls
    below min_sim are dropped.
    """
    if not records:
        raise ValueError("mine_pairs needs a non-empty log")
    p2q: dict[tuple[str, str], int] = {}
    q2q: dict[tuple[str, str], int] = {}
    by_user: dict[str, list[InteractionRecord]] = {}
    for r in sorted(records, key=lambda r: (r.ts, r.prefix, r.query, r.level)):
        if r.level not in POSITIVE_LEVELS:
            continue
        key = (r.prefix, r.query)
        p2q[key] = p2q.get(key, 0) + 1
        by_user.setdefault(r.user_id, []).append(r)

    for rows in by_user.values():
        sessions: list[list[str]] = [[]]
        last_ts = None
        for r in rows:
            if last_ts is not None and r.ts - last_ts > session_gap:
                sessions.append([])
            sessions[-1].append(r.query)
            last_ts = r.ts
        for queries in sessions:
            for a, b in itertools.combinations(sorted(set(queries)), 2):
                q2q[(a, b)] = q2q.get((a, b), 0) + 1

    pairs = sorted({k for k, n in p2q.items() if n >= min_cooccur}
                   | {k for k, n in q2q.items() if n >= min_cooccur})
    if encoder is None:
        return pairs
    texts = sorted({t for p in pairs for t in p})
    embs = dict(zip(texts, encode_many(encoder, texts)))
    return [(a, b) for a, b in pairs if float(embs[a] @ embs[b]) >= min_sim]


def augment_core(e_p, query_embs, w: float) -> np.ndarray:
    """Pre-normalization mix: (1 - w) * e_p + w * mean(query_embs)."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"augmentation weight must lie in [0, 1], got {w}")
    vecs = [_vec(q) for q in query_embs]
    base = _vec(e_p)
    if not vecs:
        return base.copy()
    return (1.0 - w) * base + w * np.mean(vecs, axis=0)


def augment_prefix(e_p, query_embs, w: float = 0.5) -> AlignedEmbedding:
    """Pulls a prefix embedding toward its related queries, re-normalized.

    An empty query list means no enhancement is available and the prefix
    embedding passes through unchanged.
    """
    vecs = [_vec(q) for q in query_embs]
    if not vecs:
        return AlignedEmbedding(_vec(e_p).copy(), "prefix")
    mixed = augment_core(e_p, vecs, w)
    norm = float(np.linalg.norm(mixed))
    if norm > 0:
        mixed = mixed / norm
    return AlignedEmbedding(mixed, "prefix")


def train_alignment(encoder: TextEncoder, pairs: list[tuple[str, str]],
                    epochs: int = 5, batch: int = 32,
                    seed: int = 0) -> tuple[TextEncoder, list[float]]:
    """Adam over the contrastive loss; returns per-epoch mean losses."""
    if len(pairs) < batch:
        raise ValueError(f"need at least {batch} pairs, got {len(pairs)}")
    rng = np.random.default_rng(seed)
    opt = nd.Adam(encoder.parameters())
    curve: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for start in range(0, len(pairs) - batch + 1, batch):
            idx = order[start:start + batch]
            with nd.Graph() as g:
                trig = encoder.encode_batch([pairs[i][0] for i in idx])
                targ = encoder.encode_batch([pairs[i][1] for i in idx])
                loss = batch_contrastive_loss(trig, targ, encoder.tau)
                nd.backward(loss, g)
            opt.step()
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
    return encoder, curve


def save_encoder(encoder: TextEncoder, path: str, cfg_hash: str = "") -> None:
    arrays = {"emb": encoder.emb.data, "w1": encoder.w1.data,
              "b1": encoder.b1.data, "w2": encoder.w2.data,
              "b2": encoder.b2.data}
    meta = {"d_emb": encoder.d_emb, "d_hidden": encoder.d_hidden,
            "d_out": encoder.d_out, "tau": encoder.tau, "charset": _CHARSET}
    save_checkpoint(path, "text_encoder", cfg_hash, arrays, meta)


def load_encoder(path: str) -> TextEncoder:
    ckpt = load_checkpoint(path, "text_encoder")
    meta = ckpt["meta"]
    if meta["charset"] != _CHARSET:
        raise ValueError("encoder checkpoint built with a different charset")
    enc = TextEncoder(d_emb=meta["d_emb"], d_hidden=meta["d_hidden"],
                      d_out=meta["d_out"], tau=meta["tau"])
    for name, tensor in zip(("emb", "w1", "b1", "w2", "b2"),
                            enc.parameters()):
        tensor.data = ckpt["arrays"][name]
    return enc
