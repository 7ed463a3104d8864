"""Residual-quantized autoencoder over aligned embeddings.

Compresses each query embedding into a short tuple of codebook indices (a
semantic ID) whose leading positions capture coarse topic and whose trailing
positions refine it.  The same codes power a fine-to-coarse related-query
search with a diversity screen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as nd
from .artifacts import load_checkpoint, save_checkpoint
from .corpus import POSITIVE_LEVELS, InteractionRecord


@dataclass(frozen=True)
class SemanticID:
    codes: tuple[int, ...]

    def prefix(self, length: int) -> tuple[int, ...]:
        return self.codes[:length]


class RqvaeModel:
    """Three-block feed-forward encoder/decoder around residual codebooks.

    With identity_encoder=True the latent equals the input (d_in must match
    d_latent) and only the codebooks are trainable; used for hand-checkable
    quantization tests.
    """

    def __init__(self, d_in: int = 32, d_hidden: int = 32, d_latent: int = 16,
                 n_levels: int = 4, codebook_size: int = 64,
                 beta: float = 0.25, seed: int = 0,
                 identity_encoder: bool = False):
        if identity_encoder and d_in != d_latent:
            raise ValueError("identity encoder needs d_in == d_latent")
        self.d_in = d_in
        self.d_hidden = d_hidden
        self.d_latent = d_latent
        self.n_levels = n_levels
        self.codebook_size = codebook_size
        self.beta = beta
        self.identity_encoder = identity_encoder
        rng = np.random.default_rng(seed)

        def linear(d_a, d_b):
            w = nd.Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_a), (d_a, d_b)),
                          requires_grad=True)
            b = nd.Tensor(np.zeros(d_b), requires_grad=True)
            return w, b

        enc_dims = [d_in, d_hidden, d_hidden, d_latent]
        dec_dims = [d_latent, d_hidden, d_hidden, d_in]
        self.enc_layers = [linear(a, b) for a, b in zip(enc_dims, enc_dims[1:])]
        self.dec_layers = [linear(a, b) for a, b in zip(dec_dims, dec_dims[1:])]
        self.codebooks = [
            nd.Tensor(rng.normal(0.0, 0.1, (codebook_size, d_latent)),
                      requires_grad=True)
            for _ in range(n_levels)
        ]

    def parameters(self) -> list[nd.Tensor]:
        out: list[nd.Tensor] = []
        if not self.identity_encoder:
            for w, b in self.enc_layers + self.dec_layers:
                out.extend([w, b])
        out.extend(self.codebooks)
        return out

    def _stack(self, x: nd.Tensor, layers) -> nd.Tensor:
        h = x
        for i, (w, b) in enumerate(layers):
            h = nd.add(nd.matmul(h, w), b)
            if i < len(layers) - 1:
                h = nd.tanh(h)
        return h

    def encode(self, x: nd.Tensor) -> nd.Tensor:
        if self.identity_encoder:
            return x
        return self._stack(x, self.enc_layers)

    def decode(self, q: nd.Tensor) -> nd.Tensor:
        if self.identity_encoder:
            return q
        return self._stack(q, self.dec_layers)


def quantize_level(residual: np.ndarray, level_table: np.ndarray) -> tuple[int, np.ndarray]:
    """Nearest codeword by squared distance; ties go to the lowest index."""
    residual = np.asarray(residual, dtype=np.float64)
    if residual.shape[-1] != level_table.shape[-1]:
        raise nd.ShapeError("quantize_level", residual.shape, level_table.shape)
    d2 = ((level_table - residual) ** 2).sum(axis=1)
    idx = int(np.argmin(d2))
    return idx, level_table[idx].copy()


def _assign_codes(model: RqvaeModel, z: np.ndarray) -> np.ndarray:
    """Greedy residual quantization for a (B, d_latent) batch -> (B, C)."""
    codes = np.zeros((z.shape[0], model.n_levels), dtype=np.int64)
    resid = z.copy()
    for i, cb in enumerate(model.codebooks):
        d2 = ((resid[:, None, :] - cb.data[None]) ** 2).sum(-1)
        codes[:, i] = d2.argmin(axis=1)
        resid = resid - cb.data[codes[:, i]]
    return codes


def assign_semantic_id(model: RqvaeModel, embedding: np.ndarray) -> SemanticID:
    with nd.no_grad():
        z = model.encode(nd.Tensor(np.asarray(embedding, dtype=np.float64)[None])).data
    return SemanticID(tuple(int(c) for c in _assign_codes(model, z)[0]))


def _sqnorm_rows(t: nd.Tensor) -> nd.Tensor:
    return nd.sum(nd.mul(t, t), axis=-1)


def _loss_parts(model: RqvaeModel, batch: np.ndarray,
                codes: np.ndarray | None = None,
                snapshot: dict | None = None,
                capture: dict | None = None):
    x = nd.Tensor(np.asarray(batch, dtype=np.float64))
    z = model.encode(x)
    if codes is None:
        codes = _assign_codes(model, z.data)

    def sg(t: nd.Tensor, site: tuple) -> nd.Tensor:
        # Detach, optionally replaying or recording the detached value so a
        # finite-difference probe sees the same constants the analytic
        # gradient assumes.
        if snapshot is not None:
            return nd.Tensor(snapshot[site])
        if capture is not None:
            capture[site] = t.data.copy()
        return nd.stop_grad(t)

    resid = z
    quantized = None
    commit_sum = None
    for i, cb in enumerate(model.codebooks):
        cw = nd.embedding(cb, codes[:, i])
        pull = nd.mean(_sqnorm_rows(nd.sub(sg(resid, ("residual", i)), cw)))
        push = nd.mean(_sqnorm_rows(nd.sub(resid, sg(cw, ("codeword", i)))))
        term = nd.add(pull, nd.scale(push, model.beta))
        commit_sum = term if commit_sum is None else nd.add(commit_sum, term)
        quantized = cw if quantized is None else nd.add(quantized, cw)
        resid = nd.sub(resid, sg(cw, ("chain", i)))
    commit = nd.scale(commit_sum, 1.0 / model.n_levels)
    # Straight-through: decoder sees the quantized sum, the encoder output
    # receives the decoder gradient unchanged.
    dec_in = nd.add(z, sg(nd.sub(quantized, z), ("correction",)))
    x_hat = model.decode(dec_in)
    recon = nd.mean(_sqnorm_rows(nd.sub(x, x_hat)))
    total = nd.add(recon, commit)
    return total, recon, commit, codes


def rqvae_loss(model: RqvaeModel, batch: np.ndarray,
               codes: np.ndarray | None = None,
               snapshot: dict | None = None):
    """Reconstruction plus commitment loss.

    Pass `codes` to hold the codeword assignment fixed and `snapshot` (from
    quantization_snapshot) to freeze the detached values; together they make
    the loss a smooth function of the parameters so finite differences can
    validate the straight-through gradients.
    """
    total, recon, commit, _ = _loss_parts(model, batch, codes, snapshot)
    return total, recon, commit


def quantization_snapshot(model: RqvaeModel, batch: np.ndarray,
                          codes: np.ndarray) -> dict:
    """Records the values flowing through every stop-gradient site."""
    snap: dict = {}
    _loss_parts(model, batch, codes, capture=snap)
    return snap


def _kmeans(data: np.ndarray, k: int, rng: np.random.Generator,
            iters: int = 10) -> np.ndarray:
    centers = data[rng.choice(len(data), size=k, replace=False)].copy()
    for _ in range(iters):
        d2 = ((data[:, None, :] - centers[None]) ** 2).sum(-1)
        assign = d2.argmin(axis=1)
        for j in range(k):
            members = data[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                centers[j] = data[int(rng.integers(len(data)))]
    return centers


def train_rqvae(model: RqvaeModel, embeddings: np.ndarray, epochs: int = 15,
                batch_size: int = 64, seed: int = 0,
                lr: float = 2e-3) -> tuple[RqvaeModel, list[float]]:
    """K-means codebook init, Adam on the loss, dead codewords re-seeded
    from fresh residuals after any epoch that never used them."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = len(embeddings)
    if n < model.codebook_size:
        raise ValueError(
            f"{n} embeddings cannot fill {model.codebook_size} codewords; "
            "reduce codebook_size")
    rng = np.random.default_rng(seed)

    with nd.no_grad():
        resid = model.encode(nd.Tensor(embeddings)).data.copy()
    for cb in model.codebooks:
        cb.data = _kmeans(resid, model.codebook_size, rng)
        d2 = ((resid[:, None, :] - cb.data[None]) ** 2).sum(-1)
        resid = resid - cb.data[d2.argmin(axis=1)]

    opt = nd.Adam(model.parameters(), lr=lr)
    curve: list[float] = []
    probe = embeddings[:min(n, 256)]
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        used: list[set[int]] = [set() for _ in range(model.n_levels)]
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            with nd.Graph() as g:
                total, _, _, codes = _loss_parts(model, embeddings[idx])
                nd.backward(total, g)
            opt.step()
            losses.append(total.item())
            for i in range(model.n_levels):
                used[i].update(int(c) for c in codes[:, i])
        curve.append(float(np.mean(losses)))

        with nd.no_grad():
            resid = model.encode(nd.Tensor(probe)).data.copy()
        for i, cb in enumerate(model.codebooks):
            for dead in sorted(set(range(model.codebook_size)) - used[i]):
                cb.data[dead] = resid[int(rng.integers(len(resid)))]
            d2 = ((resid[:, None, :] - cb.data[None]) ** 2).sum(-1)
            resid = resid - cb.data[d2.argmin(axis=1)]
    return model, curve


def codebook_utilization(model: RqvaeModel, embeddings: np.ndarray) -> float:
    """Fraction of codewords used at least once, averaged over levels."""
    with nd.no_grad():
        z = model.encode(nd.Tensor(np.asarray(embeddings, dtype=np.float64))).data
    codes = _assign_codes(model, z)
    fracs = [len(set(int(c) for c in codes[:, i])) / model.codebook_size
             for i in range(model.n_levels)]
    return float(np.mean(fracs))


# ---------------------------------------------------------------------------
# Query index and related-query search
# ---------------------------------------------------------------------------


class QueryIndex:
    """Immutable lookup from semantic-ID buckets to catalog queries."""

    def __init__(self, queries: list[str], embeddings: np.ndarray,
                 ids: list[SemanticID]):
        if not (len(queries) == len(embeddings) == len(ids)):
            raise ValueError("queries, embeddings, and ids must align")
        self.queries = list(queries)
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.ids = list(ids)
        self.n_levels = len(ids[0].codes) if ids else 0
        self.full_buckets: dict[tuple[int, ...], list[int]] = {}
        self.prefix_buckets: dict[tuple[int, ...], list[int]] = {}
        for i, sid in enumerate(self.ids):
            self.full_buckets.setdefault(sid.codes, []).append(i)
            for length in range(1, self.n_levels):
                self.prefix_buckets.setdefault(sid.prefix(length), []).append(i)

    def __len__(self) -> int:
        return len(self.queries)


def select_index_queries(records: list[InteractionRecord],
                         min_positive: int = 1) -> list[str]:
    """Queries with enough positive interactions to enter the index."""
    counts: dict[str, int] = {}
    for r in records:
        if r.level in POSITIVE_LEVELS:
            counts[r.query] = counts.get(r.query, 0) + 1
    return sorted(q for q, c in counts.items() if c >= min_positive)


def build_index(model: RqvaeModel, queries: list[str],
                embeddings: np.ndarray) -> QueryIndex:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    with nd.no_grad():
        z = model.encode(nd.Tensor(embeddings)).data
    codes = _assign_codes(model, z)
    ids = [SemanticID(tuple(int(c) for c in row)) for row in codes]
    return QueryIndex(queries, embeddings, ids)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


def screen_candidates(candidates: list[tuple[str, np.ndarray]],
                      prefix_emb: np.ndarray, k: int,
                      lambda_div: float) -> list[str]:
    """Greedy maximal-marginal-relevance selection.

    Scores lambda_div * cos(candidate, prefix) minus (1 - lambda_div) times
    the max cosine to anything already picked; exact duplicate strings are
    dropped before selection.  Ties keep the earliest candidate, so callers
    can encode priority in the input order.
    """
    if not 0.0 < lambda_div < 1.0:
        raise ValueError(f"lambda_div must lie in (0, 1), got {lambda_div}")
    seen: set[str] = set()
    pool: list[tuple[str, np.ndarray]] = []
    for q, e in candidates:
        if q not in seen:
            seen.add(q)
            pool.append((q, np.asarray(e, dtype=np.float64)))
    if k < 1 or not pool:
        return []
    prefix_emb = np.asarray(prefix_emb, dtype=np.float64)
    rel = np.array([_cosine(e, prefix_emb) for _, e in pool])
    picked: list[int] = []
    # Running max cosine to the picked set; -inf so negative cosines count.
    max_to_picked = np.full(len(pool), -np.inf)
    while len(picked) < min(k, len(pool)):
        best, best_score = -1, -np.inf
        for i in range(len(pool)):
            if i in picked:
                continue
            div = max_to_picked[i] if picked else 0.0
            score = lambda_div * rel[i] - (1.0 - lambda_div) * div
            if score > best_score:
                best, best_score = i, score
        picked.append(best)
        chosen = pool[best][1]
        for i in range(len(pool)):
            if i not in picked:
                c = _cosine(pool[i][1], chosen)
                if c > max_to_picked[i]:
                    max_to_picked[i] = c
    return [pool[i][0] for i in picked]


def related_query_search(index: QueryIndex, prefix_id: SemanticID,
                         prefix_emb: np.ndarray, k: int,
                         lambda_div: float = 0.7,
                         breadth: int = 4) -> list[str]:
    """Fine-to-coarse candidate walk, then diversity screening, top-k.

    Consults the full-ID bucket first, then ID-prefix buckets of decreasing
    length, and finally the whole index, stopping once at least breadth * k
    candidates are gathered.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(index) == 0:
        raise ValueError("related_query_search needs a non-empty index")
    want = breadth * k
    seen: set[int] = set()
    ordered: list[int] = []
    stages = [index.full_buckets.get(prefix_id.codes, [])]
    for length in range(index.n_levels - 1, 0, -1):
        stages.append(index.prefix_buckets.get(prefix_id.prefix(length), []))
    stages.append(list(range(len(index))))
    for bucket in stages:
        for i in bucket:
            if i not in seen:
                seen.add(i)
                ordered.append(i)
        if len(ordered) >= want:
            break
    candidates = [(index.queries[i], index.embeddings[i]) for i in ordered]
    return screen_candidates(candidates, prefix_emb, k, lambda_div)


# ---------------------------------------------------------------------------
# Artifact IO
# ---------------------------------------------------------------------------


def save_rqvae(model: RqvaeModel, path: str, cfg_hash: str = "") -> None:
    arrays: dict[str, np.ndarray] = {}
    for i, (w, b) in enumerate(model.enc_layers):
        arrays[f"enc_w{i}"] = w.data
        arrays[f"enc_b{i}"] = b.data
    for i, (w, b) in enumerate(model.dec_layers):
        arrays[f"dec_w{i}"] = w.data
        arrays[f"dec_b{i}"] = b.data
    for i, cb in enumerate(model.codebooks):
        arrays[f"codebook{i}"] = cb.data
    meta = {"d_in": model.d_in, "d_hidden": model.d_hidden,
            "d_latent": model.d_latent, "n_levels": model.n_levels,
            "codebook_size": model.codebook_size, "beta": model.beta,
            "identity_encoder": model.identity_encoder}
    save_checkpoint(path, "rqvae", cfg_hash, arrays, meta)


def load_rqvae(path: str) -> RqvaeModel:
    ckpt = load_checkpoint(path, "rqvae")
    m = ckpt["meta"]
    model = RqvaeModel(d_in=m["d_in"], d_hidden=m["d_hidden"],
                       d_latent=m["d_latent"], n_levels=m["n_levels"],
                       codebook_size=m["codebook_size"], beta=m["beta"],
                       identity_encoder=m["identity_encoder"])
    arrays = ckpt["arrays"]
    for i, (w, b) in enumerate(model.enc_layers):
        w.data = arrays[f"enc_w{i}"]
        b.data = arrays[f"enc_b{i}"]
    for i, (w, b) in enumerate(model.dec_layers):
        w.data = arrays[f"dec_w{i}"]
        b.data = arrays[f"dec_b{i}"]
    for i, cb in enumerate(model.codebooks):
        cb.data = arrays[f"codebook{i}"]
    return model


def save_index(index: QueryIndex, path: str) -> None:
    import json
    with open(path, "w", encoding="utf-8") as f:
        for q, e, sid in zip(index.queries, index.embeddings, index.ids):
            row = {"query": q, "embedding": e.tolist(),
                   "codes": list(sid.codes)}
            f.write(json.dumps(row, sort_keys=True) + "\n")


def load_index(path: str) -> QueryIndex:
    import json
    queries, embs, ids = [], [], []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            queries.append(row["query"])
            embs.append(row["embedding"])
            ids.append(SemanticID(tuple(int(c) for c in row["codes"])))
    return QueryIndex(queries, np.array(embs, dtype=np.float64), ids)
