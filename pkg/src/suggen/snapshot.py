"""Immutable bundle of everything needed to answer one suggestion request.

A snapshot ties together the tokenizer, alignment encoder, quantizer,
query index, and a generator checkpoint, refusing mixes from different
configurations.  All lookups are read-only, so one snapshot can serve
concurrent requests.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

from . import align, generator, rqvae
from .artifacts import load_checkpoint
from .config import RunConfig
from .corpus import UserContext
from .pipeline import artifact_path, require_artifact


@dataclass(frozen=True)
class SnapshotParams:
    """Request-time context-building knobs, frozen at snapshot load."""

    n_related: int = 10
    lambda_div: float = 0.7
    breadth: int = 4
    augment_w: float = 0.5
    max_related: int = 10
    max_history: int = 10
    beam: int = 32
    max_k: int = 16


@dataclass(frozen=True)
class ModelSnapshot:
    vocab: generator.Vocab
    encoder: align.TextEncoder
    quantizer: rqvae.RqvaeModel
    index: rqvae.QueryIndex
    model: generator.GenModel
    profiles: dict[str, str] = field(default_factory=dict)
    params: SnapshotParams = field(default_factory=SnapshotParams)
    config_hash: str = ""
    created_at: float = 0.0


def _stored_hash(path: str) -> str:
    return load_checkpoint(path)["config_hash"]


def load_snapshot(cfg: RunConfig, generator_artifact: str | None = None,
                  profiles: dict[str, str] | None = None) -> ModelSnapshot:
    """Loads artifacts from the work directory, newest generator first
    (dpo_list, then dpo_pair, then sft) unless one is named explicitly."""
    if generator_artifact is None:
        for key in ("dpo_list", "dpo_pair", "sft"):
            if os.path.exists(artifact_path(cfg, key)):
                generator_artifact = key
                break
        else:
            generator_artifact = "sft"
    gen_path = require_artifact(cfg, generator_artifact)
    enc_path = require_artifact(cfg, "encoder")
    rq_path = require_artifact(cfg, "rqvae")
    hashes = {path: _stored_hash(path)
              for path in (gen_path, enc_path, rq_path)}
    if len(set(hashes.values())) > 1:
        raise ValueError(f"artifact config hashes disagree: {hashes}")
    if profiles is None:
        profiles_path = artifact_path(cfg, "profiles")
        profiles = {}
        if os.path.exists(profiles_path):
            with open(profiles_path, encoding="utf-8") as f:
                profiles = json.load(f)["profiles"]
    params = SnapshotParams(
        n_related=cfg.rqvae.n_related, lambda_div=cfg.rqvae.lambda_div,
        breadth=cfg.rqvae.breadth, augment_w=cfg.align.augment_w,
        max_related=cfg.sft.max_related, max_history=cfg.sft.max_history,
        beam=cfg.eval.beam, max_k=cfg.eval.k)
    return ModelSnapshot(
        vocab=generator.Vocab.load(require_artifact(cfg, "vocab")),
        encoder=align.load_encoder(enc_path),
        quantizer=rqvae.load_rqvae(rq_path),
        index=rqvae.load_index(require_artifact(cfg, "index")),
        model=generator.load_gen(gen_path),
        profiles=dict(profiles),
        params=params,
        config_hash=next(iter(hashes.values())),
        created_at=time.time())


def related_queries(snapshot: ModelSnapshot, prefix: str,
                    history: tuple[str, ...] = ()) -> tuple[str, ...]:
    """Semantic-ID search around the (history-augmented) prefix embedding."""
    if not len(snapshot.index):
        return ()
    emb = align.encode_text(snapshot.encoder, prefix)
    if history:
        hist_embs = align.encode_many(snapshot.encoder, list(history))
        emb = align.augment_prefix(emb, hist_embs,
                                   w=snapshot.params.augment_w)
    vec = emb.vector
    sid = rqvae.assign_semantic_id(snapshot.quantizer, vec)
    k = min(snapshot.params.n_related, len(snapshot.index))
    return tuple(rqvae.related_query_search(
        snapshot.index, sid, vec, k,
        lambda_div=snapshot.params.lambda_div,
        breadth=snapshot.params.breadth))


def build_context(snapshot: ModelSnapshot, prefix: str,
                  history: tuple[str, ...] = (),
                  profile: str = "") -> UserContext:
    if not prefix:
        raise ValueError("prefix must be non-empty")
    history = tuple(history)[-snapshot.params.max_history:]
    return UserContext(prefix=prefix,
                       related=related_queries(snapshot, prefix, history),
                       history=history, profile=profile)


def suggest_queries(snapshot: ModelSnapshot, prefix: str,
                    history: tuple[str, ...] = (), profile: str = "",
                    k: int = 16) -> list[tuple[str, float]]:
    """Ranked (query, log-prob) suggestions for one request."""
    if k < 1:
        raise ValueError("k must be at least 1")
    k = min(k, snapshot.params.max_k)
    ctx = build_context(snapshot, prefix, history, profile)
    ids = generator.assemble_input(ctx, snapshot.vocab,
                                   snapshot.model.max_enc_len,
                                   max_related=snapshot.params.max_related,
                                   max_history=snapshot.params.max_history)
    hyps = generator.beam_search(snapshot.model, snapshot.vocab, ids,
                                 beam_size=snapshot.params.beam)
    out: list[tuple[str, float]] = []
    seen = set()
    for h in hyps:
        text = snapshot.vocab.decode(h.ids).strip()
        if text and text not in seen:
            seen.add(text)
            out.append((text, h.score))
        if len(out) == k:
            break
    return out
