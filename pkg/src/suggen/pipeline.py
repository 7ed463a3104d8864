"""Stage orchestration: each stage reads the previous stage's artifacts
from the work directory and writes its own, all stamped with the config
hash so stale mixes are detectable."""

from __future__ import annotations

import json
import os
from dataclasses import replace

import numpy as np

from . import align, autodiff as nd, corpus, evaluation, generator, preference, rqvae
from .artifacts import canonical_json
from .config import RunConfig

ARTIFACTS = {
    "catalog": "catalog.jsonl",
    "train": "train.jsonl",
    "test": "test.jsonl",
    "profiles": "profiles.json",
    "encoder": "encoder.json",
    "rqvae": "rqvae.json",
    "index": "index.jsonl",
    "vocab": "vocab.json",
    "sft": "sft.json",
    "dpo_pair": "dpo_pair.json",
    "dpo_list": "dpo_list.json",
    "report": "report.json",
    "table": "report.txt",
    "feedback": "feedback.jsonl",
}

# Which stage produces each artifact, for dependency error messages.
PRODUCERS = {
    "catalog": "gen-corpus", "train": "gen-corpus", "test": "gen-corpus",
    "profiles": "gen-corpus", "encoder": "train-align",
    "rqvae": "train-rqvae", "index": "build-index", "vocab": "train-sft",
    "sft": "train-sft", "dpo_pair": "train-dpo", "dpo_list": "train-dpo",
    "report": "eval", "table": "eval", "feedback": "serve",
}


class MissingArtifact(RuntimeError):
    """An upstream stage has not produced a required file yet."""

    def __init__(self, artifact: str, path: str):
        self.stage = PRODUCERS[artifact]
        super().__init__(
            f"missing artifact {path!r}; run '{self.stage}' first")


def artifact_path(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.workdir, ARTIFACTS[name])


def require_artifact(cfg: RunConfig, name: str) -> str:
    path = artifact_path(cfg, name)
    if not os.path.exists(path):
        raise MissingArtifact(name, path)
    return path


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(canonical_json(obj))


def _read_json(path: str):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def stage_gen_corpus(cfg: RunConfig) -> dict:
    """Catalog + simulated log, split into train/test page-view groups."""
    os.makedirs(cfg.workdir, exist_ok=True)
    c = cfg.corpus
    catalog = corpus.generate_catalog(
        cfg.seed, c.n_categories, c.n_categories * c.queries_per_category,
        exponent=c.exponent)
    sim = corpus.SimConfig(top_frac=c.top_frac, p_rand=c.rand_prob)
    records = corpus.simulate_logs(catalog, c.n_users, c.n_events, cfg.seed,
                                   sim)
    groups: list[list[corpus.InteractionRecord]] = []
    seen: dict[tuple, int] = {}
    for r in records:
        key = (r.ts, r.user_id, r.prefix)
        if key not in seen:
            seen[key] = len(groups)
            groups.append([])
        groups[seen[key]].append(r)
    cut = max(1, int(round(len(groups) * (1.0 - c.test_frac))))
    train = [r for g in groups[:cut] for r in g]
    test = [r for g in groups[cut:] for r in g]
    profiles = corpus.infer_profiles(train, catalog)
    corpus.save_catalog(catalog, artifact_path(cfg, "catalog"))
    corpus.save_records(train, artifact_path(cfg, "train"))
    corpus.save_records(test, artifact_path(cfg, "test"))
    _write_json(artifact_path(cfg, "profiles"),
                {"schema": 1, "config_hash": cfg.hash, "profiles": profiles})
    return {"queries": len(catalog.queries), "train_records": len(train),
            "test_records": len(test), "page_views": len(groups)}


def _load_profiles(cfg: RunConfig) -> dict[str, str]:
    return _read_json(require_artifact(cfg, "profiles"))["profiles"]


def stage_train_align(cfg: RunConfig) -> dict:
    """Contrastive prefix/query encoder over mined co-occurrence pairs."""
    records = corpus.load_records(require_artifact(cfg, "train"))
    a = cfg.align
    encoder = align.TextEncoder(d_emb=a.d_emb, d_hidden=a.d_hidden,
                                d_out=a.d_out, tau=a.tau, seed=cfg.seed)
    pairs = align.mine_pairs(records, min_cooccur=a.min_cooccur,
                             min_sim=a.min_sim, encoder=encoder)
    if len(pairs) < 2:
        raise RuntimeError("too few mined pairs; enlarge the corpus")
    batch = min(a.batch, len(pairs))
    encoder, curve = align.train_alignment(encoder, pairs, epochs=a.epochs,
                                           batch=batch, seed=cfg.seed)
    align.save_encoder(encoder, artifact_path(cfg, "encoder"), cfg.hash)
    return {"pairs": len(pairs), "loss_first": curve[0],
            "loss_last": curve[-1]}


def _index_queries(cfg: RunConfig):
    records = corpus.load_records(require_artifact(cfg, "train"))
    queries = rqvae.select_index_queries(records,
                                         min_positive=cfg.rqvae.min_positive)
    encoder = align.load_encoder(require_artifact(cfg, "encoder"))
    return encoder, queries, align.encode_many(encoder, queries)


def stage_train_rqvae(cfg: RunConfig) -> dict:
    """Residual-quantizer training over index-query embeddings."""
    _, queries, embeddings = _index_queries(cfg)
    r = cfg.rqvae
    model = rqvae.RqvaeModel(d_in=cfg.align.d_out, d_hidden=r.d_hidden,
                             d_latent=r.d_latent, n_levels=r.n_levels,
                             codebook_size=r.codebook_size, beta=r.beta,
                             seed=cfg.seed)

    def recon_err() -> float:
        with nd.no_grad():
            return rqvae.rqvae_loss(model, embeddings)[1].item()

    recon_before = recon_err()
    model, curve = rqvae.train_rqvae(model, embeddings, epochs=r.epochs,
                                     batch_size=r.batch, seed=cfg.seed,
                                     lr=r.lr)
    util = rqvae.codebook_utilization(model, embeddings)
    rqvae.save_rqvae(model, artifact_path(cfg, "rqvae"), cfg.hash)
    return {"queries": len(queries), "recon_before": recon_before,
            "recon_after": recon_err(), "loss_first": curve[0],
            "loss_last": curve[-1], "utilization": util}


def stage_build_index(cfg: RunConfig) -> dict:
    """Semantic-ID buckets for every positively-interacted query."""
    _, queries, embeddings = _index_queries(cfg)
    model = rqvae.load_rqvae(require_artifact(cfg, "rqvae"))
    index = rqvae.build_index(model, queries, embeddings)
    rqvae.save_index(index, artifact_path(cfg, "index"))
    return {"entries": len(index)}


def make_related_fn(cfg: RunConfig, encoder, model, index):
    """Prefix -> related queries via fine-to-coarse semantic-ID search."""
    def related(prefix: str) -> list[str]:
        if not len(index):
            return []
        emb = align.encode_text(encoder, prefix).vector
        sid = rqvae.assign_semantic_id(model, emb)
        k = min(cfg.rqvae.n_related, len(index))
        return rqvae.related_query_search(index, sid, emb, k,
                                          lambda_div=cfg.rqvae.lambda_div,
                                          breadth=cfg.rqvae.breadth)
    return related


def _context_tooling(cfg: RunConfig):
    encoder = align.load_encoder(require_artifact(cfg, "encoder"))
    model = rqvae.load_rqvae(require_artifact(cfg, "rqvae"))
    index = rqvae.load_index(require_artifact(cfg, "index"))
    return encoder, model, index, make_related_fn(cfg, encoder, model, index)


def stage_train_sft(cfg: RunConfig) -> dict:
    """Supervised generator training over context -> clicked-query pairs."""
    records = corpus.load_records(require_artifact(cfg, "train"))
    catalog = corpus.load_catalog(require_artifact(cfg, "catalog"))
    profiles = _load_profiles(cfg)
    _, _, _, related_fn = _context_tooling(cfg)
    s = cfg.sft
    vocab = generator.Vocab.build(list(catalog.queries)
                                  + sorted(set(profiles.values())))
    dataset = corpus.build_sft_dataset(records, related_fn=related_fn,
                                       profiles=profiles,
                                       history_len=s.max_history,
                                       related_len=s.max_related)
    if not dataset:
        raise RuntimeError("no positive records to train on")
    model = generator.GenModel(len(vocab), d_model=s.d_model,
                               n_layers=s.n_layers, n_heads=s.n_heads,
                               d_ff=s.d_ff, max_enc_len=s.max_enc_len,
                               max_dec_len=s.max_dec_len, seed=cfg.seed)
    ckpt_dir = os.path.join(cfg.workdir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    model, curve = generator.train_sft(model, vocab, dataset,
                                       epochs=s.epochs, batch=s.batch,
                                       seed=cfg.seed, lr=s.lr,
                                       checkpoint_dir=ckpt_dir,
                                       cfg_hash=cfg.hash)
    vocab.save(artifact_path(cfg, "vocab"))
    generator.save_gen(model, artifact_path(cfg, "sft"), cfg.hash)
    return {"examples": len(dataset), "loss_first": curve[0],
            "loss_last": curve[-1]}


def _reward_params(cfg: RunConfig) -> preference.RewardParams:
    d = cfg.dpo
    return preference.RewardParams(rw_max=d.rw_max, delta=d.delta,
                                   alpha=d.alpha, beta_dpo=d.beta_dpo)


def build_dpo_groups(cfg: RunConfig, mode: str):
    records = corpus.load_records(require_artifact(cfg, "train"))
    catalog = corpus.load_catalog(require_artifact(cfg, "catalog"))
    profiles = _load_profiles(cfg)
    _, _, _, related_fn = _context_tooling(cfg)
    d = cfg.dpo
    policy = corpus.PairPolicy(mode=mode,
                               adjacent_level_pairs=d.adjacent_level_pairs,
                               n_rand_negatives=d.n_rand_negatives,
                               seed=cfg.seed)
    groups = corpus.build_preference_groups(
        records, policy, related_fn=related_fn, profiles=profiles,
        catalog=catalog, history_len=cfg.sft.max_history,
        related_len=cfg.sft.max_related)
    if len(groups) > d.max_groups:
        rng = np.random.default_rng(cfg.seed)
        picked = sorted(rng.choice(len(groups), size=d.max_groups,
                                   replace=False).tolist())
        groups = [groups[i] for i in picked]
    return groups


def stage_train_dpo(cfg: RunConfig, mode: str | None = None) -> dict:
    """Preference alignment of the supervised generator, frozen reference."""
    mode = mode or cfg.dpo.mode
    if mode not in ("pair", "list"):
        raise RuntimeError(f"unknown dpo mode {mode!r}")
    vocab = generator.Vocab.load(require_artifact(cfg, "vocab"))
    model = generator.load_gen(require_artifact(cfg, "sft"))
    groups = build_dpo_groups(cfg, mode)
    if not groups:
        raise RuntimeError("no preference groups mined; enlarge the corpus")
    d = cfg.dpo
    model, curve = preference.train_dpo(
        model, vocab, groups, mode=mode, params=_reward_params(cfg),
        epochs=d.epochs, batch=d.batch, seed=cfg.seed, lr=d.lr,
        corrected_pair_hinge=d.corrected_pair_hinge)
    name = "dpo_pair" if mode == "pair" else "dpo_list"
    generator.save_gen(model, artifact_path(cfg, name), cfg.hash)
    return {"groups": len(groups), "loss_first": curve[0],
            "loss_last": curve[-1], "artifact": ARTIFACTS[name]}


def beam_system(cfg: RunConfig, model, vocab, use_related: bool = True):
    """UserContext -> ranked query strings via beam search."""
    def suggest(ctx: corpus.UserContext) -> list[str]:
        if not use_related:
            ctx = replace(ctx, related=())
        ids = generator.assemble_input(ctx, vocab, cfg.sft.max_enc_len,
                                       max_related=cfg.sft.max_related,
                                       max_history=cfg.sft.max_history)
        hyps = generator.beam_search(model, vocab, ids,
                                     beam_size=cfg.eval.beam)
        out = []
        for h in hyps:
            text = vocab.decode(h.ids).strip()
            if text and text not in out:
                out.append(text)
        return out[:cfg.eval.k]
    return suggest


def stage_eval(cfg: RunConfig) -> dict:
    """Ablation table over MPC, SFT, and the preference-aligned variants."""
    train = corpus.load_records(require_artifact(cfg, "train"))
    test = corpus.load_records(require_artifact(cfg, "test"))
    profiles = _load_profiles(cfg)
    _, _, _, related_fn = _context_tooling(cfg)
    vocab = generator.Vocab.load(require_artifact(cfg, "vocab"))
    cases = evaluation.build_eval_cases(test, train, related_fn=related_fn,
                                        profiles=profiles,
                                        max_history=cfg.sft.max_history)
    if not cases:
        raise RuntimeError("no evaluation cases in the test split")
    if len(cases) > cfg.eval.max_cases:
        rng = np.random.default_rng(cfg.seed)
        picked = sorted(rng.choice(len(cases), size=cfg.eval.max_cases,
                                   replace=False).tolist())
        cases = [cases[i] for i in picked]
    cases = evaluation.slice_by_popularity(
        cases, evaluation.prefix_pv_counts(train),
        t_top=cfg.eval.t_top, t_mid=cfg.eval.t_mid)

    trie = corpus.mpc_build(train)
    systems = {"mpc": lambda ctx: corpus.mpc_suggest(trie, ctx.prefix,
                                                     cfg.eval.k)}
    systems["sft"] = beam_system(
        cfg, generator.load_gen(require_artifact(cfg, "sft")), vocab)
    for name, key in (("dpo-pair", "dpo_pair"), ("dpo-list", "dpo_list")):
        path = artifact_path(cfg, key)
        if os.path.exists(path):
            model = generator.load_gen(path)
            systems[name] = beam_system(cfg, model, vocab)
            if name == "dpo-list":
                systems["dpo-list-nopre"] = beam_system(cfg, model, vocab,
                                                        use_related=False)

    report = evaluation.run_ablation(systems, cases, k=cfg.eval.k,
                                     config=cfg.to_dict(), seed=cfg.seed)
    checks: dict[str, bool] = {}
    if {"dpo-list", "dpo-pair"} <= set(report.rows):
        for metric in ("hr", "mrr"):
            chain = ["dpo-list", "dpo-pair", "sft", "mpc"]
            checks[f"{metric}: list >= pair >= sft >= mpc"] = \
                evaluation.ordering_holds(report, chain, metric)
        uplift = report.rows["dpo-list"]["hr"] - report.rows["sft"]["hr"]
        checks["hr: list beats sft by >= 0.02"] = uplift >= 0.02
    if "dpo-list-nopre" in report.rows:
        tail = evaluation.LONG_TAIL
        with_pre = report.rows["dpo-list"]["slices"].get(tail)
        without = report.rows["dpo-list-nopre"]["slices"].get(tail)
        if with_pre and without:
            checks["hr long-tail: removing related costs >= 0.01"] = \
                with_pre["hr"] - without["hr"] >= 0.01
    report = evaluation.with_assertions(report, checks)
    evaluation.save_report(report, artifact_path(cfg, "report"))
    with open(artifact_path(cfg, "table"), "w", encoding="utf-8") as f:
        f.write(evaluation.format_table(report) + "\n")
    return {"cases": len(cases), "systems": sorted(systems),
            "assertions": checks}


STAGES = {
    "gen-corpus": stage_gen_corpus,
    "train-align": stage_train_align,
    "train-rqvae": stage_train_rqvae,
    "build-index": stage_build_index,
    "train-sft": stage_train_sft,
    "train-dpo": stage_train_dpo,
    "eval": stage_eval,
}
