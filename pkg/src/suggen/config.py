"""Run configuration: one JSON file drives every pipeline stage.

All hyperparameters live here; artifacts embed the hash of everything
except filesystem paths, so moving a run directory never invalidates it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .artifacts import config_hash


class ConfigError(ValueError):
    """Raised when a config file is malformed or out of range."""


@dataclass(frozen=True)
class CorpusConfig:
    n_categories: int = 8
    queries_per_category: int = 30
    n_users: int = 40
    n_events: int = 12000
    exponent: float = 1.1
    top_frac: float = 0.2
    rand_prob: float = 0.3
    test_frac: float = 0.2


@dataclass(frozen=True)
class AlignConfig:
    d_emb: int = 32
    d_hidden: int = 64
    d_out: int = 32
    tau: float = 0.05
    epochs: int = 5
    batch: int = 32
    min_cooccur: int = 2
    min_sim: float = 0.3
    augment_w: float = 0.5


@dataclass(frozen=True)
class RqvaeConfig:
    n_levels: int = 4
    codebook_size: int = 64
    d_hidden: int = 32
    d_latent: int = 16
    beta: float = 0.25
    epochs: int = 15
    batch: int = 64
    lr: float = 2e-3
    min_positive: int = 1
    lambda_div: float = 0.7
    breadth: int = 4
    n_related: int = 10


@dataclass(frozen=True)
class SftConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    max_enc_len: int = 160
    max_dec_len: int = 24
    max_related: int = 10
    max_history: int = 10
    epochs: int = 4
    batch: int = 16
    lr: float = 3e-3


@dataclass(frozen=True)
class DpoConfig:
    mode: str = "list"
    alpha: float = 0.5
    beta_dpo: float = 0.1
    delta: float = 0.1
    rw_max: float = 10.0
    adjacent_level_pairs: bool = False
    n_rand_negatives: int = 1
    corrected_pair_hinge: bool = False
    max_groups: int = 600
    epochs: int = 2
    batch: int = 8
    lr: float = 2e-4


@dataclass(frozen=True)
class EvalConfig:
    k: int = 16
    beam: int = 32
    t_top: int = 50
    t_mid: int = 10
    max_cases: int = 300


@dataclass(frozen=True)
class ServeConfig:
    host: str = "127.0.0.1"
    port: int = 8321


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    rqvae: RqvaeConfig = field(default_factory=RqvaeConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    dpo: DpoConfig = field(default_factory=DpoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    serve: ServeConfig = field(default_factory=ServeConfig)
    paths: dict = field(default_factory=lambda: {"workdir": "runs/desk"})

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        # config_hash drops the top-level "paths" key.
        return config_hash(self.to_dict())

    @property
    def workdir(self) -> str:
        return self.paths["workdir"]


_SECTIONS = {"corpus": CorpusConfig, "align": AlignConfig,
             "rqvae": RqvaeConfig, "sft": SftConfig, "dpo": DpoConfig,
             "eval": EvalConfig, "serve": ServeConfig}


def _build_section(cls, raw: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        want = known[name].type
        if want == "int" and (not isinstance(value, int)
                              or isinstance(value, bool)):
            raise ConfigError(f"{where}.{name} must be an integer")
        if want == "float" and (not isinstance(value, (int, float))
                                or isinstance(value, bool)):
            raise ConfigError(f"{where}.{name} must be a number")
        if want == "float":
            value = float(value)
        if want == "str" and not isinstance(value, str):
            raise ConfigError(f"{where}.{name} must be a string")
        if want == "bool" and not isinstance(value, bool):
            raise ConfigError(f"{where}.{name} must be a boolean")
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - set(_SECTIONS) - {"seed", "paths"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs: dict = {}
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    kwargs["seed"] = seed
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section {name} must be an object")
        kwargs[name] = _build_section(cls, section, name)
    paths = raw.get("paths", {"workdir": "runs/desk"})
    if not isinstance(paths, dict) or "workdir" not in paths \
            or not isinstance(paths["workdir"], str):
        raise ConfigError("paths.workdir (string) is required")
    kwargs["paths"] = paths
    cfg = RunConfig(**kwargs)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    checks = [
        (cfg.corpus.n_categories >= 2, "corpus.n_categories >= 2"),
        (cfg.corpus.n_events >= 1, "corpus.n_events >= 1"),
        (0.0 < cfg.corpus.test_frac < 1.0, "corpus.test_frac in (0, 1)"),
        (cfg.align.tau > 0, "align.tau > 0"),
        (0.0 <= cfg.align.augment_w <= 1.0, "align.augment_w in [0, 1]"),
        (cfg.rqvae.n_levels >= 1, "rqvae.n_levels >= 1"),
        (cfg.rqvae.codebook_size >= 2, "rqvae.codebook_size >= 2"),
        (0.0 < cfg.rqvae.lambda_div < 1.0, "rqvae.lambda_div in (0, 1)"),
        (cfg.sft.d_model % cfg.sft.n_heads == 0,
         "sft.d_model divisible by sft.n_heads"),
        (cfg.sft.max_dec_len >= 2, "sft.max_dec_len >= 2"),
        (cfg.dpo.mode in ("pair", "list"), "dpo.mode is pair or list"),
        (cfg.dpo.delta >= 0, "dpo.delta >= 0"),
        (cfg.dpo.rw_max > 0, "dpo.rw_max > 0"),
        (cfg.dpo.beta_dpo > 0, "dpo.beta_dpo > 0"),
        (cfg.eval.k >= 1, "eval.k >= 1"),
        (cfg.eval.beam >= cfg.eval.k, "eval.beam >= eval.k"),
        (cfg.eval.t_top > cfg.eval.t_mid > 0, "eval.t_top > eval.t_mid > 0"),
        (1 <= cfg.serve.port <= 65535, "serve.port in [1, 65535]"),
    ]
    for ok, what in checks:
        if not ok:
            raise ConfigError(f"config constraint violated: {what}")


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return config_from_dict(raw)


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
