"""Command-line entry point: one JSON config drives every stage.

Exit codes: 0 success, 2 config error, 3 missing dependency artifact,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, load_config
from .pipeline import STAGES, MissingArtifact, artifact_path, stage_train_dpo

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_RUNTIME = 4


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="suggen",
        description="Generative query-suggestion pipeline and service.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", required=True,
                       help="path to the run config (JSON)")
        return s

    add("gen-corpus", "generate the synthetic catalog and interaction log")
    add("train-align", "train the prefix/query alignment encoder")
    add("train-rqvae", "train the residual quantizer")
    add("build-index", "bucket index queries by semantic ID")
    add("train-sft", "supervised generator training")
    dpo = add("train-dpo", "preference-align the generator")
    dpo.add_argument("--mode", choices=["pair", "list", "both"],
                     default=None, help="override the configured loss mode")
    add("eval", "run the ablation comparison on the held-out split")
    srv = add("serve", "start the HTTP suggestion service")
    srv.add_argument("--generator", default=None,
                     choices=["sft", "dpo_pair", "dpo_list"],
                     help="which generator checkpoint to serve")
    srv.add_argument("--ui", default=None, metavar="DIR",
                     help="also serve static web-client assets under /ui")
    sug = add("suggest", "one-shot suggestions for a prefix")
    sug.add_argument("--prefix", required=True)
    sug.add_argument("--user", default="")
    sug.add_argument("-k", type=int, default=16)
    sug.add_argument("--generator", default=None,
                     choices=["sft", "dpo_pair", "dpo_list"])
    return p


def _run_suggest(cfg, args) -> int:
    from .snapshot import load_snapshot, suggest_queries
    snapshot = load_snapshot(cfg, generator_artifact=args.generator)
    profile = snapshot.profiles.get(args.user, "")
    ranked = suggest_queries(snapshot, args.prefix, history=(),
                             profile=profile, k=args.k)
    for query, score in ranked:
        print(f"{query}\t{score:.6f}")
    return EXIT_OK


def _run_serve(cfg, args) -> int:
    import uvicorn

    from .service import ServiceState, create_app
    from .snapshot import load_snapshot
    snapshot = load_snapshot(cfg, generator_artifact=args.generator)
    state = ServiceState(snapshot=snapshot,
                         feedback_path=artifact_path(cfg, "feedback"))
    app = create_app(state, ui_dir=args.ui)
    print(json.dumps({"serving": True, "host": cfg.serve.host,
                      "port": cfg.serve.port,
                      "snapshot_hash": snapshot.config_hash}))
    uvicorn.run(app, host=cfg.serve.host, port=cfg.serve.port,
                log_level="warning")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "suggest":
            return _run_suggest(cfg, args)
        if args.command == "serve":
            return _run_serve(cfg, args)
        if args.command == "train-dpo":
            modes = ["pair", "list"] if args.mode == "both" \
                else [args.mode or cfg.dpo.mode]
            summary = [stage_train_dpo(cfg, mode) for mode in modes]
            summary = summary[0] if len(summary) == 1 else summary
        else:
            summary = STAGES[args.command](cfg)
        print(json.dumps({"stage": args.command, "ok": True,
                          "summary": summary}, sort_keys=True))
        return EXIT_OK
    except MissingArtifact as e:
        print(json.dumps({"stage": args.command, "ok": False,
                          "error": str(e), "run_first": e.stage}),
              file=sys.stderr)
        return EXIT_MISSING
    except Exception as e:  # pragma: no cover - exercised via subcommands
        print(json.dumps({"stage": args.command, "ok": False,
                          "error": f"{type(e).__name__}: {e}"}),
              file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
