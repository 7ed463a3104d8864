"""Scripted browser-session check for the web client.

Builds a small artifact set, serves it, drives the real DOM through the
live-server vitest session, then verifies the feedback log: one Show per
rendered row, exactly one Click, and at least one preference group mined
from the session's events.  Prints a single [PASS]/[FAIL] line.
"""

import json
import os
import socket
import subprocess
import sys
import tempfile
import time
import urllib.request
from pathlib import Path

FRONTEND = Path(__file__).resolve().parents[1]

from suggen import pipeline
from suggen.config import config_from_dict
from suggen.corpus import build_preference_groups
from suggen.service import export_feedback_dataset


def tiny_config(workdir: str, port: int) -> dict:
    return {
        "seed": 0,
        "corpus": {"n_categories": 4, "queries_per_category": 6,
                   "n_users": 8, "n_events": 500},
        "align": {"d_emb": 16, "d_hidden": 32, "d_out": 16, "epochs": 2},
        "rqvae": {"n_levels": 3, "codebook_size": 8, "d_hidden": 16,
                  "d_latent": 8, "epochs": 4},
        "sft": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32,
                "max_enc_len": 96, "epochs": 2},
        "eval": {"k": 8, "beam": 8, "max_cases": 10},
        "serve": {"host": "127.0.0.1", "port": port},
        "paths": {"workdir": workdir},
    }


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def wait_healthy(url: str, timeout_s: float = 30.0) -> None:
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        try:
            with urllib.request.urlopen(url, timeout=2) as res:
                if res.status == 200:
                    return
        except OSError:
            time.sleep(0.2)
    raise RuntimeError(f"server at {url} never became healthy")


def main() -> int:
    tmp = tempfile.mkdtemp(prefix="suggen-ui-")
    port = free_port()
    raw = tiny_config(os.path.join(tmp, "artifacts"), port)
    cfg = config_from_dict(raw)
    for stage in ("gen-corpus", "train-align", "train-rqvae", "build-index",
                  "train-sft"):
        pipeline.STAGES[stage](cfg)
    cfg_path = os.path.join(tmp, "config.json")
    with open(cfg_path, "w", encoding="utf-8") as f:
        json.dump(raw, f)

    server = subprocess.Popen(
        [sys.executable, "-m", "suggen.cli", "serve", "--config", cfg_path],
        stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    manifest_path = os.path.join(tmp, "manifest.json")
    try:
        wait_healthy(f"http://127.0.0.1:{port}/healthz")
        env = dict(os.environ,
                   SUGGEN_BASE_URL=f"http://127.0.0.1:{port}",
                   SUGGEN_MANIFEST=manifest_path,
                   SUGGEN_PREFIX="so")
        session = subprocess.run(
            ["npx", "vitest", "run", "tests/loop.test.ts"],
            cwd=FRONTEND, env=env)
    finally:
        server.terminate()
        server.wait()
    if session.returncode != 0 or not os.path.exists(manifest_path):
        print("[FAIL] acceptance 9: browser session did not complete")
        return 1

    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    export = export_feedback_dataset(pipeline.artifact_path(cfg, "feedback"))
    session_records = [r for r in export.records
                       if r.user_id == manifest["user"]
                       and r.prefix == manifest["prefix"]]
    shows = sorted(r.query for r in session_records if r.level == "Show")
    clicks = [r.query for r in session_records if r.level == "Click"]
    groups = build_preference_groups(session_records)

    ok = (export.corrupt == 0
          and shows == sorted(manifest["rendered"])
          and clicks == [manifest["clicked"]]
          and len(groups) >= 1)
    detail = (f"{len(shows)} Show rows, {len(clicks)} Click, "
              f"{len(groups)} preference groups")
    print(f"[{'PASS' if ok else 'FAIL'}] acceptance 9: session loop - {detail}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
