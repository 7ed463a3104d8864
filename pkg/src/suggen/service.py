"""HTTP serving: live suggestions over an immutable snapshot plus
feedback capture that loops back into preference training.

Requests read one snapshot reference for their whole lifetime, so a
snapshot swap never produces mixed answers.  Feedback appends go through
a single lock; each accepted event is one JSONL line.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import dataclass, field

from fastapi import FastAPI, HTTPException, Query
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from .corpus import LEVEL_NAMES, POSITIVE_LEVELS, InteractionRecord
from .snapshot import ModelSnapshot, suggest_queries


class Suggestion(BaseModel):
    query: str
    score: float


class SuggestResponse(BaseModel):
    schema_version: int = Field(default=1, alias="schema")
    suggestions: list[Suggestion]

    model_config = {"populate_by_name": True}


class FeedbackIn(BaseModel):
    user: str = Field(min_length=1)
    prefix: str = Field(min_length=1)
    query: str = Field(min_length=1)
    level: str
    ts: int = 0


class FeedbackAck(BaseModel):
    ok: bool = True


class HealthOut(BaseModel):
    ok: bool
    snapshot_hash: str


@dataclass
class ServiceState:
    """Mutable serving state: swappable snapshot, feedback log, per-user
    memory accumulated from positive feedback."""

    snapshot: ModelSnapshot
    feedback_path: str
    histories: dict[str, list[str]] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)
    _last_ts: int = 0

    def history_of(self, user_id: str) -> tuple[str, ...]:
        with self.lock:
            return tuple(self.histories.get(user_id, ()))

    def profile_of(self, user_id: str) -> str:
        return self.snapshot.profiles.get(user_id, "")

    def record(self, event: FeedbackIn) -> dict:
        with self.lock:
            self._last_ts = max(self._last_ts + 1,
                                int(time.time() * 1000))
            line = {"user": event.user, "prefix": event.prefix,
                    "query": event.query, "level": event.level,
                    "client_ts": event.ts, "server_ts": self._last_ts}
            with open(self.feedback_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(line, sort_keys=True) + "\n")
                f.flush()
                os.fsync(f.fileno())
            if event.level in POSITIVE_LEVELS:
                bucket = self.histories.setdefault(event.user, [])
                if not bucket or bucket[-1] != event.query:
                    bucket.append(event.query)
            return line


def swap_snapshot(state: ServiceState, snapshot: ModelSnapshot,
                  expected_hash: str | None = None) -> None:
    """Atomically replaces the serving snapshot; refuses a hash mismatch."""
    if expected_hash is not None and snapshot.config_hash != expected_hash:
        raise ValueError(
            f"snapshot hash {snapshot.config_hash!r} does not match "
            f"expected {expected_hash!r}; swap refused")
    with state.lock:
        state.snapshot = snapshot


@dataclass(frozen=True)
class FeedbackExport:
    records: list[InteractionRecord]
    corrupt: int


def export_feedback_dataset(feedback_path: str) -> FeedbackExport:
    """Feedback log -> InteractionRecords for preference mining.

    Corrupt lines are skipped and counted; the conversion is idempotent.
    """
    records: list[InteractionRecord] = []
    corrupt = 0
    if not os.path.exists(feedback_path):
        return FeedbackExport([], 0)
    with open(feedback_path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                records.append(InteractionRecord(
                    user_id=raw["user"], prefix=raw["prefix"],
                    query=raw["query"], level=raw["level"],
                    ts=int(raw["server_ts"])))
            except (ValueError, KeyError, TypeError):
                corrupt += 1
    return FeedbackExport(records, corrupt)


def create_app(state: ServiceState, ui_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="query suggestion service")
    app.state.service = state
    if ui_dir:
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    @app.get("/suggest", response_model=SuggestResponse,
             response_model_by_alias=True)
    def suggest(user: str = Query(default=""),
                prefix: str = Query(default=""),
                k: int = Query(default=16, ge=1)):
        if not prefix:
            raise HTTPException(status_code=400,
                                detail="prefix must be non-empty")
        snapshot = state.snapshot
        ranked = suggest_queries(snapshot, prefix,
                                 history=state.history_of(user),
                                 profile=state.profile_of(user), k=k)
        return SuggestResponse(
            suggestions=[Suggestion(query=q, score=s) for q, s in ranked])

    @app.post("/feedback", response_model=FeedbackAck)
    def feedback(event: FeedbackIn):
        if event.level not in LEVEL_NAMES:
            raise HTTPException(
                status_code=400,
                detail=f"unknown level {event.level!r}; valid levels: "
                       f"{list(LEVEL_NAMES)}")
        state.record(event)
        return FeedbackAck()

    @app.get("/healthz", response_model=HealthOut)
    def healthz():
        return HealthOut(ok=True, snapshot_hash=state.snapshot.config_hash)

    return app
