"""Task manifests: the unit of pipeline state and crash recovery.

A manifest records one image's journey through the stages. Manifests are
stored as one JSON file per task, written atomically; every state change is
also appended to a shared transition log for auditing. The allowed state
graph is

    PENDING -> STAGED -> PROCESSING -> PROCESSED -> INTEGRATED

with FAILED reachable from any active state.
"""

from __future__ import annotations

import json
import os
import re
import tempfile
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterator, Optional

from ..ingest import GazetteerEntry, ImageRef, RegisterMetadata


class TaskState(Enum):
    PENDING = "PENDING"
    STAGED = "STAGED"
    PROCESSING = "PROCESSING"
    PROCESSED = "PROCESSED"
    INTEGRATED = "INTEGRATED"
    FAILED = "FAILED"


ALLOWED_TRANSITIONS: dict[TaskState, frozenset[TaskState]] = {
    TaskState.PENDING: frozenset({TaskState.STAGED, TaskState.FAILED}),
    TaskState.STAGED: frozenset({TaskState.PROCESSING, TaskState.FAILED}),
    TaskState.PROCESSING: frozenset({TaskState.PROCESSED, TaskState.FAILED}),
    TaskState.PROCESSED: frozenset({TaskState.INTEGRATED, TaskState.FAILED}),
    TaskState.INTEGRATED: frozenset(),
    TaskState.FAILED: frozenset(),
}

TERMINAL_STATES = frozenset({TaskState.INTEGRATED, TaskState.FAILED})


class IllegalTransition(RuntimeError):
    def __init__(self, task_id: str, src: TaskState, dst: TaskState):
        super().__init__(f"task {task_id}: illegal transition {src.value} -> {dst.value}")
        self.task_id = task_id
        self.src = src
        self.dst = dst


@dataclass(frozen=True)
class FailureInfo:
    stage: str
    reason: str
    attempt: int = 1


_ID_RE = re.compile(r"[^A-Za-z0-9._-]+")


def task_id_for(image: ImageRef) -> str:
    """Deterministic, filesystem-safe task id for an image."""
    return f"{image.register.register_id}-p{image.sequence_index:04d}"


@dataclass
class TaskManifest:
    task_id: str
    image: ImageRef
    state: TaskState = TaskState.PENDING
    staged_path: Optional[str] = None
    result_path: Optional[str] = None
    timestamps: dict[str, float] = field(default_factory=dict)
    attempts: dict[str, int] = field(default_factory=dict)
    failure: Optional[FailureInfo] = None

    def to_json_dict(self) -> dict:
        register = self.image.register
        return {
            "task_id": self.task_id,
            "state": self.state.value,
            "staged_path": self.staged_path,
            "result_path": self.result_path,
            "timestamps": self.timestamps,
            "attempts": self.attempts,
            "failure": None
            if self.failure is None
            else {
                "stage": self.failure.stage,
                "reason": self.failure.reason,
                "attempt": self.failure.attempt,
            },
            "image": {
                "identifier": self.image.iiif_identifier,
                "sequence_index": self.image.sequence_index,
                "verified": self.image.verified,
                "width": self.image.width,
                "height": self.image.height,
                "register": {
                    "census_year": register.census_year,
                    "archival_id": register.archival_id,
                    "commune": {
                        "code": register.commune.code,
                        "canonical_name": register.commune.canonical_name,
                        "department": register.commune.department,
                    },
                },
            },
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "TaskManifest":
        reg = data["image"]["register"]
        metadata = RegisterMetadata(
            census_year=reg["census_year"],
            commune=GazetteerEntry(
                code=reg["commune"]["code"],
                canonical_name=reg["commune"]["canonical_name"],
                department=reg["commune"]["department"],
            ),
            archival_id=reg["archival_id"],
        )
        image = ImageRef(
            register=metadata,
            iiif_identifier=data["image"]["identifier"],
            sequence_index=data["image"]["sequence_index"],
            verified=data["image"].get("verified", False),
            width=data["image"].get("width"),
            height=data["image"].get("height"),
        )
        failure = data.get("failure")
        return cls(
            task_id=data["task_id"],
            image=image,
            state=TaskState(data["state"]),
            staged_path=data.get("staged_path"),
            result_path=data.get("result_path"),
            timestamps=dict(data.get("timestamps", {})),
            attempts=dict(data.get("attempts", {})),
            failure=None
            if failure is None
            else FailureInfo(failure["stage"], failure["reason"], failure.get("attempt", 1)),
        )


def _atomic_write(path: Path, data: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class ManifestStore:
    """One JSON file per task under ``root/manifests``; writes are atomic."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.directory = self.root / "manifests"
        self.directory.mkdir(parents=True, exist_ok=True)

    def path(self, task_id: str) -> Path:
        safe = _ID_RE.sub("_", task_id)
        return self.directory / f"{safe}.json"

    def exists(self, task_id: str) -> bool:
        return self.path(task_id).exists()

    def save(self, manifest: TaskManifest) -> None:
        _atomic_write(
            self.path(manifest.task_id),
            json.dumps(manifest.to_json_dict(), sort_keys=True, ensure_ascii=False),
        )

    def load(self, task_id: str) -> TaskManifest:
        return TaskManifest.from_json_dict(
            json.loads(self.path(task_id).read_text(encoding="utf-8"))
        )

    def load_all(self) -> list[TaskManifest]:
        manifests = []
        for path in sorted(self.directory.glob("*.json")):
            manifests.append(TaskManifest.from_json_dict(json.loads(path.read_text("utf-8"))))
        manifests.sort(key=lambda m: m.task_id)
        return manifests


class TransitionLog:
    """Append-only NDJSON log of task state transitions."""

    def __init__(self, root: str | Path):
        directory = Path(root) / "log"
        directory.mkdir(parents=True, exist_ok=True)
        self.path = directory / "transitions.ndjson"

    def append(self, task_id: str, src: Optional[TaskState], dst: TaskState, at: float) -> None:
        entry = {
            "task_id": task_id,
            "from": src.value if src else None,
            "to": dst.value,
            "at": at,
        }
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    def replay(self) -> Iterator[dict]:
        if not self.path.exists():
            return
        with open(self.path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    yield json.loads(line)


@dataclass
class PipelineContext:
    """Shared plumbing handed to every stage.

    ``on_transition`` is a test hook invoked after each persisted transition;
    raising from it simulates a crash at that point.
    """

    store: ManifestStore
    log: TransitionLog
    clock: Callable[[], float] = time.time
    on_transition: Optional[Callable[[TaskManifest], None]] = None

    @classmethod
    def at(cls, root: str | Path, **kwargs) -> "PipelineContext":
        return cls(store=ManifestStore(root), log=TransitionLog(root), **kwargs)


def advance(
    manifest: TaskManifest,
    new_state: TaskState,
    ctx: PipelineContext,
    *,
    failure: Optional[FailureInfo] = None,
) -> TaskManifest:
    """Persist a state transition, enforcing the allowed graph and keeping
    timestamps monotone."""
    if new_state not in ALLOWED_TRANSITIONS[manifest.state]:
        raise IllegalTransition(manifest.task_id, manifest.state, new_state)
    at = ctx.clock()
    if manifest.timestamps:
        at = max(at, max(manifest.timestamps.values()))
    src = manifest.state
    manifest.state = new_state
    manifest.timestamps[new_state.value] = at
    if failure is not None:
        manifest.failure = failure
    ctx.store.save(manifest)
    ctx.log.append(manifest.task_id, src, new_state, at)
    if ctx.on_transition is not None:
        ctx.on_transition(manifest)
    return manifest


def register_new(manifest: TaskManifest, ctx: PipelineContext) -> TaskManifest:
    """Persist a freshly planned manifest (creation edge, not a transition)."""
    at = ctx.clock()
    manifest.timestamps.setdefault(TaskState.PENDING.value, at)
    ctx.store.save(manifest)
    ctx.log.append(manifest.task_id, None, manifest.state, at)
    return manifest
