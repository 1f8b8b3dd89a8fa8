"""Session lifecycle and the on-disk session folder.

A session owns one output folder and everything a workflow produces lands
inside it:

    <output_dir>/.dreamforge.json     manifest (JSON, sorted keys, newline)
    <output_dir>/.lock                lock file: "<pid> <start time>"
    <output_dir>/cache/prompts.db     prompt cache (SQLite, single file)
    <output_dir>/steps/<name>/        one folder per step
    <output_dir>/trainers/<name>/     one folder per trainer

The folder is the shareable artifact: a recipient can rerun the workflow
program against it (every step loads from cache), inspect it with the CLI,
or replay it offline from the prompt cache alone.

Only one live session may hold a folder at a time, enforced by a lock file;
a stale lock (recorded pid no longer alive) is stolen with a warning.
"""

from __future__ import annotations

import json
import os
import re
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from itertools import count
from pathlib import Path
from typing import Iterator

from .errors import (
    EmptyName,
    IncompatibleFormat,
    LockHeld,
    NameConflict,
    NotASession,
)
from .fingerprint import FORMAT_VERSION, Fingerprint, fingerprint, workflow_node
from .model import (
    LIVE,
    PROVIDER_HTTP,
    PROVIDER_MOCK,
    DisabledTransport,
    HttpTransport,
    MockTransport,
    ModelRef,
    PromptCache,
)
from .records import CACHED, COMPLETED, FAILED, NODE_STEP, NODE_TRAINER, StepRecord, TrainerRecord

ENGINE_VERSION = "0.1.0"
MANIFEST_NAME = ".dreamforge.json"
LOCK_NAME = ".lock"
CACHE_DB = Path("cache") / "prompts.db"

LOG_LEVELS = {"debug": 10, "info": 20, "warn": 30, "error": 40}


def rfc3339_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds").replace("+00:00", "Z")


def normalize_name(name: str) -> str:
    """Filesystem-safe step name: lowercase, runs of non-alphanumerics
    collapsed to "-", trimmed."""
    if not isinstance(name, str) or not name:
        raise EmptyName("step name must be non-empty")
    normalized = re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-")
    if not normalized:
        raise EmptyName(f"step name {name!r} normalizes to nothing")
    return normalized


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    except (OverflowError, ValueError):
        return False
    return True


class Session:
    """Live handle on a session folder. Use open_session() to construct;
    works as a context manager and closes idempotently."""

    def __init__(self, output_dir: str | Path, log_level: str = "info", mode: str = LIVE):
        if log_level not in LOG_LEVELS:
            raise ValueError(f"unknown log level: {log_level!r}")
        self.dir = Path(output_dir)
        self.log_level = log_level
        self.mode = mode
        self.registry: dict[str, StepRecord | TrainerRecord] = {}
        self.executions: dict[str, int] = {}
        self.manifest: dict = {}
        self.prompt_cache: PromptCache | None = None
        self._mutex = threading.RLock()
        self._live = False
        self._lock_acquired = False
        self._transports: dict[str, object] = {}
        self._transports_disabled = False
        self._reserved: dict[str, int] = {}
        self._bg_token = threading.local()
        self._bg_pool: ThreadPoolExecutor | None = None
        self._records_by_fp: dict[Fingerprint, StepRecord | TrainerRecord] = {}
        self._prov_nodes: dict[Fingerprint, dict] = {}
        self._open()

    # lifecycle

    def _open(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        self._acquire_lock()
        try:
            (self.dir / "cache").mkdir(exist_ok=True)
            (self.dir / "steps").mkdir(exist_ok=True)
            (self.dir / "trainers").mkdir(exist_ok=True)
            manifest_path = self.dir / MANIFEST_NAME
            if manifest_path.exists():
                self.manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
                if self.manifest.get("format_version", 0) > FORMAT_VERSION:
                    raise IncompatibleFormat(
                        f"folder format_version {self.manifest.get('format_version')} "
                        f"> supported {FORMAT_VERSION}"
                    )
                self._load_prior_records()
            else:
                self.manifest = {
                    "created_at": rfc3339_now(),
                    "engine_version": ENGINE_VERSION,
                    "format_version": FORMAT_VERSION,
                    "steps": [],
                }
            self.prompt_cache = PromptCache(self.dir / CACHE_DB)
            self._live = True
            self.log("info", None, f"session open at {self.dir} (mode={self.mode})")
        except BaseException:
            self._release_lock()
            raise

    def _acquire_lock(self) -> None:
        lock_path = self.dir / LOCK_NAME
        payload = f"{os.getpid()} {rfc3339_now()}\n".encode()
        while True:
            try:
                fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                try:
                    content = lock_path.read_text(encoding="utf-8", errors="replace").split()
                    pid = int(content[0])
                except (OSError, ValueError, IndexError):
                    pid = -1
                if pid > 0 and _pid_alive(pid):
                    raise LockHeld(f"session folder {self.dir} is locked by live pid {pid}")
                self.log("warn", None, f"stealing stale lock at {lock_path} (pid {pid} not alive)")
                try:
                    lock_path.unlink()
                except FileNotFoundError:
                    pass
                continue
            os.write(fd, payload)
            os.close(fd)
            self._lock_acquired = True
            return

    def _release_lock(self) -> None:
        if self._lock_acquired:
            try:
                (self.dir / LOCK_NAME).unlink()
            except FileNotFoundError:
                pass
            self._lock_acquired = False

    def _load_prior_records(self) -> None:
        for entry in self.manifest.get("steps", []):
            name = entry["name"]
            node_type = entry.get("node_type", NODE_STEP)
            folder = self.node_dir(name, node_type)
            if not folder.is_dir():
                continue
            kind, version, args, inputs = "", 1, {}, []
            fp_file = folder / "fingerprint.json"
            if fp_file.exists():
                try:
                    node = json.loads(fp_file.read_text(encoding="utf-8"))["node"]
                    kind = node.get("kind", "")
                    version = node.get("version", 1)
                    args = node.get("args", {})
                    inputs = [Fingerprint(i["$fp"]) for i in node.get("inputs", [])]
                except (ValueError, KeyError, TypeError):
                    pass
            status = entry.get("status", COMPLETED)
            status = CACHED if status in (COMPLETED, CACHED) else status
            try:
                fp = Fingerprint(entry["fingerprint"])
            except (ValueError, KeyError):
                continue
            if node_type == NODE_TRAINER:
                record: StepRecord | TrainerRecord = TrainerRecord(
                    name=name, kind=kind, version=version, args=args,
                    input=inputs[0] if inputs else fp, fingerprint=fp,
                    status=status, dir=folder, artifact_dir=folder,
                    from_manifest=True,
                )
            else:
                record = StepRecord(
                    name=name, kind=kind, version=version, args=args,
                    inputs=inputs, fingerprint=fp, status=status, dir=folder,
                    from_manifest=True,
                )
            self.registry[name] = record
            self._records_by_fp.setdefault(fp, record)

    def close(self) -> None:
        """Flush the manifest, close cache handles, release the lock.
        Safe to call more than once."""
        if not self._live:
            return
        self._live = False
        try:
            if self._bg_pool is not None:
                self._bg_pool.shutdown(wait=True)
                self._bg_pool = None
            self.flush_manifest()
            if self.prompt_cache is not None:
                self.prompt_cache.close()
            self.log("info", None, f"session closed at {self.dir}")
        finally:
            self._release_lock()

    def __enter__(self) -> "Session":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()

    # manifest

    def flush_manifest(self) -> None:
        with self._mutex:
            entries = []
            for name, record in self.registry.items():
                if not self.node_dir(name, record.node_type).is_dir():
                    continue
                entries.append({
                    "fingerprint": str(record.fingerprint),
                    "name": name,
                    "node_type": record.node_type,
                    "status": record.status,
                })
            self.manifest["steps"] = entries
            data = json.dumps(self.manifest, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
            tmp = self.dir / (MANIFEST_NAME + ".tmp")
            tmp.write_text(data, encoding="utf-8")
            tmp.replace(self.dir / MANIFEST_NAME)

    # naming and registration

    def node_dir(self, name: str, node_type: str = NODE_STEP) -> Path:
        sub = "trainers" if node_type == NODE_TRAINER else "steps"
        return self.dir / sub / name

    def _candidates(self, base: str) -> Iterator[str]:
        yield base
        for i in count(2):
            yield f"{base}-{i}"

    def register_name(self, raw_name: str, fp: Fingerprint | None = None) -> str:
        """Claim a normalized, unique name for a node with fingerprint fp.

        Within one live run, a collision with a *different* fingerprint gets a
        numeric suffix; re-registering the identical node returns its existing
        name. Entries carried over from a previous run don't suffix: the new
        node takes the name over and the runner bak-renames the stale folder.
        """
        base = normalize_name(raw_name)
        token = getattr(self._bg_token, "value", None)
        with self._mutex:
            for candidate in self._candidates(base):
                reserved_by = self._reserved.get(candidate)
                if reserved_by is not None and reserved_by != token:
                    raise NameConflict(
                        f"step name {candidate!r} is reserved by a background task"
                    )
                existing = self.registry.get(candidate)
                claimed = (
                    existing is None
                    or existing.from_manifest
                    or (fp is not None and existing.fingerprint == fp)
                )
                if claimed:
                    if reserved_by is not None:
                        del self._reserved[candidate]
                    return candidate
                # live entry with a different fingerprint: try the next suffix

    def record_step(self, record: StepRecord | TrainerRecord) -> None:
        with self._mutex:
            self.registry[record.name] = record
            self._records_by_fp[record.fingerprint] = record
            self.flush_manifest()

    def record_by_fp(self, fp: Fingerprint) -> StepRecord | TrainerRecord | None:
        with self._mutex:
            return self._records_by_fp.get(fp)

    def count_execution(self, name: str) -> None:
        with self._mutex:
            self.executions[name] = self.executions.get(name, 0) + 1

    @property
    def execution_count(self) -> int:
        with self._mutex:
            return sum(self.executions.values())

    # background reservations

    def reserve_names(self, names: list[str], token: int) -> None:
        with self._mutex:
            for n in names:
                existing = self.registry.get(n)
                if (existing is not None and not existing.from_manifest) or n in self._reserved:
                    raise NameConflict(f"step name {n!r} is already in use")
            for n in names:
                self._reserved[n] = token

    def release_reservations(self, token: int) -> None:
        with self._mutex:
            for n in [n for n, t in self._reserved.items() if t == token]:
                del self._reserved[n]

    def background_pool(self) -> ThreadPoolExecutor:
        with self._mutex:
            if self._bg_pool is None:
                self._bg_pool = ThreadPoolExecutor(max_workers=8, thread_name_prefix="dreamforge-bg")
            return self._bg_pool

    # model transports

    def transport_for(self, model: ModelRef):
        with self._mutex:
            if self._transports_disabled:
                return DisabledTransport()
            if model.provider not in self._transports:
                if model.provider == PROVIDER_MOCK:
                    self._transports[PROVIDER_MOCK] = MockTransport()
                elif model.provider == PROVIDER_HTTP:
                    self._transports[PROVIDER_HTTP] = HttpTransport()
            return self._transports[model.provider]

    def set_transport(self, provider: str, transport) -> None:
        with self._mutex:
            self._transports[provider] = transport

    def disable_transports(self) -> None:
        """Hard-disable all outbound model calls (offline replay)."""
        with self._mutex:
            self._transports_disabled = True

    # workflow aggregate

    def workflow_fingerprint(self) -> Fingerprint:
        """Fingerprint over all terminal nodes (nodes that are no other
        node's input), sorted by hex."""
        with self._mutex:
            records = list(self.registry.values())
        consumed = set()
        for r in records:
            consumed.update(r.inputs)
        terminals = [r.fingerprint for r in records if r.fingerprint not in consumed]
        return fingerprint(workflow_node(terminals))

    # provenance node cache (used by the provenance module)

    def remember_prov_nodes(self, nodes: dict[Fingerprint, dict]) -> None:
        with self._mutex:
            self._prov_nodes.update(nodes)

    def prov_node(self, fp: Fingerprint) -> dict | None:
        with self._mutex:
            return self._prov_nodes.get(fp)

    # logging

    def log(self, level: str, step: str | None, message: str) -> None:
        if LOG_LEVELS[level] < LOG_LEVELS[self.log_level]:
            return
        print(f"{rfc3339_now()} {level.upper()} [{step or 'session'}] {message}", file=sys.stderr)


def open_session(output_dir: str | Path, log_level: str = "info", mode: str = LIVE) -> Session:
    """Open (or create) a session folder and return the live Session."""
    return Session(output_dir, log_level=log_level, mode=mode)


def close_session(session: Session) -> None:
    """Idempotent close: flushes the manifest and releases the folder lock."""
    session.close()


def register_step(session: Session, name: str, fingerprint: Fingerprint | None = None) -> str:
    """Normalize and claim a step name within the session (see
    Session.register_name for the collision policy)."""
    return session.register_name(name, fingerprint)


def require_session_folder(path: str | Path) -> Path:
    """Path must look like a session folder (has the manifest)."""
    path = Path(path)
    if not (path / MANIFEST_NAME).is_file():
        raise NotASession(f"{path} is not a session folder (missing {MANIFEST_NAME})")
    return path


def read_manifest(path: str | Path) -> dict:
    folder = require_session_folder(path)
    return json.loads((folder / MANIFEST_NAME).read_text(encoding="utf-8"))


def folder_is_locked(path: str | Path) -> bool:
    """True if the folder's lock file names a live process."""
    lock = Path(path) / LOCK_NAME
    if not lock.exists():
        return False
    try:
        pid = int(lock.read_text(encoding="utf-8", errors="replace").split()[0])
    except (OSError, ValueError, IndexError):
        return False
    return _pid_alive(pid)
