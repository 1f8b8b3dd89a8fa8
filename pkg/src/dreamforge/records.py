"""Workflow node records shared by the session, step and trainer modules."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

from .fingerprint import Fingerprint

if TYPE_CHECKING:
    from .dataset import Dataset
    from .model import ModelRef

PENDING = "pending"
RUNNING = "running"
CACHED = "cached"
COMPLETED = "completed"
FAILED = "failed"

NODE_STEP = "step"
NODE_TRAINER = "trainer"


@dataclass
class StepRecord:
    """One workflow node: the unit of caching, resume and provenance."""

    name: str
    kind: str
    version: int
    args: dict
    inputs: list[Fingerprint]
    fingerprint: Fingerprint
    status: str = PENDING
    output: "Dataset | None" = None
    progress: int = 0

    # bookkeeping outside the fingerprint
    node_type: str = NODE_STEP
    dir: Path | None = None
    models: tuple["ModelRef", ...] = ()
    license: str | None = None
    citation: str | None = None
    completed_at: str | None = None
    cache_keys: list[str] = field(default_factory=list)
    from_manifest: bool = False

    @property
    def parent_fps(self) -> list[Fingerprint]:
        """Provenance parents: dataset inputs plus the models consulted."""
        return list(self.inputs) + [m.fingerprint() for m in self.models]


@dataclass
class TrainerRecord:
    """A trainer node: consumes one step's dataset, produces a model artifact."""

    name: str
    kind: str
    version: int
    args: dict
    input: Fingerprint
    fingerprint: Fingerprint
    status: str = PENDING
    artifact_dir: Path | None = None

    node_type: str = NODE_TRAINER
    dir: Path | None = None
    models: tuple["ModelRef", ...] = ()
    license: str | None = None
    citation: str | None = None
    completed_at: str | None = None
    cache_keys: list[str] = field(default_factory=list)
    from_manifest: bool = False

    @property
    def inputs(self) -> list[Fingerprint]:
        return [self.input]

    @property
    def parent_fps(self) -> list[Fingerprint]:
        return [self.input] + [m.fingerprint() for m in self.models]
