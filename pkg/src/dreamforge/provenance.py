"""Provenance cards: recursive lineage documents for steps and trainers.

A card lists every transitive ancestor of a node (data sources, transforms,
prompting steps, the models they consulted, trainers) in topological order,
with per-ancestor license, citation and fingerprint, plus tags that mark
model-generated data and its source models. Cards are written eagerly when a
node completes and can be rebuilt on demand, so a shared session folder stays
self-describing even if the program that produced it is lost.
"""

from __future__ import annotations

import heapq
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

from .errors import DreamforgeError, IncompleteAncestry
from .fingerprint import Fingerprint, to_jsonable
from .records import CACHED, COMPLETED, NODE_TRAINER, StepRecord, TrainerRecord

if TYPE_CHECKING:
    from .session import Session

CARD_SCHEMA_VERSION = 1
ARGS_ELIDE_AT = 200

CARD_JSON = "card.json"
CARD_MD = "card.md"


@dataclass
class CardNode:
    """One ancestor entry: identity, metadata and its provenance parents."""

    kind: str
    name: str
    version: int
    fingerprint: Fingerprint
    args_summary: dict
    license: str | None = None
    citation: str | None = None
    date: str | None = None
    inputs: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "name": self.name,
            "version": self.version,
            "fingerprint": str(self.fingerprint),
            "args_summary": to_jsonable(self.args_summary),
            "license": self.license,
            "citation": self.citation,
            "date": self.date,
            "inputs": list(self.inputs),
        }


@dataclass
class Card:
    """Recursive provenance document for one subject node."""

    schema_version: int
    subject: dict
    ancestry: list[CardNode]
    tags: list[str]
    workflow_fingerprint: Fingerprint

    def to_json_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "subject": self.subject,
            "ancestry": [n.to_json_dict() for n in self.ancestry],
            "tags": list(self.tags),
            "workflow_fingerprint": str(self.workflow_fingerprint),
        }


def _elide(value):
    if isinstance(value, str) and len(value) > ARGS_ELIDE_AT:
        return value[:ARGS_ELIDE_AT] + "…" + str(len(value))
    if isinstance(value, dict):
        return {k: _elide(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_elide(v) for v in value]
    return value


def _record_card_node(record: StepRecord | TrainerRecord) -> dict:
    return CardNode(
        kind=record.kind,
        name=record.name,
        version=record.version,
        args_summary=_elide(record.args),
        fingerprint=record.fingerprint,
        license=record.license,
        citation=record.citation,
        date=record.completed_at,
        inputs=[str(fp) for fp in record.parent_fps],
    ).to_json_dict()


def _model_card_node(model, date: str | None) -> dict:
    return CardNode(
        kind="model",
        name=model.model_id,
        version=1,
        args_summary={"endpoint": model.endpoint, "provider": model.provider},
        fingerprint=model.fingerprint(),
        license=model.license,
        citation=model.citation,
        date=date,
        inputs=[],
    ).to_json_dict()


def _nodes_from_card_file(folder: Path) -> dict[Fingerprint, dict] | None:
    card_path = folder / CARD_JSON
    if not card_path.is_file():
        return None
    try:
        stored = json.loads(card_path.read_text(encoding="utf-8"))
        return {Fingerprint(n["fingerprint"]): n for n in stored["ancestry"]}
    except (ValueError, KeyError, TypeError):
        return None


def _find_folder_by_fp(session_dir: Path, fp: Fingerprint) -> Path | None:
    for sub in ("steps", "trainers"):
        root = session_dir / sub
        if not root.is_dir():
            continue
        for folder in sorted(root.iterdir()):
            if not folder.is_dir() or ".bak-" in folder.name:
                continue
            fp_file = folder / "fingerprint.json"
            if not fp_file.is_file():
                continue
            try:
                if json.loads(fp_file.read_text(encoding="utf-8"))["fingerprint"] == str(fp):
                    return folder
            except (ValueError, KeyError):
                continue
    return None


def _collect_nodes(session: "Session", record: StepRecord | TrainerRecord) -> dict[Fingerprint, dict]:
    """fp -> card-node dict for the record and all its transitive ancestors."""
    nodes: dict[Fingerprint, dict] = {}
    for input_fp in record.inputs:
        if input_fp in nodes:
            continue
        sub = _resolve_ancestor_nodes(session, input_fp)
        nodes.update(sub)
    for model in record.models:
        nodes.setdefault(model.fingerprint(), _model_card_node(model, record.completed_at))
    nodes[record.fingerprint] = _record_card_node(record)
    session.remember_prov_nodes(nodes)
    return nodes


def _resolve_ancestor_nodes(session: "Session", fp: Fingerprint) -> dict[Fingerprint, dict]:
    cached = session.prov_node(fp)
    if cached is not None:
        # Re-expand from the session cache: walk parents recursively.
        out: dict[Fingerprint, dict] = {}
        stack = [fp]
        while stack:
            current = stack.pop()
            if current in out:
                continue
            node = session.prov_node(current)
            if node is None:
                raise IncompleteAncestry(f"no provenance for ancestor {current[:12]}...")
            out[current] = node
            stack.extend(Fingerprint(p) for p in node.get("inputs", []))
        return out
    ancestor = session.record_by_fp(fp)
    if ancestor is not None and not ancestor.from_manifest:
        return _collect_nodes(session, ancestor)
    # Fall back to the folder's stored card (prior run).
    folder = ancestor.dir if ancestor is not None else _find_folder_by_fp(session.dir, fp)
    if folder is not None:
        nodes = _nodes_from_card_file(folder)
        if nodes is not None and fp in nodes:
            session.remember_prov_nodes(nodes)
            return nodes
    raise IncompleteAncestry(f"ancestor {fp[:12]}... has no folder in {session.dir}")


def _topo_sort(nodes: dict[Fingerprint, dict]) -> list[dict]:
    """Topological order, inputs before consumers, ties by fingerprint hex."""
    children: dict[Fingerprint, list[Fingerprint]] = {fp: [] for fp in nodes}
    indegree: dict[Fingerprint, int] = {fp: 0 for fp in nodes}
    for fp, node in nodes.items():
        for parent_hex in node.get("inputs", []):
            parent = Fingerprint(parent_hex)
            if parent in nodes and parent != fp:
                children[parent].append(fp)
                indegree[fp] += 1
    ready = sorted(fp for fp, deg in indegree.items() if deg == 0)
    heapq.heapify(ready)
    ordered: list[dict] = []
    while ready:
        fp = heapq.heappop(ready)
        ordered.append(nodes[fp])
        for child in children[fp]:
            indegree[child] -= 1
            if indegree[child] == 0:
                heapq.heappush(ready, child)
    if len(ordered) != len(nodes):
        raise DreamforgeError("provenance graph has a cycle")
    return ordered


def _tags_for(ancestry: list[dict]) -> list[str]:
    models = sorted({n["name"] for n in ancestry if n["kind"] == "model"})
    tags: list[str] = []
    if models:
        tags.append("synthetic")
        tags.extend(f"source-model:{m}" for m in models)
    return tags


def build_card(session: "Session", record: StepRecord | TrainerRecord) -> Card:
    """Deterministic provenance card for a completed or cached node."""
    if record.status not in (COMPLETED, CACHED):
        raise DreamforgeError(f"cannot build a card for a {record.status} node")
    nodes = _collect_nodes(session, record)
    ancestry_dicts = _topo_sort(nodes)
    ancestry = [
        CardNode(
            kind=n["kind"], name=n["name"], version=n["version"],
            fingerprint=Fingerprint(n["fingerprint"]),
            args_summary=n["args_summary"], license=n.get("license"),
            citation=n.get("citation"), date=n.get("date"),
            inputs=list(n.get("inputs", [])),
        )
        for n in ancestry_dicts
    ]
    return Card(
        schema_version=CARD_SCHEMA_VERSION,
        subject={
            "kind": record.kind,
            "name": record.name,
            "version": record.version,
            "fingerprint": str(record.fingerprint),
        },
        ancestry=ancestry,
        tags=_tags_for(ancestry_dicts),
        workflow_fingerprint=session.workflow_fingerprint(),
    )


def render_card(card: Card, format: str = "json") -> bytes:
    """json: canonical sorted-key JSON + newline. markdown: human sections."""
    if format == "json":
        return (
            json.dumps(card.to_json_dict(), sort_keys=True, ensure_ascii=False,
                       separators=(",", ":"))
            + "\n"
        ).encode("utf-8")
    if format not in ("md", "markdown"):
        raise ValueError(f"unknown card format: {format!r}")
    lines = [f"# Provenance card: {card.subject['name']}", ""]
    lines += ["## Subject", ""]
    for key in ("kind", "name", "version", "fingerprint"):
        lines.append(f"- {key}: `{card.subject[key]}`")
    lines += ["", "## Tags", ""]
    if card.tags:
        lines += [f"- {t}" for t in card.tags]
    else:
        lines.append("- (none)")
    lines += ["", "## Lineage", ""]
    lines.append("| # | kind | name | version | fingerprint | license | citation | date |")
    lines.append("|---|------|------|---------|-------------|---------|----------|------|")
    for i, node in enumerate(card.ancestry):
        lines.append(
            f"| {i} | {node.kind} | {node.name} | {node.version} "
            f"| `{node.fingerprint.short()}` | {node.license or '-'} "
            f"| {node.citation or '-'} | {node.date or '-'} |"
        )
    licenses = [(n.name, n.license) for n in card.ancestry if n.license]
    lines += ["", "## Licenses", ""]
    lines += [f"- {name}: {lic}" for name, lic in licenses] or ["- (none declared)"]
    citations = sorted({n.citation for n in card.ancestry if n.citation})
    lines += ["", "## Citations", ""]
    lines += [f"- {c}" for c in citations] or ["- (none declared)"]
    lines += ["", "## Reproducibility", ""]
    lines.append(f"- workflow fingerprint: `{card.workflow_fingerprint}`")
    for node in card.ancestry:
        lines.append(f"- {node.name or node.kind}: `{node.fingerprint}`")
    return ("\n".join(lines) + "\n").encode("utf-8")


def write_cards(session: "Session", record: StepRecord | TrainerRecord) -> Card:
    """Write card.json and card.md into the node's folder."""
    card = build_card(session, record)
    folder = record.dir
    (folder / CARD_JSON).write_bytes(render_card(card, "json"))
    (folder / CARD_MD).write_bytes(render_card(card, "md"))
    return card


# export


def _reachable_cache_entries(session_dir: Path, ancestor_fps: list[Fingerprint]) -> list[tuple[str, str]]:
    """Prompt-cache entries used by any ancestor, from their status files."""
    from .model import PromptCache
    from .session import CACHE_DB

    keys: set[str] = set()
    for fp in ancestor_fps:
        folder = _find_folder_by_fp(session_dir, fp)
        if folder is None:
            continue
        status_path = folder / "status.json"
        if not status_path.is_file():
            continue
        try:
            keys.update(json.loads(status_path.read_text(encoding="utf-8")).get("cache_keys", []))
        except ValueError:
            continue
    if not keys:
        return []
    db_path = session_dir / CACHE_DB
    if not db_path.is_file():
        return []
    cache = PromptCache(db_path)
    try:
        return [(k, v) for k, v in cache.items() if k in keys]
    finally:
        cache.close()


def export_from_folder(session_dir: str | Path, name: str, dest: str | Path,
                       include_caches: bool = False, node_type: str | None = None) -> Path:
    """Copy a completed node's payload, fingerprint and cards to dest.
    With include_caches, adds cache.jsonl holding every prompt-cache entry
    reachable from the node's ancestry, enabling offline replay."""
    session_dir = Path(session_dir)
    dest = Path(dest)
    folder = None
    for sub, payload in (("steps", "dataset"), ("trainers", "model")):
        if node_type == NODE_TRAINER and sub == "steps":
            continue
        candidate = session_dir / sub / name
        if candidate.is_dir():
            folder = candidate
            payload_name = payload
            break
    if folder is None:
        raise DreamforgeError(f"no step or trainer named {name!r} in {session_dir}")
    required = [folder / "fingerprint.json", folder / CARD_JSON, folder / CARD_MD, folder / payload_name]
    missing = [p.name for p in required if not p.exists()]
    if missing:
        raise DreamforgeError(f"node {name!r} is incomplete (missing {', '.join(missing)}); not exporting")
    if dest.exists() and any(dest.iterdir()):
        raise DreamforgeError(f"export destination {dest} exists and is not empty")

    entries: list[tuple[str, str]] = []
    if include_caches:
        stored = json.loads((folder / CARD_JSON).read_text(encoding="utf-8"))
        ancestor_fps = [Fingerprint(n["fingerprint"]) for n in stored["ancestry"]]
        entries = _reachable_cache_entries(session_dir, ancestor_fps)

    dest.mkdir(parents=True, exist_ok=True)
    shutil.copytree(folder / payload_name, dest / payload_name)
    for filename in ("fingerprint.json", CARD_JSON, CARD_MD):
        shutil.copy2(folder / filename, dest / filename)
    if include_caches:
        with open(dest / "cache.jsonl", "w", encoding="utf-8") as f:
            for key, value in sorted(entries):
                f.write(json.dumps({"key": key, "value": value}, ensure_ascii=False,
                                   sort_keys=True, separators=(",", ":")))
                f.write("\n")
    return dest


def export(session: "Session", record: StepRecord | TrainerRecord, dest: str | Path,
           include_caches: bool = False) -> Path:
    """Export a node from a live session; see export_from_folder."""
    if record.status not in (COMPLETED, CACHED):
        raise DreamforgeError(f"cannot export a {record.status} node")
    return export_from_folder(session.dir, record.name, dest,
                              include_caches=include_caches, node_type=record.node_type)
