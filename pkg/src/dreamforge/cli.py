"""Operator CLI for inspecting and maintaining session folders.

Read-only verbs (inspect, fingerprint, diff, card, dump-cache) never modify
the folder and tolerate a concurrently live session; clean and export refuse
to race a live session where it matters. Exit codes: 0 success, 1 domain
difference (diff found a mismatch), 2 usage or environment error.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

from .errors import DreamforgeError, NotASession, SessionLocked
from .fingerprint import Fingerprint, fingerprint, workflow_node
from .model import PromptCache
from .provenance import export_from_folder
from .session import CACHE_DB, folder_is_locked, read_manifest, require_session_folder


def _node_file(folder: Path) -> dict | None:
    path = folder / "fingerprint.json"
    if not path.is_file():
        return None
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except ValueError:
        return None


def _entry_folder(session_dir: Path, entry: dict) -> Path:
    sub = "trainers" if entry.get("node_type") == "trainer" else "steps"
    return session_dir / sub / entry["name"]


def folder_workflow_fingerprint(session_dir: Path) -> Fingerprint:
    """Workflow fingerprint recomputed from the folders' stored node
    descriptors: terminal nodes are those no other node consumes."""
    fps: list[str] = []
    consumed: set[str] = set()
    for sub in ("steps", "trainers"):
        root = session_dir / sub
        if not root.is_dir():
            continue
        for folder in sorted(root.iterdir()):
            if not folder.is_dir() or ".bak-" in folder.name:
                continue
            stored = _node_file(folder)
            if stored is None:
                continue
            fps.append(stored["fingerprint"])
            for item in stored.get("node", {}).get("inputs", []):
                if isinstance(item, dict) and "$fp" in item:
                    consumed.add(item["$fp"])
    terminals = [Fingerprint(fp) for fp in fps if fp not in consumed]
    return fingerprint(workflow_node(terminals))


def cmd_inspect(args) -> int:
    session_dir = require_session_folder(args.dir)
    manifest = read_manifest(session_dir)
    entries = manifest.get("steps", [])
    if args.step:
        for entry in entries:
            if entry["name"] == args.step:
                dataset_dir = _entry_folder(session_dir, entry) / "dataset"
                data_file = dataset_dir / "data.jsonl"
                if not data_file.is_file():
                    print(f"step {args.step!r} has no dataset", file=sys.stderr)
                    return 2
                with open(data_file, "r", encoding="utf-8") as f:
                    for i, line in enumerate(f):
                        if i >= args.rows:
                            break
                        sys.stdout.write(line)
                return 0
        print(f"no step named {args.step!r} in {session_dir}", file=sys.stderr)
        return 2
    steps = sum(1 for e in entries if e.get("node_type") != "trainer")
    trainers = len(entries) - steps
    print(f"session {session_dir}: {steps} steps, {trainers} trainers "
          f"(format_version {manifest.get('format_version')})")
    for entry in entries:
        folder = _entry_folder(session_dir, entry)
        rows = "-"
        schema_path = folder / "dataset" / "schema.json"
        if schema_path.is_file():
            try:
                rows = str(json.loads(schema_path.read_text(encoding="utf-8"))["row_count"])
            except (ValueError, KeyError):
                rows = "?"
        stored = _node_file(folder)
        kind = stored["node"].get("kind", "?") if stored else "?"
        print(f"{entry['name']}  {kind}  {entry.get('status', '?')}  "
              f"{entry['fingerprint'][:12]}  {rows}")
    return 0


def cmd_fingerprint(args) -> int:
    session_dir = require_session_folder(args.dir)
    if args.step:
        for sub in ("steps", "trainers"):
            stored = _node_file(session_dir / sub / args.step)
            if stored is not None:
                print(f"{args.step} {stored['fingerprint']}")
                return 0
        print(f"no step named {args.step!r} in {session_dir}", file=sys.stderr)
        return 2
    print(f"workflow {folder_workflow_fingerprint(session_dir)}")
    return 0


def _diff_values(a, b, path: str, out: list[str]) -> None:
    if isinstance(a, dict) and isinstance(b, dict):
        for key in sorted(set(a) | set(b)):
            sub = f"{path}.{key}" if path else key
            if key not in a or key not in b:
                out.append(sub)
            else:
                _diff_values(a[key], b[key], sub, out)
        return
    if isinstance(a, list) and isinstance(b, list):
        if len(a) != len(b):
            out.append(path)
            return
        for i, (x, y) in enumerate(zip(a, b)):
            _diff_values(x, y, f"{path}[{i}]", out)
        return
    if a != b:
        out.append(path)


def cmd_diff(args) -> int:
    dir_a = require_session_folder(args.dir_a)
    dir_b = require_session_folder(args.dir_b)
    wf_a = folder_workflow_fingerprint(dir_a)
    wf_b = folder_workflow_fingerprint(dir_b)
    if wf_a == wf_b:
        print(f"identical: workflow fingerprint {wf_a}")
        return 0
    print("workflow fingerprints differ:")
    print(f"  {dir_a}: {wf_a}")
    print(f"  {dir_b}: {wf_b}")
    entries_a = read_manifest(dir_a).get("steps", [])
    entries_b = read_manifest(dir_b).get("steps", [])
    by_name_b = {e["name"]: e for e in entries_b}
    names_a = [e["name"] for e in entries_a]
    extra_b = [e["name"] for e in entries_b if e["name"] not in set(names_a)]
    for entry in entries_a:
        name = entry["name"]
        other = by_name_b.get(name)
        if other is None:
            print(f"extra steps: {name!r} only in {dir_a}")
            return 1
        if entry["fingerprint"] == other["fingerprint"]:
            continue
        print(f"earliest diverging step: {name}")
        stored_a = _node_file(_entry_folder(dir_a, entry))
        stored_b = _node_file(_entry_folder(dir_b, other))
        if stored_a and stored_b:
            fields: list[str] = []
            _diff_values(stored_a["node"], stored_b["node"], "", fields)
            print(f"  differing fields: {', '.join(fields) or '(none recorded)'}")
        return 1
    if extra_b:
        print(f"extra steps: {', '.join(repr(n) for n in extra_b)} only in {dir_b}")
    return 1


def cmd_card(args) -> int:
    session_dir = require_session_folder(args.dir)
    filename = "card.json" if args.format == "json" else "card.md"
    for sub in ("steps", "trainers"):
        path = session_dir / sub / args.step / filename
        if path.is_file():
            sys.stdout.write(path.read_text(encoding="utf-8"))
            return 0
    print(f"no card for step {args.step!r} in {session_dir}", file=sys.stderr)
    return 2


def cmd_dump_cache(args) -> int:
    session_dir = require_session_folder(args.dir)
    db_path = session_dir / CACHE_DB
    if not db_path.is_file():
        return 0
    cache = PromptCache(db_path)
    try:
        for key, value in cache.items():
            sys.stdout.write(json.dumps({"key": key, "value": value}, sort_keys=True,
                                        ensure_ascii=False, separators=(",", ":")))
            sys.stdout.write("\n")
    finally:
        cache.close()
    return 0


def cmd_clean(args) -> int:
    session_dir = require_session_folder(args.dir)
    if folder_is_locked(session_dir):
        raise SessionLocked(f"{session_dir} is in use by a live session")
    removed: list[str] = []
    if args.bak:
        for sub in ("steps", "trainers"):
            root = session_dir / sub
            if not root.is_dir():
                continue
            for folder in sorted(root.iterdir()):
                if folder.is_dir() and ".bak-" in folder.name:
                    shutil.rmtree(folder)
                    removed.append(f"{sub}/{folder.name}")
    if args.checkpoints:
        trainers_root = session_dir / "trainers"
        if trainers_root.is_dir():
            for folder in sorted(trainers_root.iterdir()):
                ckpt_dir = folder / "checkpoints"
                if not ckpt_dir.is_dir():
                    continue
                checkpoints = sorted(ckpt_dir.glob("ckpt-*.bin"))
                completed = (folder / "model" / "weights.bin").is_file()
                superseded = checkpoints if completed else checkpoints[:-1]
                for path in superseded:
                    path.unlink()
                    removed.append(f"trainers/{folder.name}/checkpoints/{path.name}")
    if args.cache:
        db_path = session_dir / CACHE_DB
        if db_path.is_file():
            db_path.unlink()
            removed.append(str(CACHE_DB))
    if removed:
        for item in removed:
            print(f"removed {item}")
    else:
        print("nothing to remove")
    return 0


def cmd_export(args) -> int:
    session_dir = require_session_folder(args.dir)
    export_from_folder(session_dir, args.step, args.dest, include_caches=args.include_caches)
    print(f"exported {args.step} to {args.dest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dreamforge",
                                     description="Inspect and maintain workflow session folders.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("inspect", help="list steps, or show a step's rows")
    p.add_argument("--step", help="print rows of this step instead")
    p.add_argument("--rows", type=int, default=10, help="row limit for --step")
    p.add_argument("dir")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("fingerprint", help="print the workflow (or one step's) fingerprint")
    p.add_argument("--step")
    p.add_argument("dir")
    p.set_defaults(fn=cmd_fingerprint)

    p = sub.add_parser("diff", help="compare two session folders")
    p.add_argument("dir_a")
    p.add_argument("dir_b")
    p.set_defaults(fn=cmd_diff)

    p = sub.add_parser("card", help="print a node's provenance card")
    p.add_argument("--step", required=True)
    p.add_argument("--format", choices=("json", "md"), default="json")
    p.add_argument("dir")
    p.set_defaults(fn=cmd_card)

    p = sub.add_parser("dump-cache", help="dump the prompt cache as JSONL on stdout")
    p.add_argument("dir")
    p.set_defaults(fn=cmd_dump_cache)

    p = sub.add_parser("clean", help="remove stale backups, checkpoints or caches")
    p.add_argument("--bak", action="store_true")
    p.add_argument("--checkpoints", action="store_true")
    p.add_argument("--cache", action="store_true")
    p.add_argument("dir")
    p.set_defaults(fn=cmd_clean)

    p = sub.add_parser("export", help="export a node with its cards (and caches)")
    p.add_argument("--step", required=True)
    p.add_argument("--include-caches", action="store_true")
    p.add_argument("dir")
    p.add_argument("dest")
    p.set_defaults(fn=cmd_export)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (NotASession, SessionLocked) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DreamforgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
