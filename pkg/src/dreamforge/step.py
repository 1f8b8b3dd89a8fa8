"""Steps: the cached, resumable operators of a workflow.

Running a step computes its fingerprint from {kind, version, args, input
fingerprints}. If the step's folder already holds that fingerprint with a
valid saved dataset, the output is loaded instead of recomputed; otherwise
the step executes, streaming records to disk as they are produced. A folder
left by a different configuration of the same name is renamed to
``<name>.bak-<old fp prefix>`` rather than deleted.

Record-wise prompting steps write each output row to the data file as soon
as it is committed and persist a progress marker, so an interrupted run
resumes from the last complete row; rows that were already generated are
served by the prompt cache either way, making reruns cost exactly the work
that was lost.
"""

from __future__ import annotations

import json
import re
import shutil
from dataclasses import dataclass
from itertools import islice
from pathlib import Path
from typing import Callable, Iterator, Sequence

from . import provenance
from .dataset import DATA_FILE, Dataset, check_record, write_schema, _StreamHasher
from .errors import (
    MissingExamples,
    NameConflict,
    SchemaMismatch,
    StepFailed,
    UncacheableWithoutLogicKey,
)
from .fingerprint import Fingerprint, fingerprint, make_node, to_jsonable
from .model import GenerationConfig, ModelRef, cache_key, generate_batch
from .records import (
    CACHED,
    COMPLETED,
    FAILED,
    RUNNING,
    StepRecord,
)
from .session import Session, normalize_name, rfc3339_now

PROGRESS_INTERVAL = 100  # records between progress.json checkpoints
DEFAULT_IN_FLIGHT = 8

FEW_SHOT_SEPARATOR = "\n###\n"

_PLACEHOLDER = re.compile(r"\{\{([^{}]+)\}\}")


@dataclass(frozen=True)
class PromptTemplate:
    """Text template with {{column}} placeholders, rendered by pure
    substitution (no escaping). Few-shot examples, when present, are
    (input record, output text) pairs prepended before the query."""

    template: str
    system_prompt: str | None = None
    few_shot_examples: tuple[tuple[dict, str], ...] | None = None

    def placeholders(self) -> list[str]:
        return _PLACEHOLDER.findall(self.template)

    def render(self, record: dict) -> str:
        def substitute(match: re.Match) -> str:
            value = record[match.group(1)]
            if isinstance(value, str):
                return value
            return json.dumps(to_jsonable(value), sort_keys=True, ensure_ascii=False,
                              separators=(",", ":"))

        return _PLACEHOLDER.sub(substitute, self.template)

    def render_with_examples(self, record: dict) -> str:
        """Alternating example-input / example-output turns, then the query,
        joined by the few-shot separator."""
        if not self.few_shot_examples:
            return self.render(record)
        parts: list[str] = []
        for example_record, example_output in self.few_shot_examples:
            parts.append(self.render(example_record))
            parts.append(example_output)
        parts.append(self.render(record))
        return FEW_SHOT_SEPARATOR.join(parts)

    def to_canonical(self) -> dict:
        examples = None
        if self.few_shot_examples is not None:
            examples = [[dict(rec), out] for rec, out in self.few_shot_examples]
        return {
            "template": self.template,
            "system_prompt": self.system_prompt,
            "few_shot_examples": examples,
        }


@dataclass
class _Plan:
    """How to produce a step's records.

    run(start_row) must yield output records from start_row onward; plans
    that cannot skip ahead declare resumable=False and always restart."""

    out_columns: tuple[str, ...]
    run: Callable[[int], Iterator[dict]]
    resumable: bool = False


def _require_done(records: Sequence[StepRecord]) -> None:
    for r in records:
        if r.status not in (COMPLETED, CACHED):
            raise ValueError(f"input step {r.name!r} is {r.status}, not completed/cached")


def output_dataset(session: Session, record: StepRecord) -> Dataset:
    """The record's output, loading it from the step folder if needed."""
    if record.output is None:
        record.output = Dataset.load(record.dir / "dataset", verify=False)
    return record.output


def _count_complete_rows(data_path: Path) -> int:
    """Complete (newline-terminated) records in a partial data file; a
    trailing partial line from a crash is truncated away."""
    if not data_path.exists():
        return 0
    with open(data_path, "rb") as f:
        data = f.read()
    last_newline = data.rfind(b"\n")
    if last_newline != len(data) - 1:
        with open(data_path, "wb") as f:
            f.write(data[: last_newline + 1])
    return data[: last_newline + 1].count(b"\n")


def _write_json(path: Path, payload: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
                   encoding="utf-8")
    tmp.replace(path)


def _write_fingerprint_file(folder: Path, fp: Fingerprint, node: dict) -> None:
    _write_json(folder / "fingerprint.json", {"fingerprint": str(fp), "node": to_jsonable(node)})


def _is_valid_cached(folder: Path, fp: Fingerprint) -> bool:
    fp_file = folder / "fingerprint.json"
    if not fp_file.is_file():
        return False
    try:
        stored = json.loads(fp_file.read_text(encoding="utf-8"))["fingerprint"]
    except (ValueError, KeyError):
        return False
    if stored != str(fp):
        return False
    dataset_dir = folder / "dataset"
    if not (dataset_dir / "schema.json").is_file() or not (dataset_dir / DATA_FILE).is_file():
        return False
    try:
        json.loads((dataset_dir / "schema.json").read_text(encoding="utf-8"))
    except ValueError:
        return False
    return True


def bak_name(name: str, old_fp: str) -> str:
    return f"{name}.bak-{old_fp[:8]}"


def retire_stale_folder(session: Session, folder: Path, name: str, current_fp: Fingerprint) -> None:
    """A folder holding a different fingerprint is moved aside, never
    silently deleted; an incomplete folder without resume value is dropped."""
    fp_file = folder / "fingerprint.json"
    if fp_file.is_file():
        try:
            old = json.loads(fp_file.read_text(encoding="utf-8"))["fingerprint"]
        except (ValueError, KeyError):
            old = None
        if old is not None and old != str(current_fp):
            target = folder.with_name(bak_name(name, old))
            if target.exists():
                shutil.rmtree(folder)
            else:
                folder.rename(target)
            session.log("info", name, f"stale output moved to {target.name}")
            return
    shutil.rmtree(folder)


def _execute(
    session: Session,
    *,
    name: str,
    kind: str,
    version: int,
    args: dict,
    input_records: Sequence[StepRecord],
    plan_factory: Callable[[], _Plan],
    models: tuple[ModelRef, ...] = (),
    license: str | None = None,
    citation: str | None = None,
    cache_keys: list[str] | None = None,
) -> StepRecord:
    """Shared fingerprint/cache/resume/finalize machinery for every step."""
    _require_done(input_records)
    input_fps = [r.fingerprint for r in input_records]
    node = make_node(kind, version, args, input_fps)
    fp = fingerprint(node)
    final_name = session.register_name(name, fp)
    folder = session.node_dir(final_name)

    record = StepRecord(
        name=final_name, kind=kind, version=version, args=args, inputs=input_fps,
        fingerprint=fp, dir=folder, models=models, license=license, citation=citation,
    )

    if _is_valid_cached(folder, fp):
        record.status = CACHED
        record.completed_at = _stored_completion_time(folder)
        record.output = Dataset.load(folder / "dataset", verify=False)
        record.progress = len(record.output)
        session.record_step(record)
        session.log("info", final_name, "loaded from cache")
        return record

    started_at = rfc3339_now()
    start_row = 0
    if folder.exists():
        plan_probe = None
        progress_path = folder / "progress.json"
        if progress_path.is_file():
            try:
                plan_probe = json.loads(progress_path.read_text(encoding="utf-8"))
            except ValueError:
                plan_probe = None
        resumable_here = plan_probe is not None and plan_probe.get("fingerprint") == str(fp)
        if resumable_here:
            start_row = _count_complete_rows(folder / "dataset" / DATA_FILE)
        else:
            retire_stale_folder(session, folder, final_name, fp)

    plan = plan_factory()
    if not plan.resumable:
        if start_row:
            shutil.rmtree(folder / "dataset", ignore_errors=True)
        start_row = 0

    folder.mkdir(parents=True, exist_ok=True)
    (folder / "dataset").mkdir(exist_ok=True)
    data_path = folder / "dataset" / DATA_FILE
    if start_row == 0 and data_path.exists():
        data_path.unlink()

    record.status = RUNNING
    record.progress = start_row
    session.count_execution(final_name)
    _write_json(folder / "progress.json", {"fingerprint": str(fp), "records_done": start_row})
    if start_row:
        session.log("info", final_name, f"resuming at record {start_row}")
    else:
        session.log("info", final_name, "running")

    rows_done = start_row
    last_checkpoint = start_row
    try:
        with open(data_path, "a", encoding="utf-8", newline="") as out:
            for out_record in plan.run(start_row):
                check_record(out_record, plan.out_columns)
                ordered = {c: out_record[c] for c in plan.out_columns}
                out.write(json.dumps(ordered, ensure_ascii=False, separators=(",", ":"),
                                     allow_nan=False))
                out.write("\n")
                out.flush()
                rows_done += 1
                record.progress = rows_done
                if rows_done - last_checkpoint >= PROGRESS_INTERVAL:
                    _write_json(folder / "progress.json",
                                {"fingerprint": str(fp), "records_done": rows_done})
                    last_checkpoint = rows_done
    except SchemaMismatch:
        record.status = FAILED
        _record_failure(session, folder, record, fp, rows_done, started_at)
        raise
    except Exception as e:
        record.status = FAILED
        _record_failure(session, folder, record, fp, rows_done, started_at)
        raise StepFailed(f"step {final_name!r} failed after {rows_done} records: {e}") from e

    # Finalize: schema (with content hash), cards, status; the fingerprint
    # file lands last, acting as the folder's commit mark.
    content_hash, row_count = _hash_data_file(data_path, plan.out_columns)
    write_schema(folder / "dataset", plan.out_columns, row_count, content_hash)
    record.status = COMPLETED
    record.completed_at = rfc3339_now()
    record.output = Dataset.load(folder / "dataset", verify=False)
    if cache_keys:
        record.cache_keys = list(cache_keys)
    session.record_step(record)
    provenance.write_cards(session, record)
    _write_json(folder / "status.json", {
        "cache_keys": sorted(record.cache_keys),
        "finished_at": record.completed_at,
        "kind": kind,
        "name": final_name,
        "rows": row_count,
        "started_at": started_at,
        "status": COMPLETED,
    })
    _write_fingerprint_file(folder, fp, node)
    (folder / "progress.json").unlink(missing_ok=True)
    session.flush_manifest()
    session.log("info", final_name, f"completed ({row_count} records)")
    return record


def _record_failure(session: Session, folder: Path, record: StepRecord, fp: Fingerprint,
                    rows_done: int, started_at: str) -> None:
    _write_json(folder / "progress.json", {"fingerprint": str(fp), "records_done": rows_done})
    _write_json(folder / "status.json", {
        "cache_keys": sorted(record.cache_keys),
        "finished_at": rfc3339_now(),
        "kind": record.kind,
        "name": record.name,
        "rows": rows_done,
        "started_at": started_at,
        "status": FAILED,
    })
    session.record_step(record)
    session.log("error", record.name, f"failed after {rows_done} records")


def _stored_completion_time(folder: Path) -> str | None:
    status_path = folder / "status.json"
    if status_path.is_file():
        try:
            return json.loads(status_path.read_text(encoding="utf-8")).get("finished_at")
        except ValueError:
            return None
    return None


def _hash_data_file(data_path: Path, columns: Sequence[str]) -> tuple[Fingerprint, int]:
    hasher = _StreamHasher(columns)
    count = 0
    with open(data_path, "r", encoding="utf-8") as f:
        for line in f:
            hasher.add(json.loads(line))
            count += 1
    return hasher.digest(), count


# built-in steps


def data_source(session: Session, name: str, dataset: Dataset) -> StepRecord:
    """Wrap a literal dataset as a content-addressed step: cached for as long
    as the data itself is unchanged."""
    materialized = dataset.materialize() if dataset.content_hash is None else dataset
    args = {"content": materialized.content_hash}

    def plan() -> _Plan:
        return _Plan(
            out_columns=materialized.columns,
            run=lambda start: islice(materialized.iter_rows(), start, None),
            resumable=True,
        )

    return _execute(session, name=name, kind="data-source", version=1, args=args,
                    input_records=(), plan_factory=plan)


def _prompting_step(
    session: Session,
    name: str,
    kind: str,
    model: ModelRef,
    template: PromptTemplate,
    input_record: StepRecord,
    cfg: GenerationConfig,
    out_column: str,
    in_flight: int,
) -> StepRecord:
    input_dataset = output_dataset(session, input_record)
    unknown = [p for p in template.placeholders() if p not in input_dataset.columns]
    if unknown:
        raise SchemaMismatch(f"template placeholders {unknown} are not input columns "
                             f"{list(input_dataset.columns)}")
    if out_column in input_dataset.columns:
        raise SchemaMismatch(f"output column {out_column!r} already exists in the input")
    args = {
        "model": model.fingerprint(),
        "template": template.template,
        "system_prompt": template.system_prompt,
        "few_shot_examples": template.to_canonical()["few_shot_examples"],
        "gen": cfg.to_canonical(),
        "out_column": out_column,
    }
    out_columns = tuple(input_dataset.columns) + (out_column,)
    keys_used: list[str] = []

    def plan() -> _Plan:
        def run(start: int) -> Iterator[dict]:
            rows = islice(input_dataset.iter_rows(), start, None)
            while True:
                chunk = list(islice(rows, max(in_flight, 1)))
                if not chunk:
                    return
                items = [(template.system_prompt, template.render_with_examples(r)) for r in chunk]
                keys_used.extend(str(cache_key(model, cfg, sp, p)) for sp, p in items)
                texts = generate_batch(model, items, cfg, session.prompt_cache,
                                       mode=session.mode, in_flight=in_flight,
                                       transport=session.transport_for(model))
                for row, text in zip(chunk, texts):
                    yield {**row, out_column: text}

        return _Plan(out_columns=out_columns, run=run, resumable=True)

    return _execute(session, name=name, kind=kind, version=1, args=args,
                    input_records=(input_record,), plan_factory=plan,
                    models=(model,), cache_keys=keys_used)


def process_with_prompt(
    session: Session,
    name: str,
    model: ModelRef,
    template: PromptTemplate,
    input: StepRecord,
    gen: GenerationConfig | None = None,
    out_column: str = "response",
    in_flight: int = DEFAULT_IN_FLIGHT,
) -> StepRecord:
    """Render the template per input record, generate, and append the
    completion as out_column. Input columns and row order are preserved."""
    return _prompting_step(session, name, "process-with-prompt", model, template,
                           input, gen or GenerationConfig(), out_column, in_flight)


def few_shot_prompt(
    session: Session,
    name: str,
    model: ModelRef,
    examples: Sequence[tuple[str, str]],
    input: StepRecord,
    column: str,
    gen: GenerationConfig | None = None,
    out_column: str = "response",
    in_flight: int = DEFAULT_IN_FLIGHT,
) -> StepRecord:
    """process_with_prompt specialized to a single input column with required
    (example input, example output) demonstration pairs."""
    if not examples:
        raise MissingExamples("few_shot_prompt requires at least one example")
    template = PromptTemplate(
        template="{{" + column + "}}",
        few_shot_examples=tuple(({column: ex_in}, ex_out) for ex_in, ex_out in examples),
    )
    return _prompting_step(session, name, "few-shot-prompt", model, template,
                           input, gen or GenerationConfig(), out_column, in_flight)


def generate_from_prompt(
    session: Session,
    name: str,
    model: ModelRef,
    instruction: str,
    n: int,
    gen: GenerationConfig | None = None,
    in_flight: int = DEFAULT_IN_FLIGHT,
) -> StepRecord:
    """n generations from one instruction, one row each in a "generation"
    column. Row i's prompt is suffixed with "[item i]" so each row has a
    distinct prompt-cache entry."""
    if n < 0:
        raise ValueError("n must be >= 0")
    cfg = gen or GenerationConfig()
    args = {"instruction": instruction, "n": n, "model": model.fingerprint(),
            "gen": cfg.to_canonical()}
    keys_used: list[str] = []

    def prompt_for(i: int) -> str:
        return instruction + "\n[item " + str(i) + "]"

    def plan() -> _Plan:
        def run(start: int) -> Iterator[dict]:
            for base in range(start, n, max(in_flight, 1)):
                indices = range(base, min(base + max(in_flight, 1), n))
                items = [(None, prompt_for(i)) for i in indices]
                keys_used.extend(str(cache_key(model, cfg, sp, p)) for sp, p in items)
                texts = generate_batch(model, items, cfg, session.prompt_cache,
                                       mode=session.mode, in_flight=in_flight,
                                       transport=session.transport_for(model))
                for text in texts:
                    yield {"generation": text}

        return _Plan(out_columns=("generation",), run=run, resumable=True)

    return _execute(session, name=name, kind="generate-from-prompt", version=1, args=args,
                    input_records=(), plan_factory=plan, models=(model,), cache_keys=keys_used)


def map_step(
    session: Session,
    name: str,
    input: StepRecord,
    fn: Callable[[dict], dict],
    out_columns: Sequence[str] | None = None,
    logic_key: str | None = None,
) -> StepRecord:
    """Cached record-wise transform. The function itself cannot be hashed, so
    a caller-supplied logic_key versions it inside the fingerprint."""
    if logic_key is None:
        raise UncacheableWithoutLogicKey(
            "map_step needs a logic_key naming the mapping logic's version")
    input_dataset = output_dataset(session, input)
    cols = tuple(out_columns) if out_columns is not None else input_dataset.columns
    args = {"logic_key": logic_key, "out_columns": list(cols)}

    def plan() -> _Plan:
        def run(start: int) -> Iterator[dict]:
            for record in input_dataset.iter_rows():
                yield fn(record)

        return _Plan(out_columns=cols, run=run)

    return _execute(session, name=name, kind="map", version=1, args=args,
                    input_records=(input,), plan_factory=plan)


def filter_step(
    session: Session,
    name: str,
    input: StepRecord,
    predicate: Callable[[dict], bool],
    logic_key: str | None = None,
) -> StepRecord:
    """Cached order-preserving filter; logic_key versions the predicate."""
    if logic_key is None:
        raise UncacheableWithoutLogicKey(
            "filter_step needs a logic_key naming the predicate's version")
    input_dataset = output_dataset(session, input)
    args = {"logic_key": logic_key}

    def plan() -> _Plan:
        def run(start: int) -> Iterator[dict]:
            return (r for r in input_dataset.iter_rows() if predicate(r))

        return _Plan(out_columns=input_dataset.columns, run=run)

    return _execute(session, name=name, kind="filter", version=1, args=args,
                    input_records=(input,), plan_factory=plan)


def shuffle_step(session: Session, name: str, input: StepRecord, seed: int) -> StepRecord:
    """Cached deterministic shuffle (splitmix64 Fisher-Yates)."""
    input_dataset = output_dataset(session, input)
    args = {"seed": seed}

    def plan() -> _Plan:
        def run(start: int) -> Iterator[dict]:
            return iter(input_dataset.shuffle(seed).rows())

        return _Plan(out_columns=input_dataset.columns, run=run)

    return _execute(session, name=name, kind="shuffle", version=1, args=args,
                    input_records=(input,), plan_factory=plan)


def concat_step(session: Session, name: str, inputs: Sequence[StepRecord]) -> StepRecord:
    """Cached concatenation: rows in argument order, then row order."""
    from .dataset import concat as dataset_concat

    datasets = [output_dataset(session, r) for r in inputs]
    combined = dataset_concat(datasets)  # validates schemas / non-empty

    def plan() -> _Plan:
        def run(start: int) -> Iterator[dict]:
            return combined.iter_rows()

        return _Plan(out_columns=combined.columns, run=run)

    return _execute(session, name=name, kind="concat", version=1, args={},
                    input_records=tuple(inputs), plan_factory=plan)


def run_step(
    session: Session,
    name: str,
    kind: str,
    args: dict,
    inputs: Sequence[StepRecord],
    execute: Callable[[list[Dataset]], Dataset],
    version: int = 1,
    logic_key: str | None = None,
    license: str | None = None,
    citation: str | None = None,
) -> StepRecord:
    """Run a custom step. The execute callable receives the input datasets
    and returns the output Dataset; since code cannot be fingerprinted, a
    logic_key is required to make the step cacheable."""
    if logic_key is None:
        raise UncacheableWithoutLogicKey(
            f"custom step {name!r} needs a logic_key to be cacheable")
    canonical_args = dict(args)
    canonical_args["logic_key"] = logic_key
    input_records = tuple(inputs)
    _require_done(input_records)
    datasets = [output_dataset(session, r) for r in input_records]

    def plan() -> _Plan:
        result = execute(list(datasets))
        return _Plan(out_columns=result.columns, run=lambda start: result.iter_rows())

    return _execute(session, name=name, kind=kind, version=version, args=canonical_args,
                    input_records=input_records, plan_factory=plan,
                    license=license, citation=citation)


# background execution


@dataclass
class BackgroundHandle:
    """Join handle for a background thunk; see run_in_background/wait."""

    names: tuple[str, ...]
    _future: object = None


_token_counter = iter(range(1, 1 << 62))


def run_in_background(session: Session, thunk: Callable[[], Sequence[StepRecord]],
                      names: Sequence[str]) -> BackgroundHandle:
    """Run a thunk of steps concurrently with the caller. The step names the
    thunk will use must be declared up front; they are reserved at submission
    so overlapping work is rejected immediately (NameConflict)."""
    normalized = [normalize_name(n) for n in names]
    token = next(_token_counter)
    session.reserve_names(normalized, token)

    def worker() -> list[StepRecord]:
        session._bg_token.value = token
        try:
            return list(thunk())
        finally:
            session._bg_token.value = None
            session.release_reservations(token)

    future = session.background_pool().submit(worker)
    return BackgroundHandle(names=tuple(normalized), _future=future)


def wait(handle: BackgroundHandle) -> list[StepRecord]:
    """Join a background thunk, returning its records or raising its error."""
    return handle._future.result()
