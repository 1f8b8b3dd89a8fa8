"""Columnar datasets backing every step input and output.

A Dataset is an immutable, ordered table of records. Storage is one of:

- memory: a list of records,
- disk: a folder holding ``schema.json`` + ``data.jsonl``,
- lazy: a re-invocable source producing a fresh record iterator per pass.

The on-disk format is deliberately boring: ``data.jsonl`` holds one compact
JSON record per line with keys in schema order and ``\\n`` terminators (UTF-8,
no BOM); ``schema.json`` records the columns, the row count and the content
hash. Floats are written as shortest-round-trip decimals so a saved file
re-parses to identical bits; the content hash itself is computed over the
canonical (bit-tagged) form, so equal schema+rows always hash equally no
matter how the dataset is stored.
"""

from __future__ import annotations

import hashlib
import json
import tempfile
from itertools import islice
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Sequence

from .errors import EmptySchema, HashMismatch, SchemaMismatch
from .fingerprint import Fingerprint, canonical_bytes
from .rng import fisher_yates

SCHEMA_FILE = "schema.json"
DATA_FILE = "data.jsonl"

MAX_VALUE_DEPTH = 8
_INT64_MIN = -(1 << 63)
_INT64_MAX = (1 << 63) - 1

MEMORY = "memory"
DISK = "disk"
LAZY = "lazy"


def _check_value(v: Any, depth: int = 1) -> None:
    if depth > MAX_VALUE_DEPTH:
        raise SchemaMismatch(f"value nesting exceeds {MAX_VALUE_DEPTH}")
    if v is None or isinstance(v, (str, bool)):
        return
    if isinstance(v, int):
        if not _INT64_MIN <= v <= _INT64_MAX:
            raise SchemaMismatch(f"integer out of 64-bit signed range: {v}")
        return
    if isinstance(v, float):
        if v != v or v in (float("inf"), float("-inf")):
            raise SchemaMismatch(f"non-finite float not allowed: {v!r}")
        return
    if isinstance(v, list):
        for item in v:
            _check_value(item, depth + 1)
        return
    raise SchemaMismatch(f"unsupported value type: {type(v).__name__}")


def _check_columns(columns: Sequence[str]) -> tuple[str, ...]:
    cols = tuple(columns)
    if len(cols) != len(set(cols)):
        raise SchemaMismatch(f"duplicate column names: {list(cols)}")
    for c in cols:
        if not isinstance(c, str) or not c:
            raise SchemaMismatch(f"column names must be non-empty text: {c!r}")
    return cols


def check_record(record: dict, columns: Sequence[str]) -> dict:
    """Validate a record against the declared columns; returns the record."""
    if set(record) != set(columns):
        raise SchemaMismatch(
            f"record keys {sorted(record)} do not match columns {sorted(columns)}"
        )
    for v in record.values():
        _check_value(v)
    return record


class _StreamHasher:
    """Incrementally hashes the canonical form of {"columns":…,"rows":[…]}.

    Produces the same digest as fingerprinting the fully materialized
    structure, without holding the rows."""

    def __init__(self, columns: Sequence[str]) -> None:
        self._h = hashlib.sha256()
        self._h.update(b'{"columns":' + canonical_bytes(list(columns)) + b',"rows":[')
        self._first = True

    def add(self, record: dict) -> None:
        if not self._first:
            self._h.update(b",")
        self._h.update(canonical_bytes(record))
        self._first = False

    def digest(self) -> Fingerprint:
        h = self._h.copy()
        h.update(b"]}")
        return Fingerprint(h.hexdigest())


def _dump_record(record: dict, columns: Sequence[str]) -> str:
    ordered = {c: record[c] for c in columns}
    return json.dumps(ordered, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


class Dataset:
    """Immutable table of records; see module docstring for storage modes."""

    def __init__(
        self,
        columns: Sequence[str],
        *,
        rows: list[dict] | None = None,
        directory: Path | None = None,
        source: Callable[[], Iterator[dict]] | None = None,
        content_hash: Fingerprint | None = None,
        row_count: int | None = None,
    ) -> None:
        self.columns = _check_columns(columns)
        self._rows = rows
        self._dir = directory
        self._source = source
        self._content_hash = content_hash
        self._row_count = row_count
        if rows is not None:
            self.storage = MEMORY
        elif directory is not None:
            self.storage = DISK
        elif source is not None:
            self.storage = LAZY
        else:
            raise ValueError("one of rows/directory/source is required")

    # construction

    @classmethod
    def from_rows(cls, columns: Sequence[str], rows: Iterable[dict]) -> "Dataset":
        cols = _check_columns(columns)
        materialized = [dict(check_record(r, cols)) for r in rows]
        hasher = _StreamHasher(cols)
        for r in materialized:
            hasher.add(r)
        return cls(cols, rows=materialized, content_hash=hasher.digest(),
                   row_count=len(materialized))

    @classmethod
    def from_iterable(cls, columns: Sequence[str], source: Callable[[], Iterator[dict]]) -> "Dataset":
        """Lazy dataset over a re-invocable iterator factory. The content hash
        is unknown until the dataset is materialized or saved."""
        return cls(columns, source=source)

    @classmethod
    def load(cls, directory: str | Path, verify: bool = True) -> "Dataset":
        """Open a saved dataset; verifies the stored content hash by default."""
        directory = Path(directory)
        schema = json.loads((directory / SCHEMA_FILE).read_text(encoding="utf-8"))
        cols = _check_columns(schema["columns"])
        stored = Fingerprint(schema["content_hash"])
        ds = cls(cols, directory=directory, content_hash=stored,
                 row_count=int(schema["row_count"]))
        if verify:
            hasher = _StreamHasher(cols)
            n = 0
            try:
                for record in ds.iter_rows():
                    hasher.add(record)
                    n += 1
            except (json.JSONDecodeError, UnicodeDecodeError) as e:
                raise HashMismatch(f"corrupt data file in {directory}: {e}") from e
            if n != ds._row_count or hasher.digest() != stored:
                raise HashMismatch(
                    f"content hash mismatch in {directory}: "
                    f"stored {stored.short()}..., recomputed {hasher.digest().short()}..."
                )
        return ds

    # iteration and materialization

    def iter_rows(self) -> Iterator[dict]:
        """Fresh iterator over records. Lazy sources are re-invoked per pass
        and must therefore be re-invocable callables."""
        if self.storage == MEMORY:
            return iter(self._rows)
        if self.storage == DISK:
            return self._iter_disk()
        return self._source()

    def _iter_disk(self) -> Iterator[dict]:
        with open(self._dir / DATA_FILE, "r", encoding="utf-8") as f:
            for line in f:
                yield json.loads(line)

    def materialize(self) -> "Dataset":
        """Memory-backed copy (self if already in memory)."""
        if self.storage == MEMORY:
            return self
        return Dataset.from_rows(self.columns, self.iter_rows())

    def __len__(self) -> int:
        if self._row_count is None:
            self._row_count = sum(1 for _ in self.iter_rows())
        return self._row_count

    @property
    def content_hash(self) -> Fingerprint | None:
        """Stable address of schema+rows; None for lazy datasets until
        materialized."""
        return self._content_hash

    def rows(self) -> list[dict]:
        return list(self.iter_rows())

    # transforms

    def map(self, fn: Callable[[dict], dict], out_columns: Sequence[str] | None = None) -> "Dataset":
        """Apply fn to every record, preserving length and order. Lazy inputs
        stay lazy; disk inputs stream to a fresh directory."""
        cols = _check_columns(out_columns) if out_columns is not None else self.columns

        def transform(rows: Iterator[dict]) -> Iterator[dict]:
            for record in rows:
                yield check_record(fn(record), cols)

        return self._derive(cols, transform)

    def filter(self, predicate: Callable[[dict], bool]) -> "Dataset":
        """Keep records where predicate holds, preserving order."""

        def transform(rows: Iterator[dict]) -> Iterator[dict]:
            return (r for r in rows if predicate(r))

        return self._derive(self.columns, transform)

    def shuffle(self, seed: int) -> "Dataset":
        """Deterministic permutation: Fisher-Yates driven by splitmix64(seed).
        Materializes lazy and disk inputs (random access required)."""
        rows = [dict(r) for r in self.iter_rows()]
        fisher_yates(rows, seed)
        return Dataset.from_rows(self.columns, rows)

    def _derive(self, cols: tuple[str, ...], transform: Callable[[Iterator[dict]], Iterator[dict]]) -> "Dataset":
        if self.storage == LAZY:
            upstream = self._source

            def source() -> Iterator[dict]:
                return transform(upstream())

            return Dataset.from_iterable(cols, source)
        if self.storage == DISK:
            out_dir = Path(tempfile.mkdtemp(prefix="dreamforge-dataset-"))
            _write_dataset(out_dir, cols, transform(self.iter_rows()))
            return Dataset.load(out_dir, verify=False)
        return Dataset.from_rows(cols, transform(self.iter_rows()))

    # persistence

    def save(self, directory: str | Path) -> None:
        """Write schema.json + data.jsonl into directory (created if needed).
        Streams a single pass; materializes nothing."""
        _write_dataset(Path(directory), self.columns, self.iter_rows(),
                       known_hash=self._content_hash, known_count=self._row_count)

    def head(self, n: int) -> list[dict]:
        return list(islice(self.iter_rows(), n))


def _write_dataset(
    directory: Path,
    columns: Sequence[str],
    rows: Iterator[dict],
    known_hash: Fingerprint | None = None,
    known_count: int | None = None,
) -> tuple[Fingerprint, int]:
    directory.mkdir(parents=True, exist_ok=True)
    hasher = _StreamHasher(columns)
    count = 0
    tmp = directory / (DATA_FILE + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        for record in rows:
            check_record(record, columns)
            hasher.add(record)
            f.write(_dump_record(record, columns))
            f.write("\n")
            count += 1
    tmp.replace(directory / DATA_FILE)
    digest = hasher.digest()
    if known_hash is not None and digest != known_hash:
        raise HashMismatch(f"dataset changed while saving to {directory}")
    if known_count is not None and count != known_count:
        raise HashMismatch(f"row count changed while saving to {directory}")
    write_schema(directory, columns, count, digest)
    return digest, count


def write_schema(directory: Path, columns: Sequence[str], row_count: int, content_hash: Fingerprint) -> None:
    schema = {
        "columns": list(columns),
        "content_hash": str(content_hash),
        "row_count": row_count,
    }
    tmp = directory / (SCHEMA_FILE + ".tmp")
    tmp.write_text(json.dumps(schema, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    tmp.replace(directory / SCHEMA_FILE)


def from_rows(columns: Sequence[str], rows: Iterable[dict]) -> Dataset:
    return Dataset.from_rows(columns, rows)


def load(directory: str | Path, verify: bool = True) -> Dataset:
    return Dataset.load(directory, verify=verify)


def concat(datasets: Sequence[Dataset]) -> Dataset:
    """Rows of all datasets in argument order. All inputs must share the
    identical column list; concat of nothing has no derivable schema."""
    if not datasets:
        raise EmptySchema("concat of zero datasets has no schema")
    cols = datasets[0].columns
    for d in datasets[1:]:
        if d.columns != cols:
            raise SchemaMismatch(f"column mismatch in concat: {d.columns} != {cols}")
    if any(d.storage == LAZY for d in datasets):
        parts = list(datasets)

        def source() -> Iterator[dict]:
            for part in parts:
                yield from part.iter_rows()

        return Dataset.from_iterable(cols, source)
    rows: list[dict] = []
    for d in datasets:
        rows.extend(d.iter_rows())
    return Dataset.from_rows(cols, rows)
