"""The trainer contract, exercised by a deterministic toy text classifier.

train_toy consumes a completed step's dataset and fits a multinomial
logistic regression over hashed bag-of-words features by plain SGD:
tokens are whitespace-split and lowercased, hashed with FNV-1a-64 into
2^16 binary features, and updates run strictly sequentially in row order,
epoch after epoch, with no shuffling. Determinism is the point: the same
dataset, hyperparameters and seed produce a byte-identical weights file,
which is what lets checkpoint resume and cache loading be verified exactly.

Checkpoints land every ``checkpoint_every`` records and a matching run
resumes from the latest one; a checkpoint recorded against different data is
refused. Like steps, a finished trainer is loaded from disk when rerun with
an identical fingerprint.

Binary layout (all little-endian), shared by weights.bin and checkpoints:

    "DFWT" | u32 format version (1) | u32 class count
    repeat class count: u32 byte length | UTF-8 class label
    u32 dim | class count * dim float64 weights, row-major

Checkpoint files append: u32 epoch | u64 record index | u64 rng state |
32 raw bytes of the dataset fingerprint.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import provenance
from .errors import CheckpointMismatch, TrainerFailed
from .fingerprint import Fingerprint, fingerprint, make_node
from .records import CACHED, COMPLETED, FAILED, RUNNING, StepRecord, TrainerRecord
from .rng import fnv1a64
from .session import Session, rfc3339_now
from .step import _is_valid_cached, _write_fingerprint_file, _write_json, output_dataset, retire_stale_folder

MAGIC = b"DFWT"
WEIGHTS_FORMAT_VERSION = 1
FEATURE_DIM = 1 << 16

TRAINER_KIND = "toy-text-classifier"

# Test seam: called with the global record index after each checkpoint write.
_post_checkpoint = None


@dataclass
class ToyModel:
    """Linear classifier over hashed bag-of-words features."""

    classes: tuple[str, ...]
    dim: int
    weights: np.ndarray  # (len(classes), dim) float64, row-major

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise TrainerFailed(f"duplicate classes: {self.classes}")


@dataclass
class Checkpoint:
    epoch: int
    record_index: int
    rng_state: int
    dataset_fingerprint: Fingerprint
    model: ToyModel


def text_features(text: str, dim: int = FEATURE_DIM) -> list[int]:
    """Sorted distinct feature indices: FNV-1a-64(token) mod dim over
    lowercased whitespace tokens. Binary presence features."""
    return sorted({fnv1a64(token.encode("utf-8")) % dim for token in text.lower().split()})


def _logits(weights: np.ndarray, feature_idx: Sequence[int]) -> list[float]:
    # Scalar accumulation in ascending index order keeps float results
    # identical regardless of BLAS/SIMD build details.
    out = []
    for c in range(weights.shape[0]):
        row = weights[c]
        acc = 0.0
        for j in feature_idx:
            acc += float(row[j])
        out.append(acc)
    return out


def softmax(logits: Sequence[float]) -> list[float]:
    m = max(logits)
    exps = [math.exp(z - m) for z in logits]
    total = sum(exps)
    return [e / total for e in exps]


def class_probabilities(weights: np.ndarray, feature_idx: Sequence[int]) -> list[float]:
    return softmax(_logits(weights, feature_idx))


def cross_entropy_loss(weights: np.ndarray, feature_idx: Sequence[int], label_idx: int) -> float:
    probs = class_probabilities(weights, feature_idx)
    return -math.log(probs[label_idx])


def analytic_gradient(weights: np.ndarray, feature_idx: Sequence[int], label_idx: int) -> np.ndarray:
    """d loss / d weights for one example: (p - onehot) outer x."""
    probs = class_probabilities(weights, feature_idx)
    grad = np.zeros_like(weights)
    for c, p in enumerate(probs):
        g = p - (1.0 if c == label_idx else 0.0)
        for j in feature_idx:
            grad[c, j] += g
    return grad


def _sgd_update(weights: np.ndarray, feature_idx: Sequence[int], label_idx: int, lr: float) -> None:
    probs = class_probabilities(weights, feature_idx)
    for c, p in enumerate(probs):
        g = p - (1.0 if c == label_idx else 0.0)
        if g == 0.0:
            continue
        step = lr * g
        for j in feature_idx:
            weights[c, j] -= step


def predict(model: ToyModel, text: str) -> tuple[str, dict[str, float]]:
    """Argmax class and the softmax score per class; ties go to the earliest
    class in model order."""
    probs = class_probabilities(model.weights, text_features(text, model.dim))
    best = 0
    for c in range(1, len(probs)):
        if probs[c] > probs[best]:
            best = c
    return model.classes[best], dict(zip(model.classes, probs))


# serialization


def _weights_payload(model: ToyModel) -> bytes:
    parts = [MAGIC, struct.pack("<I", WEIGHTS_FORMAT_VERSION),
             struct.pack("<I", len(model.classes))]
    for label in model.classes:
        raw = label.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    parts.append(struct.pack("<I", model.dim))
    parts.append(np.ascontiguousarray(model.weights, dtype="<f8").tobytes())
    return b"".join(parts)


def write_weights(path: Path, model: ToyModel) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_weights_payload(model))
    tmp.replace(path)


def write_checkpoint(path: Path, model: ToyModel, epoch: int, record_index: int,
                     rng_state: int, dataset_fp: Fingerprint) -> None:
    payload = (_weights_payload(model)
               + struct.pack("<I", epoch)
               + struct.pack("<Q", record_index)
               + struct.pack("<Q", rng_state)
               + bytes.fromhex(str(dataset_fp)))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("truncated file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _read_model(reader: _Reader) -> ToyModel:
    if reader.take(4) != MAGIC:
        raise ValueError("bad magic")
    version = reader.u32()
    if version != WEIGHTS_FORMAT_VERSION:
        raise ValueError(f"unsupported weights format version {version}")
    n_classes = reader.u32()
    if n_classes == 0 or n_classes > 1 << 20:
        raise ValueError(f"implausible class count {n_classes}")
    classes = tuple(reader.take(reader.u32()).decode("utf-8") for _ in range(n_classes))
    dim = reader.u32()
    weights = np.frombuffer(reader.take(n_classes * dim * 8), dtype="<f8").reshape(n_classes, dim).copy()
    return ToyModel(classes=classes, dim=dim, weights=weights)


def read_weights(path: Path) -> ToyModel:
    reader = _Reader(path.read_bytes())
    model = _read_model(reader)
    if reader.pos != len(reader.data):
        raise ValueError("trailing bytes after weights")
    return model


def read_checkpoint(path: Path) -> Checkpoint:
    reader = _Reader(path.read_bytes())
    model = _read_model(reader)
    epoch = reader.u32()
    record_index = reader.u64()
    rng_state = reader.u64()
    dataset_fp = Fingerprint(reader.take(32).hex())
    if reader.pos != len(reader.data):
        raise ValueError("trailing bytes after checkpoint")
    return Checkpoint(epoch=epoch, record_index=record_index, rng_state=rng_state,
                      dataset_fingerprint=dataset_fp, model=model)


def load_model(source: TrainerRecord | Path | str) -> ToyModel:
    """Read the trained model from a trainer record or artifact folder."""
    folder = Path(source.artifact_dir if isinstance(source, TrainerRecord) else source)
    return read_weights(folder / "model" / "weights.bin")


def resume_from_checkpoint(directory: Path | str, input_fp: Fingerprint) -> Checkpoint | None:
    """Latest valid checkpoint recorded against input_fp, or None. Corrupt
    files (bad magic, truncation, trailing bytes) are skipped with a warning
    on stderr via the caller's session logging."""
    directory = Path(directory)
    if not directory.is_dir():
        return None
    candidates = sorted(directory.glob("ckpt-*.bin"), reverse=True)
    for path in candidates:
        try:
            checkpoint = read_checkpoint(path)
        except (ValueError, struct.error):
            continue
        if checkpoint.dataset_fingerprint == input_fp:
            return checkpoint
    return None


def _scan_checkpoints(directory: Path) -> list[Checkpoint]:
    out = []
    for path in sorted(directory.glob("ckpt-*.bin")):
        try:
            out.append(read_checkpoint(path))
        except (ValueError, struct.error):
            continue
    return out


def train_toy(
    session: Session,
    name: str,
    input: StepRecord,
    text_column: str,
    label_column: str,
    lr: float = 0.1,
    epochs: int = 1,
    seed: int = 0,
    checkpoint_every: int = 100,
) -> TrainerRecord:
    """Train the toy classifier on a completed step's dataset. Caching,
    checkpoint resume and provenance cards follow the step contract."""
    if input.status not in (COMPLETED, CACHED):
        raise ValueError(f"input step {input.name!r} is {input.status}, not completed/cached")
    if epochs < 1:
        raise TrainerFailed("epochs must be >= 1")
    if checkpoint_every < 1:
        raise TrainerFailed("checkpoint_every must be >= 1")

    dataset = output_dataset(session, input)
    if text_column not in dataset.columns or label_column not in dataset.columns:
        raise TrainerFailed(
            f"columns {text_column!r}/{label_column!r} not in {list(dataset.columns)}")
    rows = dataset.rows()
    if not rows:
        raise TrainerFailed("training dataset is empty")
    texts = []
    labels = []
    for r in rows:
        if not isinstance(r[label_column], str) or not isinstance(r[text_column], str):
            raise TrainerFailed("text and label columns must hold text values")
        texts.append(r[text_column])
        labels.append(r[label_column])
    classes = tuple(sorted(set(labels)))

    args = {
        "checkpoint_every": checkpoint_every,
        "epochs": epochs,
        "label_column": label_column,
        "lr": float(lr),
        "seed": seed,
        "text_column": text_column,
    }
    node = make_node(TRAINER_KIND, 1, args, [input.fingerprint])
    fp = fingerprint(node)
    final_name = session.register_name(name, fp)
    folder = session.node_dir(final_name, node_type="trainer")

    record = TrainerRecord(
        name=final_name, kind=TRAINER_KIND, version=1, args=args,
        input=input.fingerprint, fingerprint=fp, dir=folder, artifact_dir=folder,
    )

    if _is_trainer_cached(folder, fp):
        record.status = CACHED
        record.completed_at = _stored_time(folder)
        session.record_step(record)
        session.log("info", final_name, "loaded from cache")
        return record

    if folder.exists() and not _fingerprint_matches(folder, fp):
        retire_stale_folder(session, folder, final_name, fp)

    folder.mkdir(parents=True, exist_ok=True)
    checkpoints_dir = folder / "checkpoints"
    checkpoints_dir.mkdir(exist_ok=True)
    _write_fingerprint_file(folder, fp, node)

    # Resume if a matching checkpoint exists; checkpoints recorded against a
    # different dataset under our own fingerprint indicate a corrupted folder.
    input_fp = input.fingerprint
    start = resume_from_checkpoint(checkpoints_dir, input_fp)
    if start is None:
        existing = _scan_checkpoints(checkpoints_dir)
        if existing:
            raise CheckpointMismatch(
                f"checkpoints in {checkpoints_dir} were recorded against a different dataset")
        weights = np.zeros((len(classes), FEATURE_DIM), dtype="<f8")
        model = ToyModel(classes=classes, dim=FEATURE_DIM, weights=weights)
        global_index = 0
        rng_state = seed & ((1 << 64) - 1)
    else:
        model = start.model
        if model.classes != classes:
            raise CheckpointMismatch("checkpoint classes do not match the dataset labels")
        global_index = start.record_index
        rng_state = start.rng_state
        session.log("info", final_name, f"resuming from checkpoint at record {global_index}")

    record.status = RUNNING
    session.count_execution(final_name)
    started_at = rfc3339_now()
    session.log("info", final_name,
                f"training on {len(rows)} records x {epochs} epochs ({len(classes)} classes)")

    feature_cache = [text_features(t) for t in texts]
    label_idx = [classes.index(l) for l in labels]
    n = len(rows)
    total = epochs * n
    try:
        while global_index < total:
            epoch, offset = divmod(global_index, n)
            _sgd_update(model.weights, feature_cache[offset], label_idx[offset], lr)
            global_index += 1
            if global_index % checkpoint_every == 0:
                path = checkpoints_dir / f"ckpt-{global_index:08d}.bin"
                write_checkpoint(path, model, epoch, global_index, rng_state, input_fp)
                if _post_checkpoint is not None:
                    _post_checkpoint(global_index)
    except CheckpointMismatch:
        raise
    except Exception as e:
        record.status = FAILED
        session.record_step(record)
        session.log("error", final_name, f"training failed at record {global_index}")
        if isinstance(e, TrainerFailed):
            raise
        raise TrainerFailed(f"trainer {final_name!r} failed: {e}") from e

    model_dir = folder / "model"
    model_dir.mkdir(exist_ok=True)
    write_weights(model_dir / "weights.bin", model)
    record.status = COMPLETED
    record.completed_at = rfc3339_now()
    session.record_step(record)
    provenance.write_cards(session, record)
    _write_json(folder / "status.json", {
        "cache_keys": [],
        "classes": list(classes),
        "finished_at": record.completed_at,
        "kind": TRAINER_KIND,
        "name": final_name,
        "rows": n,
        "started_at": started_at,
        "status": COMPLETED,
    })
    session.flush_manifest()
    session.log("info", final_name, "completed")
    return record


def _fingerprint_matches(folder: Path, fp: Fingerprint) -> bool:
    fp_file = folder / "fingerprint.json"
    if not fp_file.is_file():
        return False
    try:
        return json.loads(fp_file.read_text(encoding="utf-8"))["fingerprint"] == str(fp)
    except (ValueError, KeyError):
        return False


def _is_trainer_cached(folder: Path, fp: Fingerprint) -> bool:
    return _fingerprint_matches(folder, fp) and (folder / "model" / "weights.bin").is_file()


def _stored_time(folder: Path) -> str | None:
    status_path = folder / "status.json"
    if not status_path.is_file():
        return None
    try:
        return json.loads(status_path.read_text(encoding="utf-8")).get("finished_at")
    except ValueError:
        return None
