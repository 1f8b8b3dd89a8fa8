"""Session lifecycle: folder skeleton, locking, manifest, name registry."""

from __future__ import annotations

import json
import subprocess
import sys
import threading

import pytest

import dreamforge as df
from dreamforge.errors import EmptyName, IncompatibleFormat, LockHeld
from dreamforge.session import LOCK_NAME, MANIFEST_NAME

from conftest import simple_source


def test_open_fresh_folder(tmp_path):
    target = tmp_path / "out"
    with df.open_session(target, log_level="error") as s:
        assert (target / MANIFEST_NAME).exists() is False  # manifest lands at close/flush
        assert (target / LOCK_NAME).exists()
        assert (target / "cache").is_dir()
        assert (target / "steps").is_dir()
        assert (target / "trainers").is_dir()
        assert s.manifest["format_version"] == 1
        assert s.manifest["steps"] == []
    manifest = json.loads((target / MANIFEST_NAME).read_text())
    assert manifest["steps"] == []
    assert not (target / LOCK_NAME).exists()


def test_reopen_prior_run_prefills_registry(tmp_path):
    target = tmp_path / "out"
    with df.open_session(target, log_level="error") as s:
        a = simple_source(s, "a", n=2)
        b = df.shuffle_step(s, "b", a, seed=1)
        df.map_step(s, "c", b, lambda r: r, logic_key="v1")
    with df.open_session(target, log_level="error") as s2:
        assert len(s2.registry) == 3
        assert [r.name for r in s2.registry.values()] == ["a", "b", "c"]
        assert all(r.status == "cached" for r in s2.registry.values())
        assert all(isinstance(r, df.StepRecord) for r in s2.registry.values())


def test_incompatible_format(tmp_path):
    target = tmp_path / "out"
    with df.open_session(target, log_level="error"):
        pass
    manifest = json.loads((target / MANIFEST_NAME).read_text())
    manifest["format_version"] = 99
    (target / MANIFEST_NAME).write_text(json.dumps(manifest))
    with pytest.raises(IncompatibleFormat):
        df.open_session(target, log_level="error")
    # the failed open released the lock
    assert not (target / LOCK_NAME).exists()


def test_lock_held_by_same_process(tmp_path):
    target = tmp_path / "out"
    with df.open_session(target, log_level="error"):
        with pytest.raises(LockHeld):
            df.open_session(target, log_level="error")
    with df.open_session(target, log_level="error"):
        pass


def test_concurrent_opens_exactly_one_wins(tmp_path):
    target = tmp_path / "out"
    outcomes = []
    barrier = threading.Barrier(2)

    def contender():
        barrier.wait()
        try:
            s = df.open_session(target, log_level="error")
            outcomes.append(s)
        except LockHeld:
            outcomes.append(None)

    threads = [threading.Thread(target=contender) for _ in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    winners = [o for o in outcomes if o is not None]
    assert len(winners) == 1
    winners[0].close()


def test_stale_lock_is_stolen(tmp_path, capsys):
    target = tmp_path / "out"
    target.mkdir()
    # a real pid that is no longer alive
    proc = subprocess.run([sys.executable, "-c", "import os; print(os.getpid())"],
                          capture_output=True, text=True)
    dead_pid = int(proc.stdout.strip())
    (target / LOCK_NAME).write_text(f"{dead_pid} 2024-01-01T00:00:00Z\n")
    with df.open_session(target, log_level="warn"):
        pass
    assert "stealing stale lock" in capsys.readouterr().err


def test_close_is_idempotent(tmp_path):
    s = df.open_session(tmp_path / "out", log_level="error")
    df.close_session(s)
    df.close_session(s)  # no-op


def test_manifest_lists_steps_in_registration_order(tmp_path):
    target = tmp_path / "out"
    with df.open_session(target, log_level="error") as s:
        simple_source(s, "First Step", n=1)
        simple_source(s, "Second Step", n=2, prefix="other")
    manifest = json.loads((target / MANIFEST_NAME).read_text())
    names = [e["name"] for e in manifest["steps"]]
    assert names == ["first-step", "second-step"]
    for entry in manifest["steps"]:
        assert set(entry) == {"fingerprint", "name", "node_type", "status"}
        assert len(entry["fingerprint"]) == 64


def test_manifest_roundtrips_byte_identical(tmp_path):
    target = tmp_path / "out"
    with df.open_session(target, log_level="error") as s:
        simple_source(s, "a", n=2)
    first = (target / MANIFEST_NAME).read_bytes()
    with df.open_session(target, log_level="error") as s2:
        simple_source(s2, "a", n=2)
    second = (target / MANIFEST_NAME).read_bytes()
    assert first == second


def test_register_step_normalization(session):
    assert df.register_step(session, "Generate Abstracts") == "generate-abstracts"
    assert df.register_step(session, "  A__B  ") == "a-b"
    assert df.register_step(session, "already-fine") == "already-fine"
    with pytest.raises(EmptyName):
        df.register_step(session, "")
    with pytest.raises(EmptyName):
        df.register_step(session, "___")


def test_register_collision_suffixes_within_run(session):
    # two live steps with the same name but different configurations
    a = simple_source(session, "step", n=1)
    b = simple_source(session, "step", n=2)
    assert a.name == "step"
    assert b.name == "step-2"
    # identical configuration re-registers under the same name
    c = simple_source(session, "step", n=1)
    assert c.name == "step"
    assert c.status == "cached"


def test_changed_args_across_runs_keeps_name(tmp_path):
    """Rerunning an edited program reuses the step name; the stale folder is
    renamed, not suffixed (suffixes are for collisions within one run)."""
    target = tmp_path / "out"
    with df.open_session(target, log_level="error") as s:
        simple_source(s, "step", n=1)
    with df.open_session(target, log_level="error") as s2:
        record = simple_source(s2, "step", n=2)
    assert record.name == "step"
    assert record.status == "completed"
    baks = [p.name for p in (target / "steps").iterdir() if ".bak-" in p.name]
    assert len(baks) == 1 and baks[0].startswith("step.bak-")


def test_log_format(tmp_path, capsys):
    with df.open_session(tmp_path / "out", log_level="info") as s:
        s.log("info", "my-step", "hello world")
    err = capsys.readouterr().err
    lines = [l for l in err.splitlines() if "[my-step]" in l]
    assert len(lines) == 1
    stamp, level, label, *msg = lines[0].split(" ")
    assert level == "INFO"
    assert label == "[my-step]"
    assert " ".join(msg) == "hello world"
    # RFC 3339 Z-suffixed timestamp
    assert stamp.endswith("Z") and "T" in stamp


def test_log_level_filtering(tmp_path, capsys):
    with df.open_session(tmp_path / "out", log_level="error") as s:
        s.log("info", None, "quiet")
        s.log("error", None, "loud")
    err = capsys.readouterr().err
    assert "quiet" not in err
    assert "loud" in err


def test_workflow_fingerprint_empty_session(session):
    # fingerprint of the fixed empty-workflow node, pinned in test_fingerprint
    assert session.workflow_fingerprint() == (
        "ff061e64817d46f6fbdd34f992e0e9b27190f3a8149944dbb4f2eebc8ff4e0bd"
    )


def test_workflow_fingerprint_equal_across_folders(tmp_path):
    fps = []
    for sub in ("one", "two"):
        with df.open_session(tmp_path / sub, log_level="error") as s:
            a = simple_source(s, "a", n=3)
            df.shuffle_step(s, "b", a, seed=5)
            fps.append(s.workflow_fingerprint())
    assert fps[0] == fps[1]


def test_workflow_fingerprint_sensitive_to_args(tmp_path):
    fps = []
    for seed in (5, 6):
        with df.open_session(tmp_path / str(seed), log_level="error") as s:
            a = simple_source(s, "a", n=3)
            df.shuffle_step(s, "b", a, seed=seed)
            fps.append(s.workflow_fingerprint())
    assert fps[0] != fps[1]
