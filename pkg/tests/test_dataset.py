"""Dataset construction, transforms, persistence and streaming behaviour."""

from __future__ import annotations

import hashlib
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import dreamforge as df
from dreamforge.dataset import DATA_FILE, SCHEMA_FILE
from dreamforge.errors import EmptySchema, HashMismatch, SchemaMismatch


def test_from_rows_empty():
    d = df.Dataset.from_rows(["t"], [])
    assert len(d) == 0
    assert d.columns == ("t",)
    assert d.content_hash is not None


def test_from_rows_basic():
    d = df.Dataset.from_rows(["t"], [{"t": "a"}, {"t": "b"}])
    assert len(d) == 2
    assert d.rows() == [{"t": "a"}, {"t": "b"}]


def test_from_rows_schema_mismatch():
    with pytest.raises(SchemaMismatch):
        df.Dataset.from_rows(["t"], [{"x": "a"}])
    with pytest.raises(SchemaMismatch):
        df.Dataset.from_rows(["t"], [{"t": "a", "x": 1}])


def test_column_validation():
    with pytest.raises(SchemaMismatch):
        df.Dataset.from_rows(["t", "t"], [])
    with pytest.raises(SchemaMismatch):
        df.Dataset.from_rows([""], [])


def test_value_validation():
    with pytest.raises(SchemaMismatch):
        df.Dataset.from_rows(["t"], [{"t": float("nan")}])
    with pytest.raises(SchemaMismatch):
        df.Dataset.from_rows(["t"], [{"t": 1 << 70}])
    with pytest.raises(SchemaMismatch):
        df.Dataset.from_rows(["t"], [{"t": {"nested": "map"}}])
    deep = "x"
    for _ in range(10):
        deep = [deep]
    with pytest.raises(SchemaMismatch):
        df.Dataset.from_rows(["t"], [{"t": deep}])


def test_map_identity_preserves_hash():
    d = df.Dataset.from_rows(["t"], [{"t": "a"}, {"t": "b"}])
    mapped = d.map(lambda r: dict(r))
    assert mapped.content_hash == d.content_hash


def test_map_evaluates():
    d = df.Dataset.from_rows(["t"], [{"t": "ab"}, {"t": ""}])
    mapped = d.map(lambda r: {"n": len(r["t"])}, out_columns=["n"])
    assert mapped.rows() == [{"n": 2}, {"n": 0}]


def test_map_bad_output_schema():
    d = df.Dataset.from_rows(["t"], [{"t": "a"}])
    with pytest.raises(SchemaMismatch):
        d.map(lambda r: {"oops": 1}, out_columns=["n"]).rows()


def test_map_disk_backed_writes_new_dir_and_leaves_input_alone(tmp_path):
    rows = [{"t": f"row {i}"} for i in range(10_000)]
    df.Dataset.from_rows(["t"], rows).save(tmp_path)
    before = hashlib.sha256((tmp_path / DATA_FILE).read_bytes()).hexdigest()
    d = df.Dataset.load(tmp_path)
    mapped = d.map(lambda r: {"t": r["t"].upper()})
    assert mapped.storage == "disk"
    assert mapped._dir != tmp_path
    assert len(mapped) == 10_000
    after = hashlib.sha256((tmp_path / DATA_FILE).read_bytes()).hexdigest()
    assert before == after


def test_filter_laws():
    d = df.Dataset.from_rows(["t"], [{"t": "ax"}, {"t": "bx"}, {"t": "ay"}])
    assert d.filter(lambda r: True).content_hash == d.content_hash
    empty = d.filter(lambda r: False)
    assert empty.rows() == []
    assert empty.columns == d.columns
    assert [r["t"] for r in d.filter(lambda r: r["t"].startswith("a")).rows()] == ["ax", "ay"]


def test_shuffle_singleton():
    d = df.Dataset.from_rows(["t"], [{"t": "only"}])
    for seed in (0, 1, 42, 2**63):
        assert d.shuffle(seed).rows() == d.rows()


def test_shuffle_golden_seed_42():
    # Expected permutation derived by running the specified splitmix64 +
    # Fisher-Yates by script before the build: ["a","b","c","d"] -> c,a,d,b.
    d = df.Dataset.from_rows(["t"], [{"t": c} for c in "abcd"])
    assert [r["t"] for r in d.shuffle(42).rows()] == ["c", "a", "d", "b"]


def test_shuffle_reference_reimplementation_oracle():
    # Independent in-test oracle: re-derive the permutation from the stated
    # constants and compare against the library path.
    MASK = (1 << 64) - 1

    def ref_stream(seed):
        state = seed & MASK
        while True:
            state = (state + 0x9E3779B97F4A7C15) & MASK
            z = state
            z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
            z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
            yield z ^ (z >> 31)

    for seed in (0, 7, 42, 123456789):
        items = [{"t": str(i)} for i in range(25)]
        expected = [dict(r) for r in items]
        gen = ref_stream(seed)
        for i in range(len(expected) - 1, 0, -1):
            j = next(gen) % (i + 1)
            expected[i], expected[j] = expected[j], expected[i]
        got = df.Dataset.from_rows(["t"], items).shuffle(seed).rows()
        assert got == expected


def test_shuffle_deterministic_and_bijective():
    rows = [{"t": str(i)} for i in range(50)]
    d = df.Dataset.from_rows(["t"], rows)
    s1 = d.shuffle(7)
    s2 = d.shuffle(7)
    assert s1.content_hash == s2.content_hash
    assert sorted(r["t"] for r in s1.rows()) == sorted(r["t"] for r in rows)
    # input untouched
    assert d.rows() == rows


def test_concat_laws():
    a = df.Dataset.from_rows(["t"], [{"t": "1"}, {"t": "2"}])
    b = df.Dataset.from_rows(["t"], [{"t": "3"}, {"t": "4"}, {"t": "5"}])
    assert df.concat([a]).content_hash == a.content_hash
    both = df.concat([a, b])
    assert len(both) == 5
    assert [r["t"] for r in both.rows()] == ["1", "2", "3", "4", "5"]
    with pytest.raises(EmptySchema):
        df.concat([])
    with pytest.raises(SchemaMismatch):
        df.concat([a, df.Dataset.from_rows(["x"], [])])


def test_save_load_roundtrip(tmp_path):
    d = df.Dataset.from_rows(
        ["t", "n", "f", "flag", "maybe", "xs"],
        [
            {"t": "hello", "n": 42, "f": 0.7, "flag": True, "maybe": None, "xs": [1, "two"]},
            {"t": "café", "n": -1, "f": -0.0, "flag": False, "maybe": None, "xs": []},
        ],
    )
    d.save(tmp_path)
    loaded = df.Dataset.load(tmp_path)
    assert loaded.content_hash == d.content_hash
    assert loaded.rows() == d.rows()


def test_save_empty_dataset(tmp_path):
    df.Dataset.from_rows(["t"], []).save(tmp_path)
    assert (tmp_path / DATA_FILE).read_bytes() == b""
    schema = json.loads((tmp_path / SCHEMA_FILE).read_text())
    assert schema["row_count"] == 0


def test_jsonl_framing(tmp_path):
    # keys in schema order, compact separators, \n terminators, UTF-8 no BOM
    d = df.Dataset.from_rows(["b", "a"], [{"a": 1, "b": "x"}])
    d.save(tmp_path)
    raw = (tmp_path / DATA_FILE).read_bytes()
    assert raw == b'{"b":"x","a":1}\n'


def test_load_flipped_byte_raises_hash_mismatch(tmp_path):
    d = df.Dataset.from_rows(["t"], [{"t": "abcdef"}, {"t": "ghijkl"}])
    d.save(tmp_path)
    data = bytearray((tmp_path / DATA_FILE).read_bytes())
    pos = data.index(ord("c"))
    data[pos] = ord("X")
    (tmp_path / DATA_FILE).write_bytes(bytes(data))
    with pytest.raises(HashMismatch):
        df.Dataset.load(tmp_path)


def test_float_roundtrip_bit_exact(tmp_path):
    values = [0.1, 1e300, -2.5e-10, 3.141592653589793, 0.0, -0.0, 1.0 / 3.0]
    d = df.Dataset.from_rows(["f"], [{"f": v} for v in values])
    d.save(tmp_path)
    loaded = df.Dataset.load(tmp_path)
    import struct
    got = [struct.pack(">d", r["f"]) for r in loaded.rows()]
    want = [struct.pack(">d", v) for v in values]
    assert got == want


def test_lazy_map_is_streaming_and_counts_calls():
    produced = []
    calls = []

    def source():
        def generate():
            for i in range(10_000):
                produced.append(i)
                yield {"t": str(i)}
        return generate()

    lazy = df.Dataset.from_iterable(["t"], source)
    assert lazy.storage == "lazy"
    assert lazy.content_hash is None

    def fn(r):
        calls.append(1)
        return {"t": r["t"] + "!"}

    mapped = lazy.map(fn)
    assert mapped.storage == "lazy"
    it = mapped.iter_rows()
    head = [next(it) for _ in range(3)]
    assert head[0] == {"t": "0!"}
    # streaming: pulling 3 output rows pulled only 3 input rows
    assert len(produced) == 3
    rest = list(it)
    assert len(calls) == 10_000
    assert len(produced) == 10_000
    assert rest[-1] == {"t": "9999!"}


def test_lazy_materializes_for_shuffle_and_save(tmp_path):
    lazy = df.Dataset.from_iterable(["t"], lambda: iter([{"t": "b"}, {"t": "a"}]))
    shuffled = lazy.shuffle(1)
    assert shuffled.storage == "memory"
    lazy.save(tmp_path)
    loaded = df.Dataset.load(tmp_path)
    assert loaded.rows() == [{"t": "b"}, {"t": "a"}]
    eager = df.Dataset.from_rows(["t"], [{"t": "b"}, {"t": "a"}])
    assert loaded.content_hash == eager.content_hash


def test_transforms_do_not_mutate_input():
    d = df.Dataset.from_rows(["t"], [{"t": "a"}, {"t": "b"}, {"t": "c"}])
    h = d.content_hash
    d.map(lambda r: {"t": r["t"] * 2}).rows()
    d.filter(lambda r: r["t"] != "a").rows()
    d.shuffle(99).rows()
    assert d.content_hash == h
    assert df.Dataset.from_rows(["t"], d.rows()).content_hash == h


value_strategy = st.one_of(
    st.none(),
    st.booleans(),
    st.integers(min_value=-(2**63), max_value=2**63 - 1),
    st.floats(allow_nan=False, allow_infinity=False),
    st.text(max_size=12),
    st.lists(st.integers(min_value=-5, max_value=5) | st.text(max_size=4), max_size=3),
)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.text(alphabet="abcdefg", min_size=1, max_size=4), min_size=1, max_size=4,
             unique=True),
    st.data(),
)
def test_save_load_hash_property(tmp_path_factory, columns, data):
    rows = data.draw(st.lists(
        st.fixed_dictionaries({c: value_strategy for c in columns}), max_size=6))
    d = df.Dataset.from_rows(columns, rows)
    target = tmp_path_factory.mktemp("ds")
    d.save(target)
    loaded = df.Dataset.load(target)
    assert loaded.content_hash == d.content_hash
    assert loaded.rows() == d.rows()
