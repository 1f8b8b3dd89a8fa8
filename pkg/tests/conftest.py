from __future__ import annotations

import pytest

import dreamforge as df


@pytest.fixture
def session(tmp_path):
    with df.open_session(tmp_path / "session", log_level="error") as s:
        yield s


@pytest.fixture
def mock_model():
    return df.ModelRef(provider="mock", model_id="mock-model-1",
                       license="apache-2.0", citation="Mock et al. 2024")


def make_rows(n, prefix="row"):
    return [{"t": f"{prefix} {i}"} for i in range(n)]


def simple_source(session, name="src", n=3, prefix="row"):
    return df.data_source(session, name, df.Dataset.from_rows(["t"], make_rows(n, prefix)))
