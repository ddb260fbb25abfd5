from __future__ import annotations

import concurrent.futures
import json
from pathlib import Path

import numpy as np
import pytest

from spot_mamba.utils import (
    ConfigError,
    DataError,
    NumericError,
    ShapeError,
    SpotMambaError,
    derive_rng,
    ensure_finite,
    hash_files,
    log_event,
)


def test_derived_streams_are_reproducible_and_distinct():
    a = derive_rng(7, 0, 3).random(5)
    b = derive_rng(7, 0, 3).random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, derive_rng(7, 0, 4).random(5))
    assert not np.array_equal(a, derive_rng(8, 0, 3).random(5))


def test_hash_files_depends_on_content_and_order(tmp_path: Path):
    one, two = tmp_path / "a.csv", tmp_path / "b.csv"
    one.write_text("1,2\n")
    two.write_text("3,4\n")
    digest = hash_files([one, two])
    assert len(digest) == 64
    assert digest == hash_files([one, two])
    assert digest != hash_files([two, one])
    two.write_text("3,5\n")
    assert digest != hash_files([one, two])


def test_log_event_appends_jsonl(tmp_path: Path):
    log = tmp_path / "run.jsonl"
    log_event(log, "epoch", epoch=np.int64(3), val_mae=np.float64(1.5), out=tmp_path)
    log_event(log, "done", level="warning")
    entries = [json.loads(line) for line in log.read_text().splitlines()]
    assert [e["event"] for e in entries] == ["epoch", "done"]
    assert entries[0]["epoch"] == 3 and entries[0]["val_mae"] == 1.5
    assert entries[0]["out"] == tmp_path.as_posix()
    assert entries[1]["level"] == "warning"
    assert "ts" in entries[0]


def test_log_event_lines_stay_whole_across_threads(tmp_path: Path):
    log = tmp_path / "run.jsonl"
    payload = "x" * 4096

    def write(worker):
        for i in range(50):
            log_event(log, "epoch", worker=worker, epoch=i, payload=payload)

    with concurrent.futures.ThreadPoolExecutor(max_workers=8) as executor:
        list(executor.map(write, range(8)))
    entries = [json.loads(line) for line in log.read_text().splitlines()]
    assert len(entries) == 400
    seen = {(e["worker"], e["epoch"]) for e in entries}
    assert seen == {(w, i) for w in range(8) for i in range(50)}


def test_log_event_without_file_is_a_no_op(tmp_path: Path):
    log_event(None, "epoch", epoch=1)
    assert list(tmp_path.iterdir()) == []


def test_ensure_finite():
    ensure_finite("ok", np.array([1.0, 2.0]))
    with pytest.raises(NumericError, match="2 non-finite"):
        ensure_finite("pred", np.array([1.0, np.nan, np.inf]))


@pytest.mark.parametrize("cls", [ShapeError, ConfigError, DataError])
def test_input_errors_are_value_errors(cls):
    assert issubclass(cls, SpotMambaError)
    assert issubclass(cls, ValueError)


def test_numeric_error_is_arithmetic():
    assert issubclass(NumericError, SpotMambaError)
    assert issubclass(NumericError, ArithmeticError)
