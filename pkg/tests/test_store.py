import csv
import json
import struct

import numpy as np
import pytest

from database.store import (
    CHECKPOINT_MAGIC, ensure_dir, load_checkpoint, read_json, read_jsonl, read_lines, save_checkpoint, write_csv,
    write_json, write_jsonl,
)
from util.errors import FatalIOError, ValidationError


def test_checkpoint_layout_and_reload(tmp_path, rng):
    params = {"conv1.w": rng.normal(size=(2, 3, 3, 3)), "pixel.b": np.zeros(4), "scalar": np.array(1.5)}
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, params, step=17, meta={"seed": 9})
    raw = open(path, "rb").read()
    assert raw[:8] == CHECKPOINT_MAGIC
    assert struct.unpack_from("<IQ", raw, 8) == (1, 17)

    loaded, step, meta = load_checkpoint(path)
    assert step == 17 and meta == {"seed": 9}
    assert set(loaded) == set(params)
    for k, v in params.items():
        assert loaded[k].shape == v.shape
        assert np.array_equal(loaded[k], v)


def test_truncated_checkpoint_is_rejected(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), {"w": np.ones((4, 4))})
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(ValidationError, match="truncated"):
        load_checkpoint(str(path))


def test_foreign_file_is_not_a_checkpoint(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"PK\x03\x04 not a checkpoint")
    with pytest.raises(ValidationError, match="bad magic"):
        load_checkpoint(str(path))


def test_jsonl_reports_line_numbers(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"id": 1}\n\n{"id": 2\n')
    with pytest.raises(ValidationError) as e:
        read_jsonl(str(path))
    assert e.value.details["line"] == 3


def test_jsonl_round_trip_and_missing_file(tmp_path):
    path = str(tmp_path / "rows.jsonl")
    write_jsonl(path, [{"b": 1, "a": 2}, {"c": [1, 2]}])
    assert read_jsonl(path) == [{"a": 2, "b": 1}, {"c": [1, 2]}]
    with pytest.raises(ValidationError):
        read_jsonl(str(tmp_path / "absent.jsonl"))


def test_write_json_is_sorted_and_refuses_nan(tmp_path):
    path = str(tmp_path / "m.json")
    write_json(path, {"z": 1, "a": None})
    assert list(json.loads(open(path).read())) == ["a", "z"]
    assert read_json(path) == {"a": None, "z": 1}
    with pytest.raises(ValueError):
        write_json(path, {"x": float("nan")})


def test_csv_floats_keep_full_precision(tmp_path):
    path = str(tmp_path / "curve.csv")
    write_csv(path, ["step", "loss"], [[0, 0.1 + 0.2], [1, 1e-17]])
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["step", "loss"]
    assert float(rows[1][1]) == 0.1 + 0.2
    assert float(rows[2][1]) == 1e-17


def test_read_lines_skips_blanks(tmp_path):
    path = tmp_path / "train.txt"
    path.write_text("a\n\n b \nc\n")
    assert read_lines(str(path)) == ["a", "b", "c"]


def test_ensure_dir_fails_on_a_file(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(FatalIOError):
        ensure_dir(str(blocker / "sub"))
