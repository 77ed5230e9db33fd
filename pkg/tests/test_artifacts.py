import csv
import json

import numpy as np
import pytest

from coupling_lab.artifacts import ensure_directory, write_csv, write_json
from coupling_lab.errors import ConfigError


class TestWriteCsv:
    def test_header_and_float_precision(self, tmp_path):
        path = write_csv(tmp_path / "nested" / "table.csv", ("r", "f"), [(0, 0.1), (1, np.float64(1 / 3))])
        with path.open() as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["r", "f"]
        assert rows[1] == ["0", "0.1"]
        assert float(rows[2][1]) == 1 / 3


class TestWriteJson:
    def test_plain_values(self, tmp_path):
        payload = {"b": np.float64(0.5), "a": np.arange(3), "bad": float("inf"), "gap": np.nan}
        path = write_json(tmp_path / "report.json", payload)
        text = path.read_text()
        document = json.loads(text)
        assert document == {"schema_version": 1, "a": [0, 1, 2], "b": 0.5, "bad": "inf", "gap": "nan"}
        assert text.index('"a"') < text.index('"b"')

    def test_repeatable(self, tmp_path):
        payload = {"x": [0.1, 0.2], "nested": {"z": 1, "y": (2, 3)}}
        first = write_json(tmp_path / "a.json", payload).read_bytes()
        assert first == write_json(tmp_path / "b.json", payload).read_bytes()


class TestEnsureDirectory:
    def test_creates_parents(self, tmp_path):
        out = ensure_directory(tmp_path / "x" / "y")
        assert out.is_dir()

    def test_file_in_the_way(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        with pytest.raises(ConfigError, match="not writable"):
            ensure_directory(blocker / "sub")
