import numpy as np
import pytest

from membrane_lab.io import REPORT_COLUMNS, csv_text, format_value, read_array_file, write_array_file


class TestArrayFile:
    def test_roundtrip(self, tmp_path):
        arr = np.random.default_rng(0).standard_normal((3, 4, 5))
        path = tmp_path / "x.mlarray"
        write_array_file(path, arr, {"d": 2, "L": 4, "potential": "quadratic(c=1.0)"})
        header, back = read_array_file(path)
        np.testing.assert_array_equal(back, arr)
        assert header["shape"] == [3, 4, 5] and header["L"] == 4

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"not an array file")
        with pytest.raises(ValueError):
            read_array_file(path)


def test_csv_is_deterministic():
    rows = [{"check_name": "a", "d": 2, "L": 4, "value": 0.1 + 0.2, "se": 0.0,
             "reference": None, "gap": None, "flag": False}]
    text = csv_text(rows, REPORT_COLUMNS)
    assert text == csv_text(rows, REPORT_COLUMNS)
    assert text.splitlines()[1] == "a,2,4,0.30000000000000004,0.0,,,0"
    assert format_value((1, -2)) == "1 -2"
