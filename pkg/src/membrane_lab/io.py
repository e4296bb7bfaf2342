"""Binary array files and text report output.

Array files hold an 8-byte magic string, a little-endian ``uint32`` format
version, a ``uint32`` header length, a UTF-8 JSON header and then the array
as row-major little-endian float64.
"""

from __future__ import annotations

import csv
import io as _io
import json
import struct

import numpy as np

MAGIC = b"MLARRAY\0"
FORMAT_VERSION = 1

REPORT_COLUMNS = ("check_name", "d", "L", "value", "se", "reference", "gap", "flag")


def write_array_file(path, arr: np.ndarray, header: dict) -> None:
    """Write ``arr`` with a JSON ``header`` (its shape is added)."""
    arr = np.ascontiguousarray(arr, dtype="<f8")
    meta = dict(header, shape=list(arr.shape))
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(arr.tobytes(order="C"))


def read_array_file(path):
    """Read a file written by :func:`write_array_file`.

    Returns
    -------
    header : dict
    arr : ndarray
    """
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a membrane_lab array file")
        version, n = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported array file version {version}")
        header = json.loads(fh.read(n))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return header, data.reshape(header["shape"]).copy()


def format_value(x) -> str:
    """Deterministic text form of a CSV cell (``repr`` for floats)."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (tuple, list)):
        return " ".join(format_value(v) for v in x)
    return "" if x is None else str(x)


def csv_text(rows, columns) -> str:
    """Render rows (dicts) as CSV text with ``\\n`` line endings."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([format_value(row.get(c)) for c in columns])
    return buf.getvalue()
