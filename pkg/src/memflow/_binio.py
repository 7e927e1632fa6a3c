"""Shared container layout for the MFT1 / MFD1 / MFC1 files.

Every file is::

    <MAGIC>\\n
    <one-line JSON header>\\n
    <raw little-endian float64 payload>

The header always carries ``payload_count`` (number of float64 values) and
``tool_version``. Writers go through a temp file and ``os.replace`` so a
reader never sees a half-written file.
"""

import json
import os
import tempfile

import numpy as np

from memflow import __version__
from memflow.errors import FormatError, IntegrityError

_LE_F64 = np.dtype("<f8")


def write_container(path, magic, header, arrays):
    flat = [np.ascontiguousarray(a, dtype=_LE_F64).ravel() for a in arrays]
    payload = np.concatenate(flat) if flat else np.empty(0, dtype=_LE_F64)
    header = dict(header)
    header["payload_count"] = int(payload.size)
    header["tool_version"] = __version__
    head = json.dumps(header, sort_keys=True, separators=(",", ":"))
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(magic.encode("ascii") + b"\n")
            fh.write(head.encode("utf-8") + b"\n")
            fh.write(payload.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path, magic):
    """Return ``(header, payload)`` after validating magic and payload size."""
    with open(path, "rb") as fh:
        raw = fh.read()
    first = raw.find(b"\n")
    if first < 0 or raw[:first] != magic.encode("ascii"):
        found = raw[: max(first, 0)][:16]
        raise FormatError(f"{path}: expected format {magic}, found magic {found!r}")
    second = raw.find(b"\n", first + 1)
    if second < 0:
        raise IntegrityError(f"{path}: header line is not terminated")
    try:
        header = json.loads(raw[first + 1 : second].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: unreadable header ({exc})") from None
    body = raw[second + 1 :]
    expected = int(header.get("payload_count", -1))
    if expected < 0 or len(body) != expected * _LE_F64.itemsize:
        raise IntegrityError(
            f"{path}: header declares {expected} float64 values but payload "
            f"holds {len(body)} bytes"
        )
    return header, np.frombuffer(body, dtype=_LE_F64).astype(np.float64)


def split_payload(payload, shapes):
    """Cut a flat payload into arrays of the given shapes, in order."""
    sizes = [int(np.prod(shape, dtype=np.int64)) for shape in shapes]
    if sum(sizes) != payload.size:
        raise IntegrityError(
            f"payload holds {payload.size} values but header shapes need {sum(sizes)}"
        )
    out = []
    offset = 0
    for shape, size in zip(shapes, sizes):
        out.append(payload[offset : offset + size].reshape(shape).copy())
        offset += size
    return out
