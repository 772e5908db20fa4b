"""Deterministic artifact I/O: JSON, JSONL with headers, and npz archives.

Re-running a stage with unchanged inputs must reproduce its outputs byte
for byte, so every writer here sorts keys and pins zip timestamps.
"""

from __future__ import annotations

import io
import json
import zipfile
from typing import Iterable, Iterator

import numpy as np

from .errors import DataError

_EPOCH = (1980, 1, 1, 0, 0, 0)  # zip format's earliest representable time


def json_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json_dumps(obj))
        fh.write("\n")


def read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_jsonl(path, rows: Iterable[dict], header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json_dumps({"__header__": header}) + "\n")
        for row in rows:
            fh.write(json_dumps(row) + "\n")


def read_jsonl(path) -> tuple[dict | None, list[dict]]:
    """Returns (header or None, rows); malformed lines carry their number."""
    header = None
    rows: list[dict] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if "__header__" in obj:
                if lineno == 1:
                    header = obj["__header__"]
                continue
            rows.append(obj)
    return header, rows


def save_npz(path, arrays: dict[str, np.ndarray]) -> None:
    """np.load-compatible archive with pinned timestamps and sorted members."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]))
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            zf.writestr(info, buf.getvalue())


def load_npz(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with np.load(path) as blob:
        for name in blob.files:
            out[name] = blob[name]
    return out
