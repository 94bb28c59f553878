"""Binary artifact formats.

A tensor blob is one JSON header line {"name": ..., "shape": [...]} followed
by the flat row-major values as little-endian float64. Checkpoints and
dataset files are a JSON manifest line followed by a sequence of named
blobs. Everything is written with sorted keys so identical content produces
identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import FormatError

Array = np.ndarray


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_tensor_blob(fh: BinaryIO, name: str, arr: Array) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    header = dumps_json({"name": name, "shape": list(arr.shape)})
    fh.write(header.encode("utf-8") + b"\n")
    fh.write(arr.astype("<f8").tobytes())


def _read_line(fh: BinaryIO) -> bytes:
    chunks = []
    while True:
        c = fh.read(1)
        if not c:
            if chunks:
                raise FormatError("blob stream: truncated header line")
            return b""
        if c == b"\n":
            return b"".join(chunks)
        chunks.append(c)


def read_tensor_blob(fh: BinaryIO) -> tuple[str, Array] | None:
    """Read one named blob; None at end of stream."""
    line = _read_line(fh)
    if not line:
        return None
    try:
        header = json.loads(line)
        name = header["name"]
        shape = tuple(int(s) for s in header["shape"])
    except (ValueError, KeyError, TypeError) as err:
        raise FormatError(f"blob stream: malformed header: {err}") from None
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise FormatError(f"blob stream: truncated values for tensor {name!r}")
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return name, arr


def write_blob_file(path: str | Path, manifest: dict, tensors: list[tuple[str, Array]]) -> None:
    manifest = dict(manifest)
    manifest["tensors"] = [name for name, _ in tensors]
    with open(path, "wb") as fh:
        fh.write(dumps_json(manifest).encode("utf-8") + b"\n")
        for name, arr in tensors:
            write_tensor_blob(fh, name, arr)


def read_blob_file(path: str | Path) -> tuple[dict, dict[str, Array]]:
    with open(path, "rb") as fh:
        line = _read_line(fh)
        if not line:
            raise FormatError(f"{path}: empty file")
        try:
            manifest = json.loads(line)
        except ValueError as err:
            raise FormatError(f"{path}: malformed manifest line: {err}") from None
        if not isinstance(manifest, dict):
            raise FormatError(f"{path}: manifest is not a JSON object")
        tensors: dict[str, Array] = {}
        while True:
            blob = read_tensor_blob(fh)
            if blob is None:
                break
            tensors[blob[0]] = blob[1]
    expected = manifest.get("tensors")
    if expected is not None and list(tensors.keys()) != list(expected):
        raise FormatError(f"{path}: tensor blobs {list(tensors)} do not match manifest {expected}")
    return manifest, tensors


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
