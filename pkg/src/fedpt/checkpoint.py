"""Model checkpoint files.

Layout::

    FEDPT-CHECKPOINT
    format_version: 1
    <key>: <value>          config fields, seed, free-form metadata
    arrays: name:shape,...  every tensor in ModelConfig.param_shapes() order
    data_bytes: <n>
    <empty line>
    <n bytes: the arrays back to back, row-major little-endian float64>

Shapes are written as ``AxB``; the header is UTF-8 text.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import ModelConfig, ModelParams

MAGIC = "FEDPT-CHECKPOINT"
FORMAT_VERSION = 1


def dumps(params: ModelParams, seed: int | None = None, meta: Mapping[str, object] | None = None
          ) -> bytes:
    cfg = params.config
    shapes = cfg.param_shapes()
    lines = [MAGIC, f"format_version: {FORMAT_VERSION}"]
    lines += [f"{k}: {v}" for k, v in cfg.to_dict().items()]
    lines.append(f"seed: {'' if seed is None else seed}")
    for k, v in (meta or {}).items():
        if "\n" in f"{k}{v}" or ":" in str(k):
            raise FormatError(f"metadata entry {k!r} cannot be written to a header line")
        lines.append(f"meta.{k}: {v}")
    lines.append("arrays: " + ",".join(f"{n}:{'x'.join(map(str, s))}" for n, s in shapes.items()))
    body = b"".join(np.ascontiguousarray(params.arrays[n], dtype="<f8").tobytes() for n in shapes)
    lines.append(f"data_bytes: {len(body)}")
    return ("\n".join(lines) + "\n\n").encode("utf-8") + body


def loads(data: bytes) -> tuple[ModelParams, dict[str, str]]:
    """Parse a checkpoint; returns the params and the raw header fields."""
    end = data.find(b"\n\n")
    if end < 0:
        raise FormatError("checkpoint header is not terminated")
    try:
        lines = data[:end].decode("utf-8").split("\n")
    except UnicodeDecodeError:
        raise FormatError("checkpoint header is not UTF-8") from None
    if lines[0] != MAGIC:
        raise FormatError("not a checkpoint file")
    header = {}
    for line in lines[1:]:
        key, sep, value = line.partition(": ")
        if not sep:
            raise FormatError(f"malformed header line {line!r}")
        header[key] = value
    if header.get("format_version") != str(FORMAT_VERSION):
        raise FormatError(f"unsupported checkpoint version {header.get('format_version')}")
    try:
        cfg = ModelConfig.from_dict(header)
        nbytes = int(header["data_bytes"])
        listed = [item.split(":") for item in header["arrays"].split(",")]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from None
    shapes = cfg.param_shapes()
    if [n for n, _ in listed] != list(shapes) or any(
            tuple(int(x) for x in s.split("x")) != shapes[n] for n, s in listed):
        raise FormatError("array list does not match the configured architecture")
    body = data[end + 2:]
    expected = 8 * sum(math.prod(s) for s in shapes.values())
    if nbytes != expected or len(body) != expected:
        raise FormatError(f"expected {expected} data bytes, header says {nbytes}, got {len(body)}")
    flat = np.frombuffer(body, dtype="<f8")
    arrays, pos = {}, 0
    for n, s in shapes.items():
        size = math.prod(s)
        arrays[n] = flat[pos:pos + size].reshape(s).astype(np.float64)
        pos += size
    return ModelParams(cfg, arrays), header


def save(params: ModelParams, path: str | Path, seed: int | None = None,
         meta: Mapping[str, object] | None = None) -> None:
    Path(path).write_bytes(dumps(params, seed, meta))


def load(path: str | Path) -> ModelParams:
    return loads(Path(path).read_bytes())[0]
