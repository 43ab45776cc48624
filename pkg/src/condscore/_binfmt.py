"""Header-plus-arrays container shared by checkpoints and datasets.

Layout::

    CONDSCORE <kind> 1\n
    <compact JSON header, sorted keys>\n
    <array 0 as little-endian float64> <array 1> ...

The header lists each array's name and length.  Writing what was read yields
the same bytes.
"""

from __future__ import annotations

import json
import numpy as np

from .errors import ConfigError

_LE_F8 = np.dtype("<f8")


def dump_bytes(kind: str, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    header = dict(header)
    header["arrays"] = [{"name": k, "shape": list(np.shape(a))} for k, a in arrays.items()]
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False)
    if "\n" in text:
        raise ConfigError("header must serialize to a single line")
    parts = [f"CONDSCORE {kind} 1\n".encode(), text.encode("utf-8"), b"\n"]
    for a in arrays.values():
        parts.append(np.ascontiguousarray(a, dtype=_LE_F8).tobytes())
    return b"".join(parts)


def load_bytes(kind: str, data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    magic, rest = data.split(b"\n", 1)
    if magic != f"CONDSCORE {kind} 1".encode():
        raise ConfigError(f"not a {kind} file (magic {magic[:40]!r})")
    text, body = rest.split(b"\n", 1)
    header = json.loads(text.decode("utf-8"))
    arrays = {}
    offset = 0
    for entry in header.pop("arrays"):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        a = np.frombuffer(body, dtype=_LE_F8, count=count, offset=offset)
        arrays[entry["name"]] = a.astype(np.float64).reshape(shape)
        offset += count * 8
    if offset != len(body):
        raise ConfigError(f"{len(body) - offset} trailing bytes in {kind} file")
    return header, arrays
