"""Tensor files: one text header line (``shape=1x1x28x28 dtype=f32``) then raw little-endian data."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParseError
from .graph import DTYPES


def save_tensor(path: str | Path, a: np.ndarray, dtype: str = "f32") -> None:
    a = np.ascontiguousarray(a, dtype=DTYPES[dtype])
    header = f"shape={'x'.join(map(str, a.shape))} dtype={dtype}\n".encode("ascii")
    Path(path).write_bytes(header + a.tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    head, sep, body = data.partition(b"\n")
    if not sep:
        raise ParseError(f"{path}: missing tensor header line")
    try:
        fields = dict(tok.split("=", 1) for tok in head.decode("ascii").split())
        shape = tuple(int(d) for d in fields["shape"].split("x"))
        dtype = DTYPES[fields["dtype"]]
    except (ValueError, KeyError, UnicodeDecodeError):
        raise ParseError(f"{path}: malformed tensor header {head[:80]!r}") from None
    count = int(np.prod(shape))
    if len(body) != count * dtype.itemsize:
        raise ParseError(f"{path}: expected {count * dtype.itemsize} data bytes, got {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(shape).copy()
