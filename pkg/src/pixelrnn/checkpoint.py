"""PXSQ1 parameter checkpoints.

Layout (all integers u64 little-endian, floats f64 little-endian)::

    b"PXSQ1"
    header_len, header bytes        # UTF-8 "key=value" lines, may be empty
    repeated until EOF:
        name_len, name bytes (UTF-8)
        rank, extents[rank]
        data[prod(extents)]

Round trips are bit exact.
"""

import struct
from collections import OrderedDict

import numpy as np

from .errors import ConfigurationError, FormatError

MAGIC = b"PXSQ1"
_U64 = struct.Struct("<Q")
_MAX_RANK = 8
_MAX_NAME = 4096


def encode(params, header=None):
    """Serialize ``params`` (mapping name -> array, or iterable of Parameters) to bytes."""
    if not hasattr(params, "items"):
        params = OrderedDict((p.name, p.data) for p in params)
    for k, v in (header or {}).items():
        if not k or "=" in k or "\n" in k or "\n" in str(v):
            raise ConfigurationError(f"header entry {k!r}={v!r} cannot be stored as a key=value line")
    out = bytearray(MAGIC)
    head = "".join(f"{k}={v}\n" for k, v in (header or {}).items()).encode("utf-8")
    out += _U64.pack(len(head)) + head
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        out += _U64.pack(len(raw_name)) + raw_name
        out += _U64.pack(arr.ndim)
        for n in arr.shape:
            out += _U64.pack(n)
        out += arr.tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if n > len(self.buf) - self.pos:
            raise FormatError(
                f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left", self.pos
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u64(self, what):
        return _U64.unpack(self.take(8, what))[0]


def decode(buf):
    """Parse bytes produced by :func:`encode`; returns ``(header, params)``."""
    r = _Reader(bytes(buf))
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    head_len = r.u64("header length")
    try:
        text = r.take(head_len, "header").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"header is not UTF-8: {exc}", r.pos) from None
    header = OrderedDict()
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if not sep or not key:
            raise FormatError(f"malformed header line {line!r}", r.pos)
        header[key] = value
    params = OrderedDict()
    while r.pos < len(r.buf):
        start = r.pos
        name_len = r.u64("name length")
        if name_len == 0 or name_len > _MAX_NAME:
            raise FormatError(f"implausible name length {name_len}", start)
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("parameter name is not UTF-8", start) from None
        rank = r.u64("rank")
        if rank > _MAX_RANK:
            raise FormatError(f"implausible rank {rank}", r.pos - 8)
        shape = tuple(r.u64("extent") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.float64)) if shape else 1
        if count * 8 > len(r.buf) - r.pos:
            raise FormatError(
                f"truncated data for {name!r}: need {count * 8} bytes, {len(r.buf) - r.pos} left", r.pos
            )
        data = np.frombuffer(r.take(count * 8, "data"), dtype="<f8").astype(np.float64).reshape(shape)
        if name in params:
            raise FormatError(f"duplicate parameter {name!r}", start)
        params[name] = data
    return header, params


def save(path, params, header=None):
    with open(path, "wb") as fh:
        fh.write(encode(params, header))


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
