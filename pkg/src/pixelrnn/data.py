"""Dataset ingestion and preprocessing.

Readers validate every byte they consume and raise :class:`FormatError`
with the offending byte offset instead of returning partial data.
"""

import gzip
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, FormatError

IDX_U8_3D = b"\x00\x00\x08\x03"
GZIP_MAGIC = b"\x1f\x8b"
RAW_MAGIC = b"PXRAW1"
MAX_IDX_EXTENT = 1 << 20


@dataclass(frozen=True)
class Dataset:
    """Integer images ``N x C x n x n`` (u8) with their value range and split tag."""

    images: np.ndarray
    levels: int = 256
    split: str = "all"

    def __post_init__(self):
        imgs = self.images
        if imgs.ndim != 4 or imgs.shape[2] != imgs.shape[3]:
            raise DataError(f"images must be N x C x n x n, got shape {imgs.shape}")
        if imgs.shape[1] not in (1, 3):
            raise DataError(f"channel count must be 1 or 3, got {imgs.shape[1]}")
        if self.levels not in (2, 256):
            raise DataError(f"levels must be 2 or 256, got {self.levels}")
        if imgs.size and int(imgs.max()) >= self.levels:
            raise DataError(f"pixel value {int(imgs.max())} exceeds the declared range [0, {self.levels - 1}]")

    @property
    def channels(self):
        return self.images.shape[1]

    @property
    def side(self):
        return self.images.shape[2]

    @property
    def dims(self):
        return self.channels * self.side * self.side

    def __len__(self):
        return self.images.shape[0]

    def take(self, count):
        if count > len(self):
            raise ConfigurationError(f"requested {count} images but only {len(self)} are available")
        return replace(self, images=self.images[:count])


def as_images(data):
    return data.images if isinstance(data, Dataset) else np.asarray(data)


# ---------------------------------------------------------------------------
# IDX


def _maybe_gunzip(buf):
    if buf[:2] != GZIP_MAGIC:
        return buf
    try:
        return gzip.decompress(buf)
    except (OSError, EOFError, zlib.error) as exc:
        raise FormatError(f"corrupt gzip stream: {exc}", offset=0) from None


def parse_idx(buf):
    """Decode an IDX u8 3-D tensor from bytes (optionally gzip-compressed)."""
    buf = _maybe_gunzip(bytes(buf))
    if len(buf) < 4:
        raise FormatError(f"truncated header: need 4 magic bytes, have {len(buf)}", offset=len(buf))
    if buf[:4] != IDX_U8_3D:
        raise FormatError(f"bad IDX magic {buf[:4].hex()}; only u8 3-D tensors (00000803) are accepted", offset=0)
    if len(buf) < 16:
        raise FormatError(f"truncated header: need 16 bytes, have {len(buf)}", offset=len(buf))
    count, rows, cols = struct.unpack(">III", buf[4:16])
    for i, extent in enumerate((count, rows, cols)):
        if extent > MAX_IDX_EXTENT:
            raise FormatError(f"implausible extent {extent}", offset=4 + 4 * i)
    expected = count * rows * cols
    actual = len(buf) - 16
    if actual != expected:
        raise FormatError(
            f"payload size mismatch: expected {expected} bytes for {count}x{rows}x{cols}, found {actual}",
            offset=16 + min(actual, expected),
        )
    return np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(count, rows, cols).copy()


def load_idx(path):
    """Read an IDX image file into a single-channel :class:`Dataset`."""
    images = parse_idx(Path(path).read_bytes())
    if images.shape[1] != images.shape[2]:
        raise DataError(f"images must be square, got {images.shape[1]}x{images.shape[2]}")
    return Dataset(images[:, None])


def encode_idx(images):
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise DataError("IDX images must be a u8 array of shape N x rows x cols")
    return IDX_U8_3D + struct.pack(">III", *images.shape) + images.tobytes()


def write_idx(path, images):
    """Write ``N x rows x cols`` u8 images; a ``.gz`` suffix compresses the output."""
    buf = encode_idx(images)
    if str(path).endswith(".gz"):
        buf = gzip.compress(buf, mtime=0)
    Path(path).write_bytes(buf)


# ---------------------------------------------------------------------------
# raw u8 dumps


def encode_raw(images):
    """``PXRAW1`` magic, little-endian u32 count, channels, side, then u8 pixels in C order."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[2] != images.shape[3] or images.shape[1] not in (1, 3):
        raise DataError(f"raw dumps hold N x C x n x n images, got shape {images.shape}")
    if images.size and (images.min() < 0 or images.max() > 255):
        raise DataError("raw dumps hold values in [0, 255]")
    return RAW_MAGIC + struct.pack("<III", *images.shape[:3]) + images.astype(np.uint8).tobytes()


def parse_raw(buf):
    buf = bytes(buf)
    head = len(RAW_MAGIC) + 12
    if buf[:len(RAW_MAGIC)] != RAW_MAGIC:
        raise FormatError("bad raw dump magic", offset=0)
    if len(buf) < head:
        raise FormatError(f"truncated header: need {head} bytes, have {len(buf)}", offset=len(buf))
    count, channels, side = struct.unpack("<III", buf[len(RAW_MAGIC):head])
    if channels not in (1, 3):
        raise FormatError(f"channel count must be 1 or 3, got {channels}", offset=len(RAW_MAGIC) + 4)
    if count > MAX_IDX_EXTENT or side > MAX_IDX_EXTENT:
        raise FormatError("implausible extent", offset=len(RAW_MAGIC))
    expected = count * channels * side * side
    actual = len(buf) - head
    if actual != expected:
        raise FormatError(f"payload size mismatch: expected {expected} bytes, found {actual}",
                          offset=head + min(actual, expected))
    return np.frombuffer(buf, dtype=np.uint8, offset=head).reshape(count, channels, side, side).copy()


def write_raw(path, images):
    Path(path).write_bytes(encode_raw(images))


def load_raw(path):
    return parse_raw(Path(path).read_bytes())


def load_images(path, levels=256):
    """Load an IDX or raw dump into a :class:`Dataset`, choosing the reader by magic bytes."""
    buf = Path(path).read_bytes()
    if buf.startswith(RAW_MAGIC):
        return Dataset(parse_raw(buf), levels=levels)
    images = parse_idx(buf)
    if images.shape[1] != images.shape[2]:
        raise DataError(f"images must be square, got {images.shape[1]}x{images.shape[2]}")
    return Dataset(images[:, None], levels=levels)


# ---------------------------------------------------------------------------
# preprocessing


def binarize(data, mode="stochastic", seed=0):
    """Map intensities to {0, 1}.

    ``stochastic`` draws each pixel once from Bernoulli(intensity/255) with a
    fixed seed; ``threshold`` keeps intensities of at least 128.
    """
    images = as_images(data)
    if mode == "stochastic":
        rng = np.random.default_rng(seed)
        out = (rng.random(images.shape) < images / 255.0).astype(np.uint8)
    elif mode == "threshold":
        out = (images >= 128).astype(np.uint8)
    else:
        raise ConfigurationError(f"binarize mode must be 'stochastic' or 'threshold', got {mode!r}")
    if isinstance(data, Dataset):
        return replace(data, images=out, levels=2)
    return out


def preprocess(images, levels=256):
    """Integer levels to network input: ``(v / (levels - 1) - 0.5) * 2``."""
    return (np.asarray(images, dtype=np.float64) / (levels - 1) - 0.5) * 2.0


def deprocess(x, levels=256):
    """Inverse of :func:`preprocess` on the integer grid."""
    return np.rint((np.asarray(x) / 2.0 + 0.5) * (levels - 1)).astype(np.int64)


def subsample(data, factor):
    """Top-left point sampling with stride ``factor`` over the last two axes."""
    images = as_images(data)
    n = images.shape[-1]
    if factor < 1 or n % factor:
        raise ConfigurationError(f"subsample factor {factor} does not divide side {n}")
    out = images[..., ::factor, ::factor]
    if isinstance(data, Dataset):
        return replace(data, images=np.ascontiguousarray(out))
    return out


def crop(data, side):
    """Centre crop to ``side x side``; odd margins drop the extra row and column at the bottom right."""
    images = as_images(data)
    n = images.shape[-1]
    if not 1 <= side <= n:
        raise ConfigurationError(f"crop side {side} must lie in [1, {n}]")
    lo = (n - side) // 2
    out = images[..., lo:lo + side, lo:lo + side]
    if isinstance(data, Dataset):
        return replace(data, images=np.ascontiguousarray(out))
    return out


def split(data, validation, seed=0):
    """Deterministic train/validation split; ``validation`` is a count or a fraction."""
    total = len(data)
    count = int(round(validation * total)) if isinstance(validation, float) else int(validation)
    if not 0 < count < total:
        raise ConfigurationError(f"validation size {count} must be between 1 and {total - 1}")
    order = np.random.default_rng(seed).permutation(total)
    val_idx, train_idx = np.sort(order[:count]), np.sort(order[count:])
    return (replace(data, images=data.images[train_idx], split="train"),
            replace(data, images=data.images[val_idx], split="validation"))


# ---------------------------------------------------------------------------
# config files


def parse_config(text, source="<config>"):
    """``key = value`` lines; ``#`` starts a comment; blank lines are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        if key in out:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))
