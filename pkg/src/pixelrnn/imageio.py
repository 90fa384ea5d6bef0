"""Binary PGM (P5) and PPM (P6) images with maxval 255."""

import re
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

_TOKEN = re.compile(rb"\s*((?:#[^\n]*\n\s*)*)(\S+)")


def encode_pnm(image, levels=256):
    """Encode one ``C x n x m`` integer image; ``levels=2`` scales {0,1} to {0,255}."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise DataError(f"expected a 1- or 3-channel image, got shape {image.shape}")
    if image.size and (image.min() < 0 or image.max() >= levels):
        raise DataError(f"pixel values must lie in [0, {levels - 1}]")
    pixels = (image.astype(np.int64) * (255 // (levels - 1))).astype(np.uint8)
    C, H, W = pixels.shape
    magic = b"P5" if C == 1 else b"P6"
    return magic + f"\n{W} {H}\n255\n".encode() + np.moveaxis(pixels, 0, -1).tobytes()


def decode_pnm(buf):
    """Decode P5/P6 bytes into a ``C x H x W`` u8 array."""
    buf = bytes(buf)
    if buf[:2] not in (b"P5", b"P6"):
        raise FormatError("expected P5 or P6 magic", offset=0)
    channels = 1 if buf[:2] == b"P5" else 3
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        if pos >= len(buf) or not buf[pos:pos + 1].isspace():
            raise FormatError(f"expected whitespace before {name}", offset=pos)
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise FormatError(f"missing {name}", offset=pos)
        token = m.group(2)
        if not token.isdigit() or len(token) > 7:
            raise FormatError(f"invalid {name} {token[:16]!r}", offset=m.start(2))
        values.append(int(token))
        pos = m.end(2)
    width, height, maxval = values
    if width < 1 or height < 1:
        raise FormatError(f"image extents must be positive, got {width}x{height}", offset=2)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", offset=pos - len(str(maxval)))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("expected a single whitespace byte after maxval", offset=pos)
    pos += 1
    expected = width * height * channels
    actual = len(buf) - pos
    if actual != expected:
        raise FormatError(f"payload size mismatch: expected {expected} bytes, found {actual}",
                          offset=pos + min(actual, expected))
    pixels = np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(height, width, channels)
    return np.ascontiguousarray(np.moveaxis(pixels, -1, 0))


def write_pnm(path, image, levels=256):
    Path(path).write_bytes(encode_pnm(image, levels))


def read_pnm(path):
    return decode_pnm(Path(path).read_bytes())


def write_images(directory, images, prefix="sample", levels=256):
    """Write a batch as ``prefix_000.pgm`` (or ``.ppm``) files; returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = np.asarray(images)
    ext = "pgm" if images.shape[1] == 1 else "ppm"
    paths = []
    for i, img in enumerate(images):
        path = directory / f"{prefix}_{i:03d}.{ext}"
        write_pnm(path, img, levels)
        paths.append(path)
    return paths
