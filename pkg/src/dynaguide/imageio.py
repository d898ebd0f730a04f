"""Netpbm (PPM P6, PGM P5/P2) codecs, PNG loading and label-map rendering."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .exceptions import (ImageFormatError, MalformedHeaderError, TruncatedDataError,
                         UnsupportedDepthError)
from .validation import check_image, check_label_map

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def atomic_write(path: str | Path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_header(blob: bytes, path) -> tuple[bytes, list[int], int]:
    """Return (magic, [width, height, maxval], payload offset)."""
    if len(blob) < 2:
        raise MalformedHeaderError(f"{path}: file too short for a Netpbm header")
    magic = blob[:2]
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise MalformedHeaderError(f"{path}: malformed header near byte {start}")
        fields.append(int(blob[start:pos]))
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise MalformedHeaderError(f"{path}: header must end with a single whitespace byte")
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise MalformedHeaderError(f"{path}: non-positive dimensions {width}x{height}")
    return magic, fields, pos + 1


def _binary_payload(blob: bytes, offset: int, count: int, maxval: int, path) -> np.ndarray:
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = count * dtype.itemsize
    if len(blob) - offset < need:
        raise TruncatedDataError(
            f"{path}: payload truncated: expected {need} bytes, found {len(blob) - offset}")
    return np.frombuffer(blob, dtype=dtype, count=count, offset=offset).astype(np.int64)


def decode_ppm(blob: bytes, path="<bytes>") -> np.ndarray:
    magic, (w, h, maxval), offset = _parse_header(blob, path)
    if magic != b"P6":
        raise MalformedHeaderError(f"{path}: expected PPM magic P6, got {magic!r}")
    if maxval != 255:
        raise UnsupportedDepthError(f"{path}: only 8-bit PPM (maxval 255) is supported, got {maxval}")
    pixels = _binary_payload(blob, offset, w * h * 3, maxval, path)
    return (pixels.reshape(h, w, 3).transpose(2, 0, 1) / 255.0).astype(np.float64)


def encode_ppm(image) -> bytes:
    arr = check_image(image)
    _, h, w = arr.shape
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode() + q.transpose(1, 2, 0).tobytes()


def _decode_png_rgb(path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("RGB", "RGBA", "P", "L"):
                raise UnsupportedDepthError(f"{path}: unsupported PNG mode {im.mode}")
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    except UnsupportedDepthError:
        raise
    except OSError as exc:
        if "truncated" in str(exc).lower():
            raise TruncatedDataError(f"{path}: {exc}") from None
        raise ImageFormatError(f"{path}: cannot decode PNG: {exc}") from None
    return rgb.transpose(2, 0, 1) / 255.0


def load_image(path: str | Path) -> np.ndarray:
    """Read a PPM (P6, 8-bit) or PNG file as a ``[3, H, W]`` float array in [0, 1]."""
    blob = Path(path).read_bytes()
    if blob.startswith(PNG_SIGNATURE):
        return _decode_png_rgb(path)
    return decode_ppm(blob, path)


def save_image(image, path: str | Path) -> None:
    atomic_write(path, encode_ppm(image))


def decode_pgm(blob: bytes, path="<bytes>") -> np.ndarray:
    magic, (w, h, maxval), offset = _parse_header(blob, path)
    if magic not in (b"P5", b"P2"):
        raise MalformedHeaderError(f"{path}: expected PGM magic P5 or P2, got {magic!r}")
    if maxval == 0 or maxval > 65535:
        raise UnsupportedDepthError(f"{path}: PGM maxval must be in [1, 65535], got {maxval}")
    if magic == b"P5":
        values = _binary_payload(blob, offset, w * h, maxval, path)
    else:
        tokens = blob[offset:].split()
        if len(tokens) < w * h:
            raise TruncatedDataError(f"{path}: expected {w * h} samples, found {len(tokens)}")
        try:
            values = np.array([int(t) for t in tokens[:w * h]], dtype=np.int64)
        except ValueError:
            raise MalformedHeaderError(f"{path}: non-integer sample in P2 payload") from None
    if values.size and values.max() > maxval:
        raise ImageFormatError(f"{path}: sample exceeds maxval {maxval}")
    return values.reshape(h, w).astype(np.intp)


def encode_pgm(labels) -> bytes:
    arr = check_label_map(labels)
    top = int(arr.max())
    if top > 65535:
        raise ImageFormatError(f"label id {top} exceeds the 16-bit PGM range")
    maxval = max(top, 1)
    h, w = arr.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode()
    dtype = ">u2" if maxval > 255 else "u1"
    return header + arr.astype(dtype).tobytes()


def load_labels(path: str | Path) -> np.ndarray:
    """Read a PGM label map; pixel value is the label id."""
    return decode_pgm(Path(path).read_bytes(), path)


def save_labels(labels, path: str | Path) -> None:
    atomic_write(path, encode_pgm(labels))


def palette() -> np.ndarray:
    """Fixed 256-entry RGB palette (label 0 black, then a bit-interleaved sequence)."""
    pal = np.zeros((256, 3), dtype=np.uint8)
    for i in range(256):
        c, r, g, b = i, 0, 0, 0
        for shift in range(8):
            r |= ((c >> 0) & 1) << (7 - shift)
            g |= ((c >> 1) & 1) << (7 - shift)
            b |= ((c >> 2) & 1) << (7 - shift)
            c >>= 3
        pal[i] = (r, g, b)
    return pal


def render_labels(labels) -> np.ndarray:
    """Colour a label map as an ``[H, W, 3]`` uint8 image (ids taken modulo 256)."""
    arr = check_label_map(labels)
    return palette()[arr % 256]


def save_label_png(labels, path: str | Path) -> None:
    import io

    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(render_labels(labels)).save(buf, format="PNG")
    atomic_write(path, buf.getvalue())
