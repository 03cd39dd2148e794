"""Deterministic PNG encoding/decoding and image metrics.

The writer emits stored (uncompressed) deflate blocks it assembles itself,
so the bytes are a pure function of the pixel data: no compressor version
can perturb pinned fixtures or reproducibility checks. The reader handles
any conformant 8-bit grayscale/RGB/RGBA PNG, including filtered rows from
other encoders.
"""
from __future__ import annotations

import struct
import zlib

import numpy as np

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
_COLOR_TYPE = {1: 0, 3: 2, 4: 6}  # channels -> PNG color type
_CHANNELS = {0: 1, 2: 3, 6: 4}


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize a float image in [0, 1] to uint8; uint8 passes through."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def to_float(image: np.ndarray) -> np.ndarray:
    """Map uint8 back to float64 in [0, 1]."""
    return np.asarray(image, dtype=np.float64) / 255.0


def _stored_zlib(data: bytes) -> bytes:
    """Deflate 'stored' encoding: byte-exact for given input, forever."""
    out = [b"\x78\x01"]  # zlib header, 32K window, fastest-level hint
    n = len(data)
    pos = 0
    while True:
        chunk = data[pos:pos + 65535]
        pos += len(chunk)
        final = pos >= n
        out.append(struct.pack("<BHH", 1 if final else 0,
                               len(chunk), ~len(chunk) & 0xFFFF))
        out.append(chunk)
        if final:
            break
    out.append(struct.pack(">I", zlib.adler32(data)))
    return b"".join(out)


def _chunk(kind: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + kind + payload
            + struct.pack(">I", zlib.crc32(kind + payload)))


def png_bytes(image: np.ndarray) -> bytes:
    """Encode [H, W], [H, W, 3], or [H, W, 4] pixels as PNG bytes."""
    pixels = to_uint8(image)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    if pixels.ndim != 3 or pixels.shape[2] not in _COLOR_TYPE:
        raise ValueError("image must be [H, W], [H, W, 3], or [H, W, 4]")
    h, w, c = pixels.shape
    if h == 0 or w == 0:
        raise ValueError("image must be non-empty")
    ihdr = struct.pack(">IIBBBBB", w, h, 8, _COLOR_TYPE[c], 0, 0, 0)
    rows = np.concatenate([np.zeros((h, 1), dtype=np.uint8),  # filter 0
                           pixels.reshape(h, w * c)], axis=1)
    return (_PNG_MAGIC + _chunk(b"IHDR", ihdr)
            + _chunk(b"IDAT", _stored_zlib(rows.tobytes()))
            + _chunk(b"IEND", b""))


def save_png(path, image: np.ndarray) -> None:
    """Write an image to ``path`` as a deterministic PNG."""
    with open(path, "wb") as f:
        f.write(png_bytes(image))


def _paeth(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    pa = np.abs(b.astype(np.int32) - c)
    pb = np.abs(a.astype(np.int32) - c)
    pc = np.abs(a.astype(np.int32) + b - 2 * c.astype(np.int32))
    return np.where((pa <= pb) & (pa <= pc), a, np.where(pb <= pc, b, c))


def _unfilter(raw: bytes, h: int, w: int, c: int) -> np.ndarray:
    stride = w * c
    data = np.frombuffer(raw, dtype=np.uint8).reshape(h, stride + 1)
    out = np.zeros((h, stride), dtype=np.uint8)
    zero = np.zeros(c, dtype=np.uint8)
    for y in range(h):
        kind = int(data[y, 0])
        row = data[y, 1:].astype(np.int32)
        up = out[y - 1] if y > 0 else np.zeros(stride, dtype=np.uint8)
        if kind == 0:
            out[y] = row
        elif kind == 2:  # Up
            out[y] = (row + up) & 0xFF
        elif kind in (1, 3, 4):  # Sub / Average / Paeth need a left scan
            prev = zero.copy()
            for x in range(0, stride, c):
                left = prev
                if kind == 1:
                    rec = row[x:x + c] + left
                elif kind == 3:
                    rec = row[x:x + c] + ((left.astype(np.int32) + up[x:x + c]) >> 1)
                else:
                    upleft = out[y - 1, x - c:x] if (y > 0 and x >= c) else zero
                    rec = row[x:x + c] + _paeth(left, up[x:x + c], upleft)
                prev = (rec & 0xFF).astype(np.uint8)
                out[y, x:x + c] = prev
        else:
            raise ValueError(f"unsupported PNG row filter {kind}")
    return out.reshape(h, w, c)


def decode_png(blob: bytes) -> np.ndarray:
    """Decode 8-bit grayscale/RGB/RGBA PNG bytes to uint8 pixels.

    Grayscale comes back [H, W]; color images [H, W, C].
    """
    if blob[:8] != _PNG_MAGIC:
        raise ValueError("not a PNG file")
    pos = 8
    ihdr = None
    idat = []
    while pos < len(blob):
        (length,) = struct.unpack_from(">I", blob, pos)
        kind = blob[pos + 4:pos + 8]
        payload = blob[pos + 8:pos + 8 + length]
        pos += 12 + length
        if kind == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", payload)
        elif kind == b"IDAT":
            idat.append(payload)
        elif kind == b"IEND":
            break
    if ihdr is None or not idat:
        raise ValueError("missing IHDR or IDAT chunk")
    w, h, depth, color, _, _, interlace = ihdr
    if depth != 8 or color not in _CHANNELS or interlace != 0:
        raise ValueError("only 8-bit non-interlaced grayscale/RGB/RGBA supported")
    c = _CHANNELS[color]
    pixels = _unfilter(zlib.decompress(b"".join(idat)), h, w, c)
    return pixels[:, :, 0] if c == 1 else pixels


def load_png(path) -> np.ndarray:
    """Read a PNG file to uint8 pixels."""
    with open(path, "rb") as f:
        return decode_png(f.read())


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; infinite for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images must share a shape")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))
