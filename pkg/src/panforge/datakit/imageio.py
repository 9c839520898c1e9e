"""Minimal 8-bit PNG and binary PGM (P5) reading and writing.

Supported PNG layouts: bit depth 8, colour type 0 (gray), 2 (RGB), 4
(gray + alpha) and 6 (RGBA), non-interlaced. Alpha is dropped. Everything
is written as 8-bit RGB PNG, or P5 PGM for ``.pgm`` paths.

In memory, images are float32 (3, H, W) arrays in [-1, 1]: a byte p maps to
2p/255 - 1, and saving inverts that with round-half-up and a clamp.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib

import numpy as np

from panforge.errors import ImageFormatError, TruncatedImageError

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_CHANNELS = {0: 1, 2: 3, 4: 2, 6: 4}


def bytes_to_signed(pixels):
    return (pixels.astype(np.float64) * (2.0 / 255.0) - 1.0).astype(np.float32)


def signed_to_bytes(img):
    p = (np.asarray(img, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.floor(p + 0.5), 0, 255).astype(np.uint8)


# -- PNG ----------------------------------------------------------------


def _chunks(data):
    pos = len(PNG_SIGNATURE)
    while pos < len(data):
        if pos + 8 > len(data):
            raise TruncatedImageError("PNG chunk header cut short")
        length, ctype = struct.unpack(">I4s", data[pos:pos + 8])
        end = pos + 12 + length
        if end > len(data):
            raise TruncatedImageError(f"PNG chunk {ctype!r} cut short")
        body = data[pos + 8:pos + 8 + length]
        crc = struct.unpack(">I", data[end - 4:end])[0]
        if zlib.crc32(ctype + body) != crc:
            raise ImageFormatError(f"PNG chunk {ctype!r} fails its CRC")
        yield ctype, body
        pos = end
        if ctype == b"IEND":
            return
    raise TruncatedImageError("PNG ends without IEND")


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(raw, height, stride, bpp):
    out = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int32)
    pos = 0
    for y in range(height):
        ftype = raw[pos]
        line = np.frombuffer(raw, np.uint8, stride, pos + 1).astype(np.int32)
        pos += stride + 1
        if ftype == 0:
            cur = line
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype in (1, 3, 4):
            cur = line.copy()
            for x in range(stride):
                a = cur[x - bpp] if x >= bpp else 0
                if ftype == 1:
                    pred = a
                elif ftype == 3:
                    pred = (a + prev[x]) >> 1
                else:
                    pred = _paeth(a, prev[x], prev[x - bpp] if x >= bpp else 0)
                cur[x] = (cur[x] + pred) & 0xFF
        else:
            raise ImageFormatError(f"unknown PNG filter type {ftype}")
        out[y] = cur
        prev = cur
    return out


def decode_png(data):
    """Return uint8 pixels shaped (H, W, C) with C in {1, 3}."""
    if not data.startswith(PNG_SIGNATURE):
        if PNG_SIGNATURE.startswith(data[:8]):
            raise TruncatedImageError("file ends inside the PNG signature")
        raise ImageFormatError("not a PNG file")
    header = None
    idat = []
    for ctype, body in _chunks(data):
        if ctype == b"IHDR":
            if len(body) != 13:
                raise ImageFormatError("bad IHDR length")
            header = struct.unpack(">IIBBBBB", body)
        elif ctype == b"IDAT":
            idat.append(body)
        elif ctype == b"PLTE":
            raise ImageFormatError("palette PNGs are not supported")
    if header is None:
        raise ImageFormatError("PNG has no IHDR")
    width, height, depth, ctype, _, _, interlace = header
    if depth != 8:
        raise ImageFormatError(f"unsupported PNG bit depth {depth}; only 8-bit images are handled")
    if ctype not in _CHANNELS:
        raise ImageFormatError(f"unsupported PNG colour type {ctype}")
    if interlace:
        raise ImageFormatError("interlaced PNGs are not supported")
    channels = _CHANNELS[ctype]
    stride = width * channels
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise TruncatedImageError(f"PNG image data is incomplete: {exc}") from exc
    if len(raw) < height * (stride + 1):
        raise TruncatedImageError("PNG image data holds fewer rows than IHDR declares")
    pix = _unfilter(raw, height, stride, channels).reshape(height, width, channels)
    if ctype == 4:
        pix = pix[:, :, :1]
    elif ctype == 6:
        pix = pix[:, :, :3]
    return pix


def _chunk(ctype, body):
    return struct.pack(">I", len(body)) + ctype + body + struct.pack(">I", zlib.crc32(ctype + body))


def encode_png(pixels):
    """uint8 (H, W) or (H, W, 3) -> PNG bytes. Rows use filter type 0."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    h, w, c = pixels.shape
    ctype = {1: 0, 3: 2}.get(c)
    if ctype is None:
        raise ImageFormatError(f"can only write gray or RGB images, got {c} channels")
    rows = np.concatenate([np.zeros((h, 1), np.uint8), pixels.reshape(h, w * c)], axis=1)
    ihdr = struct.pack(">IIBBBBB", w, h, 8, ctype, 0, 0, 0)
    return (PNG_SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", zlib.compress(rows.tobytes(), 9))
            + _chunk(b"IEND", b""))


# -- PGM ----------------------------------------------------------------


def _pgm_tokens(data, count):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedImageError("PGM header cut short")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # one whitespace byte ends the header


def decode_pgm(data):
    if not data.startswith(b"P5"):
        raise ImageFormatError("not a binary PGM (P5) file")
    tokens, start = _pgm_tokens(data, 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ImageFormatError("malformed PGM header") from exc
    if maxval != 255:
        raise ImageFormatError(f"unsupported PGM maxval {maxval}; only 8-bit images are handled")
    n = width * height
    if len(data) - start < n:
        raise TruncatedImageError(f"PGM holds {len(data) - start} of {n} pixel bytes")
    return np.frombuffer(data, np.uint8, n, start).reshape(height, width, 1)


def encode_pgm(pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim == 3:
        if pixels.shape[2] != 1:
            raise ImageFormatError("PGM holds a single gray channel")
        pixels = pixels[:, :, 0]
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes()


# -- public -------------------------------------------------------------


def read_pixels(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data.startswith(b"P5"):
        return decode_pgm(data)
    return decode_png(data)


def load_image(path):
    """(3, H, W) float32 in [-1, 1]; gray files are repeated over 3 channels."""
    pix = read_pixels(path)
    if pix.shape[2] == 1:
        pix = np.repeat(pix, 3, axis=2)
    return bytes_to_signed(pix.transpose(2, 0, 1))


def _write_atomic(path, data):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_image(img, path):
    """Write a (3, H, W) or (H, W) array in [-1, 1].

    ``.pgm`` paths keep only the first channel.
    """
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] in (1, 3):
        img = img.transpose(1, 2, 0)
    elif img.ndim != 2:
        raise ImageFormatError(f"cannot save an image shaped {img.shape}")
    pix = signed_to_bytes(img)
    if str(path).lower().endswith(".pgm"):
        data = encode_pgm(pix if pix.ndim == 2 else pix[:, :, :1])
    else:
        if pix.ndim == 3 and pix.shape[2] == 1:
            pix = np.repeat(pix, 3, axis=2)
        data = encode_png(pix)
    _write_atomic(path, data)
