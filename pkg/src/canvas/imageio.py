"""Binary PPM (P6) / PGM (P5) images and a raw float32 tensor format.

Only maxval 255 is accepted. Headers may contain ``#`` comments; exactly one
whitespace byte separates maxval from the payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from canvas.errors import InvalidArgument, ParseError

_WS = b" \t\n\r\x0b\x0c"
TENSOR_MAGIC = b"CVTN"


def _header_fields(data: bytes, n: int) -> tuple[list[int], int]:
    """Parse ``n`` ASCII integers after the magic; return them and the payload offset."""
    pos = 2
    values = []
    while len(values) < n:
        if pos >= len(data):
            raise ParseError("truncated header", pos)
        ch = data[pos:pos + 1]
        if ch in (b"#",):
            end = data.find(b"\n", pos)
            if end < 0:
                raise ParseError("unterminated comment", pos)
            pos = end + 1
            continue
        if ch in _WS and ch:
            pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise ParseError(f"expected a decimal integer, found {ch!r}", pos)
        values.append(int(data[start:pos]))
    if pos >= len(data) or data[pos:pos + 1] not in _WS:
        raise ParseError("expected a single whitespace byte before the payload", pos)
    return values, pos + 1


def decode_pnm(data: bytes) -> np.ndarray:
    """Decode P5/P6 bytes to uint8 (H, W) or (H, W, 3)."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported magic {magic!r}", 0)
    (width, height, maxval), offset = _header_fields(data, 3)
    if width < 1 or height < 1:
        raise ParseError("image dimensions must be positive", 2)
    if maxval != 255:
        raise ParseError(f"only maxval 255 is supported, got {maxval}", offset - 1)
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    have = len(data) - offset
    if have < need:
        raise ParseError(f"truncated payload: {have} of {need} bytes", len(data))
    if have > need:
        raise ParseError("trailing bytes after payload", offset + need)
    arr = np.frombuffer(data, dtype=np.uint8, count=need, offset=offset)
    return arr.reshape(height, width, 3) if channels == 3 else arr.reshape(height, width)


def encode_pnm(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise InvalidArgument("PNM encoding needs uint8 data")
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise InvalidArgument(f"cannot encode array of shape {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def read_pnm(path: str | Path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


def write_pnm(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(arr))


# image-space grids <-> 8-bit arrays

def grid_to_u8(grid: np.ndarray) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    u8 = np.clip(np.round(g * 255.0), 0, 255).astype(np.uint8)
    return u8.transpose(1, 2, 0) if u8.ndim == 3 else u8


def u8_to_grid(arr: np.ndarray) -> np.ndarray:
    f = arr.astype(np.float32) / np.float32(255.0)
    return f.transpose(2, 0, 1).copy() if f.ndim == 3 else f


def write_image(path: str | Path, grid: np.ndarray) -> None:
    """(3, H, W) grid in [0, 1] as PPM."""
    if grid.ndim != 3 or grid.shape[0] != 3:
        raise InvalidArgument("PPM output needs a (3, H, W) grid")
    write_pnm(path, grid_to_u8(grid))


def read_image(path: str | Path) -> np.ndarray:
    arr = read_pnm(path)
    if arr.ndim != 3:
        raise InvalidArgument(f"{path} is not an RGB image")
    return u8_to_grid(arr)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    """{0, 1} mask as PGM with values {0, 255}."""
    write_pnm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)


def read_mask(path: str | Path) -> np.ndarray:
    arr = read_pnm(path)
    if arr.ndim != 2:
        raise InvalidArgument(f"{path} is not a grayscale mask")
    if not np.all((arr == 0) | (arr == 255)):
        raise InvalidArgument(f"{path} has values other than 0 and 255")
    return (arr == 255).astype(np.uint8)


def encode_tensor(arr: np.ndarray) -> bytes:
    a = np.ascontiguousarray(arr, dtype="<f4")
    return TENSOR_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + a.tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    if data[:4] != TENSOR_MAGIC:
        raise ParseError("bad tensor magic", 0)
    if len(data) < 8:
        raise ParseError("truncated tensor header", len(data))
    (ndim,) = struct.unpack_from("<I", data, 4)
    end = 8 + 4 * ndim
    if len(data) < end:
        raise ParseError("truncated tensor header", len(data))
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    need = 4 * int(np.prod(shape))
    if len(data) - end < need:
        raise ParseError("truncated tensor payload", len(data))
    if len(data) - end > need:
        raise ParseError("trailing bytes after tensor payload", end + need)
    return np.frombuffer(data, dtype="<f4", offset=end).reshape(shape).astype(np.float32)


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path: str | Path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
