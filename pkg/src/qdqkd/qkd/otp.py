"""One-time-pad encryption with a key store that refuses reuse."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class KeyExhausted(RuntimeError):
    pass


class KeyReuseError(RuntimeError):
    pass


class KeyStore:
    """Secure key bits handed out strictly once, in order."""

    def __init__(self, bits: np.ndarray | None = None):
        self._bits = np.zeros(0, np.uint8)
        self._spent = np.zeros(0, bool)
        self.cursor = 0
        if bits is not None:
            self.add(bits)

    def add(self, bits: np.ndarray) -> None:
        bits = np.asarray(bits, np.uint8)
        self._bits = np.concatenate([self._bits, bits])
        self._spent = np.concatenate([self._spent, np.zeros(len(bits), bool)])

    @property
    def available(self) -> int:
        return len(self._bits) - self.cursor

    @property
    def spent(self) -> int:
        return int(self._spent.sum())

    def take_range(self, start: int, n: int) -> np.ndarray:
        """Consume bits [start, start + n); raises if any of them was used before."""
        if start < 0 or start + n > len(self._bits):
            raise KeyExhausted(f"need bits [{start}, {start + n}) but only {len(self._bits)} exist")
        if self._spent[start:start + n].any():
            raise KeyReuseError(f"key bits in [{start}, {start + n}) were already used")
        self._spent[start:start + n] = True
        self.cursor = max(self.cursor, start + n)
        return self._bits[start:start + n].copy()

    def take(self, n: int) -> np.ndarray:
        if n > self.available:
            raise KeyExhausted(f"need {n} key bits, {self.available} available")
        return self.take_range(self.cursor, n)


def otp_encrypt(message: bytes, key_bits: np.ndarray) -> bytes:
    """XOR ``message`` with the first 8 * len(message) key bits."""
    nbits = 8 * len(message)
    key_bits = np.asarray(key_bits, np.uint8)
    if len(key_bits) < nbits:
        raise KeyExhausted(f"message needs {nbits} key bits, got {len(key_bits)}")
    pad = np.packbits(key_bits[:nbits])
    return (np.frombuffer(message, np.uint8) ^ pad).tobytes()


otp_decrypt = otp_encrypt


def bit_difference(a: bytes, b: bytes) -> float:
    """Fraction of differing bits between two equal-length byte strings."""
    if len(a) != len(b):
        raise ValueError("lengths differ")
    x = np.unpackbits(np.frombuffer(a, np.uint8) ^ np.frombuffer(b, np.uint8))
    return float(x.mean()) if len(x) else 0.0


# --- 24-bit uncompressed BMP ---------------------------------------------------

_FILE_HDR = struct.Struct("<2sIHHI")
_INFO_HDR = struct.Struct("<IiiHHIIiiII")


@dataclass
class Bitmap:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8, BGR, top row first

    @property
    def payload_bits(self) -> int:
        return self.width * self.height * 24


def _row_size(width: int) -> int:
    return (3 * width + 3) // 4 * 4


def write_bmp(path, bmp: Bitmap) -> None:
    row = _row_size(bmp.width)
    data = bytearray()
    pad = bytes(row - 3 * bmp.width)
    for r in range(bmp.height - 1, -1, -1):  # bottom-up storage
        data += bmp.pixels[r].astype(np.uint8).tobytes() + pad
    offset = _FILE_HDR.size + _INFO_HDR.size
    with open(path, "wb") as f:
        f.write(_FILE_HDR.pack(b"BM", offset + len(data), 0, 0, offset))
        f.write(_INFO_HDR.pack(_INFO_HDR.size, bmp.width, bmp.height, 1, 24, 0, len(data), 2835, 2835, 0, 0))
        f.write(data)


def read_bmp(path) -> Bitmap:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _FILE_HDR.size + _INFO_HDR.size:
        raise ValueError("file too short for a BMP header")
    magic, _, _, _, offset = _FILE_HDR.unpack_from(raw, 0)
    if magic != b"BM":
        raise ValueError("not a BMP file (bad magic)")
    _, width, height, planes, bpp, comp, *_ = _INFO_HDR.unpack_from(raw, _FILE_HDR.size)
    if bpp != 24 or comp != 0:
        raise ValueError(f"only uncompressed 24-bit BMP is supported (got {bpp} bpp, compression {comp})")
    top_down = height < 0
    height = abs(height)
    row = _row_size(width)
    if offset + row * height > len(raw):
        raise ValueError("BMP pixel data truncated")
    px = np.frombuffer(raw, np.uint8, row * height, offset).reshape(height, row)[:, :3 * width]
    px = px.reshape(height, width, 3)
    if not top_down:
        px = px[::-1]
    return Bitmap(width, height, px.copy())


def encrypt_bitmap(bmp: Bitmap, store: KeyStore) -> Bitmap:
    """Encrypt the pixel payload; the header stays readable so the result is still an image."""
    key = store.take(bmp.payload_bits)
    data = otp_encrypt(bmp.pixels.tobytes(), key)
    return Bitmap(bmp.width, bmp.height, np.frombuffer(data, np.uint8).reshape(bmp.pixels.shape).copy())


def decrypt_bitmap(bmp: Bitmap, key_bits: np.ndarray) -> Bitmap:
    data = otp_decrypt(bmp.pixels.tobytes(), key_bits)
    return Bitmap(bmp.width, bmp.height, np.frombuffer(data, np.uint8).reshape(bmp.pixels.shape).copy())
