"""Serialized container for one compressed image.

Layout (all integers big-endian):

====================  =====  ==========================================
field                 bytes  meaning
====================  =====  ==========================================
magic                 4      ``LDIC``
version               1      format version, currently 1
flags                 1      bit0: depth payload present
                             bit1: depth-guided encoding was used
width                 2      original image width (pre-padding)
height                2      original image height (pre-padding)
m_lambda_fixed        2      round(m_lambda * 65535)
len_z                 4      byte length of the hyper-latent payload
len_y                 4      byte length of the main-latent payload
len_depth             4      only when bit0 is set
payload_z             var
payload_y             var
payload_depth         var    itself a serialized container, never nested
====================  =====  ==========================================

The container is strict: parse rejects wrong magic, unknown versions,
reserved flag bits, truncation, trailing bytes, and depth payloads that
nest further.  ``parse(serialize(c))`` reproduces ``c`` exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

MAGIC = b"LDIC"
VERSION = 1
FLAG_DEPTH_PAYLOAD = 0x01
FLAG_DEPTH_GUIDED = 0x02
_BASE_HEADER = 20  # through len_y; +4 when a depth payload is present
M_LAMBDA_SCALE = 65535


class BitstreamError(ValueError):
    """Base class for malformed or unusable streams."""


class BadMagicError(BitstreamError):
    pass


class UnsupportedVersionError(BitstreamError):
    pass


class TruncatedStreamError(BitstreamError):
    pass


class CorruptStreamError(BitstreamError):
    """Structurally invalid: reserved flags, trailing bytes, bad nesting."""


def m_lambda_to_fixed(m_lambda: float) -> int:
    """Quantize a rate-control exponent in [0, 1] to the 16-bit header field."""
    if not 0.0 <= m_lambda <= 1.0:
        raise ValueError(f"m_lambda must be in [0, 1], got {m_lambda}")
    return int(round(m_lambda * M_LAMBDA_SCALE))


@dataclass(frozen=True)
class CompressedImage:
    """One parsed (or to-be-serialized) compressed image."""

    width: int
    height: int
    m_lambda_fixed: int
    depth_guided: bool
    payload_z: bytes
    payload_y: bytes
    payload_depth: bytes | None = None
    version: int = VERSION

    def __post_init__(self):
        if not 1 <= self.width <= 0xFFFF or not 1 <= self.height <= 0xFFFF:
            raise BitstreamError("width/height must fit in 16 bits and be >= 1")
        if not 0 <= self.m_lambda_fixed <= M_LAMBDA_SCALE:
            raise BitstreamError("m_lambda_fixed out of range")
        if self.version != VERSION:
            raise UnsupportedVersionError(f"unsupported version {self.version}")
        for payload in (self.payload_z, self.payload_y):
            if len(payload) > 0xFFFFFFFF:
                raise BitstreamError("payload too long for a 32-bit length")
        if self.payload_depth is not None:
            if len(self.payload_depth) > 0xFFFFFFFF:
                raise BitstreamError("depth payload too long")
            inner = parse(self.payload_depth)
            if inner.payload_depth is not None:
                raise CorruptStreamError("depth payload must not nest further")

    @property
    def flags(self) -> int:
        f = FLAG_DEPTH_GUIDED if self.depth_guided else 0
        if self.payload_depth is not None:
            f |= FLAG_DEPTH_PAYLOAD
        return f

    @property
    def m_lambda(self) -> float:
        return self.m_lambda_fixed / M_LAMBDA_SCALE


def serialize(c: CompressedImage) -> bytes:
    """Encode the container to bytes."""
    parts = [
        MAGIC,
        bytes([c.version, c.flags]),
        c.width.to_bytes(2, "big"),
        c.height.to_bytes(2, "big"),
        c.m_lambda_fixed.to_bytes(2, "big"),
        len(c.payload_z).to_bytes(4, "big"),
        len(c.payload_y).to_bytes(4, "big"),
    ]
    if c.payload_depth is not None:
        parts.append(len(c.payload_depth).to_bytes(4, "big"))
    parts.append(c.payload_z)
    parts.append(c.payload_y)
    if c.payload_depth is not None:
        parts.append(c.payload_depth)
    return b"".join(parts)


def parse(data: bytes, *, _nested: bool = False) -> CompressedImage:
    """Decode and validate a container; the exact inverse of serialize."""
    if len(data) < _BASE_HEADER:
        raise TruncatedStreamError(
            f"stream of {len(data)} bytes is shorter than the header"
        )
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    version = data[4]
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    flags = data[5]
    if flags & ~(FLAG_DEPTH_PAYLOAD | FLAG_DEPTH_GUIDED):
        raise CorruptStreamError(f"reserved flag bits set: {flags:#04x}")
    width = int.from_bytes(data[6:8], "big")
    height = int.from_bytes(data[8:10], "big")
    if width == 0 or height == 0:
        raise CorruptStreamError("zero width or height")
    m_fixed = int.from_bytes(data[10:12], "big")
    len_z = int.from_bytes(data[12:16], "big")
    len_y = int.from_bytes(data[16:20], "big")
    pos = _BASE_HEADER
    len_depth = 0
    has_depth = bool(flags & FLAG_DEPTH_PAYLOAD)
    if has_depth:
        if _nested:
            raise CorruptStreamError("depth payload must not nest further")
        if len(data) < pos + 4:
            raise TruncatedStreamError("truncated before depth length field")
        len_depth = int.from_bytes(data[pos : pos + 4], "big")
        pos += 4
    expected = pos + len_z + len_y + len_depth
    if len(data) < expected:
        raise TruncatedStreamError(
            f"declared payloads need {expected} bytes, stream has {len(data)}"
        )
    if len(data) > expected:
        raise CorruptStreamError(f"{len(data) - expected} trailing bytes")
    payload_z = data[pos : pos + len_z]
    pos += len_z
    payload_y = data[pos : pos + len_y]
    pos += len_y
    payload_depth = None
    if has_depth:
        payload_depth = data[pos : pos + len_depth]
        # validate the nested container eagerly (and forbid deeper nesting)
        parse(payload_depth, _nested=True)
    return CompressedImage(
        width=width,
        height=height,
        m_lambda_fixed=m_fixed,
        depth_guided=bool(flags & FLAG_DEPTH_GUIDED),
        payload_z=payload_z,
        payload_y=payload_y,
        payload_depth=payload_depth,
        version=version,
    )


def bpp(c: CompressedImage) -> float:
    """Transmitted bits per pixel: total stream bytes over original pixels."""
    return 8.0 * len(serialize(c)) / (c.width * c.height)


def rgb_only_bytes(c: CompressedImage) -> int:
    """Byte length the stream would have without its depth payload."""
    return _BASE_HEADER + len(c.payload_z) + len(c.payload_y)
