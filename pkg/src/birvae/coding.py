"""Range coding of quantizer indices and the ``BIRB`` bitstream container.

Indices are modelled by a fixed discretized standard normal: index ``i`` of a
lattice with step ``delta`` gets mass ``Phi((i + 1/2) delta) - Phi((i - 1/2) delta)``.
Indices beyond ``+-8 / delta`` go through an escape symbol followed by the raw
value as two uniform 16-bit halves. The coder is a 32-bit range coder with
carry propagation into already emitted bytes. Each image is terminated with the
shortest dyadic interval inside the final coding interval, so every payload is
self-delimiting and ``bit_length`` counts exactly those bits.
"""

from __future__ import annotations

import bisect
import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .channel import QuantizerSpec
from .errors import DomainError, FormatError

MAGIC = b"BIRB"
VERSION = 1
TOTAL_BITS = 16
TOTAL = 1 << TOTAL_BITS
TOP = 1 << 24
MASK = (1 << 32) - 1
MAX_HALF_WIDTH = 2047  # caps the modelled alphabet at 4095 lattice cells + escape
ESCAPE_LIMIT = 1 << 31

_HEADER = struct.Struct("<4sHHdBQ")


def _phi(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


class GaussianIndexModel:
    """Integer frequency table for lattice indices under N(0, 1)."""

    def __init__(self, step: float):
        if not step > 0:
            raise DomainError(f"quantizer step must be positive, got {step}")
        self.step = step
        self.half_width = min(int(math.floor(8.0 / step)), MAX_HALF_WIDTH)
        k = self.half_width
        edges = [_phi((i + 0.5) * step) for i in range(-k - 1, k + 1)]
        probs = [edges[j + 1] - edges[j] for j in range(2 * k + 1)]
        probs.append(max(0.0, 1.0 - sum(probs)))  # escape mass
        nsym = len(probs)
        spare = TOTAL - nsym
        scaled = [p * spare / sum(probs) for p in probs]
        freqs = [1 + int(math.floor(s)) for s in scaled]
        leftover = TOTAL - sum(freqs)
        # largest remainder, ties to the lower symbol
        order = sorted(range(nsym), key=lambda j: (-(scaled[j] - math.floor(scaled[j])), j))
        for j in order[:leftover]:
            freqs[j] += 1
        self.freqs = freqs
        self.cum = [0]
        for f in freqs:
            self.cum.append(self.cum[-1] + f)
        assert self.cum[-1] == TOTAL
        self.escape = nsym - 1

    def symbol(self, index: int) -> int | None:
        if -self.half_width <= index <= self.half_width:
            return index + self.half_width
        return None

    def code_length_bits(self, index: int) -> float:
        """Ideal code length of one index under this table."""
        s = self.symbol(index)
        if s is None:
            return -math.log2(self.freqs[self.escape] / TOTAL) + 2 * TOTAL_BITS
        return -math.log2(self.freqs[s] / TOTAL)


@lru_cache(maxsize=32)
def index_model(step: float) -> GaussianIndexModel:
    return GaussianIndexModel(step)


def _zigzag(v: int) -> int:
    return (v << 1) if v >= 0 else ((-v << 1) - 1)


def _unzigzag(u: int) -> int:
    return (u >> 1) if not u & 1 else -((u + 1) >> 1)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK
        self.out = bytearray()

    def _carry(self):
        i = len(self.out) - 1
        while self.out[i] == 0xFF:
            self.out[i] = 0
            i -= 1
        self.out[i] += 1

    def encode(self, cum: int, freq: int, total: int = TOTAL) -> None:
        r = self.range // total
        self.low += r * cum
        self.range = r * freq
        if self.low > MASK:
            self.low &= MASK
            self._carry()
        while self.range < TOP:
            self.out.append(self.low >> 24)
            self.low = (self.low << 8) & MASK
            self.range <<= 8

    def finish(self) -> tuple[bytes, int]:
        """Close the stream; returns ``(payload, bit_length)``."""
        lo, hi = self.low, self.low + self.range
        for k in range(33):
            size = 1 << (32 - k)
            m = -(-lo // size)
            if (m + 1) * size <= hi:
                break
        v = m * size
        if v > MASK:
            v &= MASK
            self._carry()
        bit_length = 8 * len(self.out) + k
        tail = (v >> (32 - k)) << (32 - k) if k else 0
        nbytes = (k + 7) // 8
        payload = bytes(self.out) + tail.to_bytes(4, "big")[:nbytes]
        return payload, bit_length


class RangeDecoder:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.pos = 0
        self.range = MASK
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        # reads past the end see zeros; any continuation lies inside the final interval
        b = self.payload[self.pos] if self.pos < len(self.payload) else 0
        self.pos += 1
        return b

    def decode(self, cum: list[int], freqs: list[int], total: int = TOTAL) -> int:
        r = self.range // total
        v = self.code // r
        if v >= total:
            raise FormatError("corrupt payload: code value outside the coding interval")
        s = bisect.bisect_right(cum, v) - 1
        self.code -= r * cum[s]
        self.range = r * freqs[s]
        while self.range < TOP:
            self.code = (self.code << 8) | self._byte()
            self.range <<= 8
        return s

    def decode_uniform(self, total: int = TOTAL) -> int:
        r = self.range // total
        v = self.code // r
        if v >= total:
            raise FormatError("corrupt payload: code value outside the coding interval")
        self.code -= r * v
        self.range = r
        while self.range < TOP:
            self.code = (self.code << 8) | self._byte()
            self.range <<= 8
        return v


def encode_indices(indices, step: float) -> tuple[bytes, int]:
    model = index_model(step)
    enc = RangeEncoder()
    for index in np.asarray(indices, dtype=np.int64).ravel().tolist():
        s = model.symbol(index)
        if s is None:
            if not -ESCAPE_LIMIT <= index < ESCAPE_LIMIT:
                raise DomainError(f"index {index} exceeds the 32-bit escape range")
            enc.encode(model.cum[model.escape], model.freqs[model.escape])
            u = _zigzag(index)
            enc.encode(u >> TOTAL_BITS, 1)
            enc.encode(u & (TOTAL - 1), 1)
        else:
            enc.encode(model.cum[s], model.freqs[s])
    return enc.finish()


def decode_indices(payload: bytes, count: int, step: float) -> np.ndarray:
    model = index_model(step)
    dec = RangeDecoder(payload)
    out = np.empty(count, dtype=np.int64)
    for j in range(count):
        s = dec.decode(model.cum, model.freqs)
        if s == model.escape:
            u = (dec.decode_uniform() << TOTAL_BITS) | dec.decode_uniform()
            out[j] = _unzigzag(u)
        else:
            out[j] = s - model.half_width
    return out


@dataclass(frozen=True)
class LatentBitstream:
    """Entropy-coded lattice indices for one or more images sharing a quantizer."""

    d: int
    step: float
    dither: bool
    seed: int
    payloads: tuple[bytes, ...]
    bit_lengths: tuple[int, ...]

    @property
    def count(self) -> int:
        return len(self.payloads)

    @property
    def header(self) -> dict:
        return {"d": self.d, "step": self.step, "count": self.count}

    @property
    def quantizer(self) -> QuantizerSpec:
        return QuantizerSpec(self.step, self.dither, self.seed)

    @property
    def bit_length(self) -> int:
        return sum(self.bit_lengths)

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, VERSION, self.d, self.step, int(self.dither), self.seed)
        if self.count == 1:
            return head + struct.pack("<I", len(self.payloads[0])) + self.payloads[0]
        parts = [head, struct.pack("<I", self.count)]
        for p in self.payloads:
            parts.append(struct.pack("<I", len(p)))
            parts.append(p)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "LatentBitstream":
        if len(blob) < _HEADER.size + 4:
            raise FormatError(f"bitstream truncated: {len(blob)} bytes is shorter than the header")
        magic, version, d, step, dither, seed = _HEADER.unpack_from(blob, 0)
        if magic != MAGIC:
            raise FormatError(f"bad bitstream magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise FormatError(f"unsupported bitstream version {version}")
        if dither not in (0, 1):
            raise FormatError(f"bad dither flag {dither}")
        if not (step > 0 and math.isfinite(step)) or d == 0:
            raise FormatError(f"bad quantizer header: d={d}, step={step}")
        pos = _HEADER.size
        (first,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if first > 0 and pos + first == len(blob):
            payloads = [blob[pos:]]
        else:
            payloads = []
            for i in range(first):
                if pos + 4 > len(blob):
                    raise FormatError(f"bitstream truncated in the length of image {i}")
                (n,) = struct.unpack_from("<I", blob, pos)
                pos += 4
                if pos + n > len(blob):
                    raise FormatError(f"bitstream truncated in the payload of image {i}")
                payloads.append(blob[pos:pos + n])
                pos += n
            if pos != len(blob):
                raise FormatError(f"{len(blob) - pos} trailing bytes after the last payload")
        bits = []
        for i, p in enumerate(payloads):
            idx = decode_indices(p, d, step)
            canon, nbits = encode_indices(idx, step)
            if canon != p:
                raise FormatError(f"corrupt payload for image {i}")
            bits.append(nbits)
        return cls(d, step, bool(dither), seed, tuple(payloads), tuple(bits))


def entropy_encode(indices, q: QuantizerSpec) -> LatentBitstream:
    """Code a vector (one image) or a matrix (one image per row) of indices."""
    rows = np.atleast_2d(np.asarray(indices, dtype=np.int64))
    if rows.ndim != 2 or rows.shape[1] == 0:
        raise DomainError(f"indices must be a vector or a matrix, got shape {rows.shape}")
    payloads, bits = [], []
    for row in rows:
        p, n = encode_indices(row, q.step)
        payloads.append(p)
        bits.append(n)
    return LatentBitstream(rows.shape[1], q.step, q.dither, q.seed, tuple(payloads), tuple(bits))


def entropy_decode(bs: LatentBitstream) -> np.ndarray:
    """Indices as a ``count x d`` matrix."""
    out = np.empty((bs.count, bs.d), dtype=np.int64)
    for i, p in enumerate(bs.payloads):
        out[i] = decode_indices(p, bs.d, bs.step)
        canon, _ = encode_indices(out[i], bs.step)
        if canon != p:
            raise FormatError(f"corrupt payload for image {i}")
    return out


def write_bitstream(path, bs: LatentBitstream) -> None:
    with open(path, "wb") as f:
        f.write(bs.to_bytes())


def read_bitstream(path) -> LatentBitstream:
    with open(path, "rb") as f:
        return LatentBitstream.from_bytes(f.read())
