"""Compressed storage for N:M-masked matrices.

Each block of ``m`` consecutive row elements keeps ``n`` values. The kept
positions ``c_1 < ... < c_n`` are stored as their colexicographic rank
``sum_i C(c_i, i)`` in ``ceil(log2 C(m, n))`` bits, blocks in row-major order,
bits packed LSB-first into a single stream.

File layout (little-endian)::

    b"NMSP" | version u8 | n u8 | m u8 | rows u32 | cols u32 | meta bytes | values f64
"""

from __future__ import annotations

import bisect
import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .masks import Mask, PatternSpec, is_nm_structured
from .tensor import as_matrix

__all__ = [
    "CompressedNM",
    "pattern_count",
    "bits_per_block",
    "metadata_bits_per_element",
    "stacked_config_count",
    "colex_rank",
    "colex_unrank",
    "encode",
    "decode",
    "spmm",
    "to_bytes",
    "from_bytes",
    "save",
    "load",
    "MAGIC",
    "VERSION",
]

MAGIC = b"NMSP"
VERSION = 1
_HEADER = struct.Struct("<4sBBBII")


def pattern_count(spec: PatternSpec) -> int:
    return math.comb(spec.m, spec.n)


def bits_per_block(spec: PatternSpec) -> int:
    """ceil(log2 C(m, n)), exact for arbitrarily large binomials."""
    return (pattern_count(spec) - 1).bit_length()


def metadata_bits_per_element(spec: PatternSpec) -> Fraction:
    return Fraction(bits_per_block(spec), spec.m)


def stacked_config_count(spec: PatternSpec, stack: int) -> int:
    if stack < 1:
        raise ValueError(f"stack must be >= 1, got {stack}")
    return pattern_count(spec) ** stack


def colex_rank(positions) -> int:
    return sum(math.comb(c, i) for i, c in enumerate(sorted(positions), start=1))


def colex_unrank(rank: int, n: int, m: int) -> list[int]:
    if not 0 <= rank < math.comb(m, n):
        raise ValueError(f"rank {rank} out of range for {n}:{m}")
    out = []
    c = m - 1
    for i in range(n, 0, -1):
        while math.comb(c, i) > rank:
            c -= 1
        out.append(c)
        rank -= math.comb(c, i)
        c -= 1
    return out[::-1]


@dataclass(frozen=True, eq=False)
class CompressedNM:
    spec: PatternSpec
    rows: int
    cols: int
    values: np.ndarray  # (rows * blocks * n,) kept values in block order
    meta: bytes  # packed block ranks

    @property
    def blocks_per_row(self) -> int:
        return self.cols // self.spec.m

    @property
    def num_blocks(self) -> int:
        return self.rows * self.blocks_per_row

    @property
    def meta_bits(self) -> int:
        return self.num_blocks * bits_per_block(self.spec)

    def ranks(self) -> np.ndarray:
        return _unpack_ranks(self.meta, self.num_blocks, bits_per_block(self.spec))

    def positions(self) -> np.ndarray:
        """Kept column offsets within each block, shape (rows, blocks, n); validates meta."""
        ranks = self.ranks()
        limit = pattern_count(self.spec)
        bad = np.flatnonzero(np.asarray(ranks >= limit))
        if bad.size:
            row, block = divmod(int(bad[0]), self.blocks_per_row)
            raise ValueError(
                f"corrupted metadata at row {row}, block {block}: "
                f"rank {int(ranks[bad[0]])} >= C({self.spec.m},{self.spec.n}) = {limit}"
            )
        pos = _unrank_many(ranks, self.spec.n, self.spec.m)
        return pos.reshape(self.rows, self.blocks_per_row, self.spec.n)


def _rank_dtype(spec: PatternSpec):
    return np.int64 if bits_per_block(spec) <= 62 else object


def _binom_table(m: int, n: int, dtype) -> np.ndarray:
    table = np.zeros((m + 1, n + 1), dtype=dtype)
    for c in range(m + 1):
        for i in range(n + 1):
            table[c, i] = math.comb(c, i)
    return table


def _rank_many(bits: np.ndarray, spec: PatternSpec) -> np.ndarray:
    """Colex ranks of boolean blocks, shape (..., m) -> (...)."""
    dtype = _rank_dtype(spec)
    table = _binom_table(spec.m, spec.n, dtype)
    # i-th kept position (1-based) of position c is the running count up to c
    ordinal = np.cumsum(bits, axis=-1)
    cols = np.broadcast_to(np.arange(spec.m), bits.shape)
    terms = np.where(bits, table[cols, np.where(bits, ordinal, 0)], 0)
    return terms.astype(dtype).sum(axis=-1)


def _unrank_many(ranks: np.ndarray, n: int, m: int) -> np.ndarray:
    dtype = ranks.dtype
    table = _binom_table(m, n, dtype)
    rest = ranks.copy()
    out = np.zeros((ranks.size, n), dtype=np.intp)
    for i in range(n, 0, -1):
        # largest c with C(c, i) <= rest; column i of the table is nondecreasing in c
        if dtype == object:
            column = list(table[:, i])
            c = np.array([bisect.bisect_right(column, r) - 1 for r in rest], dtype=np.intp)
        else:
            c = np.searchsorted(table[:, i], rest, side="right") - 1
        out[:, i - 1] = c
        rest = rest - table[c, i]
    return out


def _pack_ranks(ranks: np.ndarray, width: int) -> bytes:
    if width == 0 or ranks.size == 0:
        return b""
    shifts = np.arange(width)
    if ranks.dtype == object:
        bits = np.array([[(int(r) >> k) & 1 for k in shifts] for r in ranks], dtype=np.uint8)
    else:
        bits = ((ranks[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def _unpack_ranks(meta: bytes, count: int, width: int) -> np.ndarray:
    dtype = np.int64 if width <= 62 else object
    if width == 0:
        return np.zeros(count, dtype=dtype)
    need = (count * width + 7) // 8
    if len(meta) != need:
        raise ValueError(f"metadata holds {len(meta)} bytes, expected {need}")
    bits = np.unpackbits(np.frombuffer(meta, dtype=np.uint8), bitorder="little")
    bits = bits[: count * width].reshape(count, width)
    if dtype == object:
        return np.array([sum(int(b) << k for k, b in enumerate(row)) for row in bits], dtype=object)
    return (bits.astype(np.int64) << np.arange(width, dtype=np.int64)).sum(axis=1)


def encode(X, mask: Mask) -> CompressedNM:
    X = as_matrix(X, "X")
    bits = mask.bits if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
    spec = getattr(mask, "pattern", None)
    if not isinstance(spec, PatternSpec):
        raise ValueError("encode needs a mask built with an N:M pattern")
    if bits.shape != X.shape:
        raise ValueError(f"mask shape {bits.shape} does not match X shape {X.shape}")
    if not is_nm_structured(bits, spec):
        raise ValueError(f"mask does not satisfy the {spec} structure")
    rows, cols = X.shape
    blocks = bits.reshape(rows, cols // spec.m, spec.m)
    ranks = _rank_many(blocks, spec).ravel()
    # row-major traversal of kept positions is already block order
    values = X[bits].copy()
    return CompressedNM(spec, rows, cols, values, _pack_ranks(ranks, bits_per_block(spec)))


def decode(c: CompressedNM) -> np.ndarray:
    pos = c.positions()
    out = np.zeros((c.rows, c.blocks_per_row, c.spec.m))
    vals = c.values.reshape(c.rows, c.blocks_per_row, c.spec.n)
    np.put_along_axis(out, pos, vals, axis=-1)
    return out.reshape(c.rows, c.cols)


def spmm(c: CompressedNM, W) -> np.ndarray:
    """``decode(c) @ W.T`` computed from the kept values only (gather on W columns)."""
    W = as_matrix(W, "W")
    if W.shape[1] != c.cols:
        raise ValueError(f"spmm: compressed cols {c.cols} != W.cols (W {W.shape})")
    pos = c.positions()
    cols = pos + (np.arange(c.blocks_per_row) * c.spec.m)[None, :, None]
    cols = cols.reshape(c.rows, -1)
    vals = c.values.reshape(c.rows, -1)
    gathered = W.T[cols]  # (rows, kept, out)
    return np.einsum("rk,rko->ro", vals, gathered)


def to_bytes(c: CompressedNM) -> bytes:
    if c.spec.m > 255:
        raise ValueError(f"block length {c.spec.m} does not fit the u8 header field")
    header = _HEADER.pack(MAGIC, VERSION, c.spec.n, c.spec.m, c.rows, c.cols)
    return header + c.meta + c.values.astype("<f8").tobytes()


def from_bytes(data: bytes) -> CompressedNM:
    if len(data) < _HEADER.size:
        raise ValueError("truncated NMSP header")
    magic, version, n, m, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ValueError(f"unsupported NMSP version {version}")
    spec = PatternSpec(n, m)
    if cols % m:
        raise ValueError(f"cols={cols} is not divisible by m={m}")
    num_blocks = rows * (cols // m)
    meta_len = (num_blocks * bits_per_block(spec) + 7) // 8
    n_values = num_blocks * n
    expected = _HEADER.size + meta_len + 8 * n_values
    if len(data) != expected:
        raise ValueError(f"NMSP payload is {len(data)} bytes, expected {expected}")
    off = _HEADER.size
    meta = bytes(data[off : off + meta_len])
    values = np.frombuffer(data, dtype="<f8", count=n_values, offset=off + meta_len).astype(np.float64)
    c = CompressedNM(spec, rows, cols, values, meta)
    c.positions()  # reject corrupted ranks at load time
    return c


def save(c: CompressedNM, path) -> None:
    Path(path).write_bytes(to_bytes(c))


def load(path) -> CompressedNM:
    return from_bytes(Path(path).read_bytes())
