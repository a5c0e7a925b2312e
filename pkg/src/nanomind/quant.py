"""Group-wise low-bit weight quantization and dequant-GEMM kernels.

Weights are quantized asymmetrically (min/max plus zero point) in groups of
``group_size`` consecutive elements along each row. Codes are bit-packed
row-major, lowest bits first, so a byte holds 4 two-bit, 2 four-bit or 1
eight-bit code.

Two GEMM paths are provided. :func:`gemm_reference` dequantizes the whole
weight matrix and then accumulates; :func:`gemm_fused_dequant` unpacks and
rescales small row tiles inside the accumulation loop and never holds the
full dequantized matrix. Both accumulate in float32 with k ascending, so
their outputs are bit-identical.

NMQ1 container layout (all little-endian)::

    offset  size          field
    0       4             magic b"NMQ1"
    4       4             rows        (uint32)
    8       4             cols        (uint32)
    12      4             bits        (uint32, one of 2, 4, 8)
    16      4             group_size  (uint32)
    20      4 * G         scales      (float32), G = rows * cols / group_size
    20+4G   G             zero_points (uint8)
    20+5G   rows*cols*bits/8  packed codes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import _alloc
from .errors import DomainError, FormatError, ShapeError

SUPPORTED_BITS = (2, 4, 8)
PRECISIONS = ("r32", "r16")
ACTIVATIONS = ("none", "silu", "gelu")
DEFAULT_GROUP_SIZE = 32

NMQ_MAGIC = b"NMQ1"
_HEADER = struct.Struct("<4s4I")


@dataclass(frozen=True, eq=False)
class DenseMatrix:
    """Row-major float matrix.

    ``r16`` matrices hold float32 values that are exactly representable in
    IEEE half precision; every store rounds through float16 (nearest even).
    """

    data: np.ndarray
    precision: str = "r32"

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ValueError(f"unknown precision {self.precision!r}")
        a = np.array(self.data, dtype=np.float32, copy=True, ndmin=2)
        if a.ndim != 2:
            raise ShapeError(f"DenseMatrix needs 2-D data, got shape {a.shape}")
        if self.precision == "r16":
            a = a.astype(np.float16).astype(np.float32)
        a.flags.writeable = False
        object.__setattr__(self, "data", a)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


MatrixLike = Union[DenseMatrix, np.ndarray]


def as_dense(m: MatrixLike, precision: Optional[str] = None) -> DenseMatrix:
    if isinstance(m, DenseMatrix) and (precision is None or m.precision == precision):
        return m
    if isinstance(m, DenseMatrix):
        return DenseMatrix(m.data, precision)
    return DenseMatrix(m, precision or "r32")


@dataclass(frozen=True, eq=False)
class QuantizedMatrix:
    rows: int
    cols: int
    bits: int
    group_size: int
    packed: np.ndarray  # uint8, rows * cols * bits / 8
    scales: np.ndarray  # float32, one per group, row-major over (rows, cols // group_size)
    zero_points: np.ndarray  # uint8, same layout as scales

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ShapeError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.group_size <= 0 or self.cols % self.group_size:
            raise ShapeError(f"group_size {self.group_size} does not divide cols {self.cols}")
        if (self.cols * self.bits) % 8:
            raise ShapeError(f"rows of {self.cols} {self.bits}-bit codes are not byte aligned")
        expected = self.rows * self.cols * self.bits // 8
        if self.packed.size != expected:
            raise FormatError(f"packed length {self.packed.size} != {expected}")
        if self.scales.size != self.n_groups or self.zero_points.size != self.n_groups:
            raise FormatError("scale/zero-point table does not match group count")
        if self.zero_points.size and int(self.zero_points.max()) >= (1 << self.bits):
            raise FormatError("zero point out of range for bit width")
        for name in ("packed", "scales", "zero_points"):
            getattr(self, name).flags.writeable = False

    @property
    def n_groups(self) -> int:
        return self.rows * self.cols // self.group_size

    @property
    def groups_per_row(self) -> int:
        return self.cols // self.group_size

    @property
    def row_bytes(self) -> int:
        return self.cols * self.bits // 8

    @property
    def nbytes(self) -> int:
        """Payload size: packed codes plus scale and zero-point tables."""
        return self.packed.size + 4 * self.n_groups + self.n_groups

    def codes(self) -> np.ndarray:
        return unpack_codes(self.packed, self.bits).reshape(self.rows, self.cols)

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(NMQ_MAGIC, self.rows, self.cols, self.bits, self.group_size)
        return b"".join(
            (
                header,
                self.scales.astype("<f4").tobytes(),
                self.zero_points.astype(np.uint8).tobytes(),
                self.packed.tobytes(),
            )
        )

    @classmethod
    def from_bytes(cls, buf: bytes) -> "QuantizedMatrix":
        if len(buf) < _HEADER.size:
            raise FormatError("truncated NMQ1 header")
        magic, rows, cols, bits, group_size = _HEADER.unpack_from(buf)
        if magic != NMQ_MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if bits not in SUPPORTED_BITS or group_size == 0 or cols % group_size:
            raise FormatError("invalid NMQ1 header fields")
        n_groups = rows * cols // group_size
        n_packed = rows * cols * bits // 8
        if len(buf) != _HEADER.size + 5 * n_groups + n_packed:
            raise FormatError(
                f"NMQ1 body length {len(buf) - _HEADER.size} != {5 * n_groups + n_packed}"
            )
        off = _HEADER.size
        scales = np.frombuffer(buf, dtype="<f4", count=n_groups, offset=off).astype(np.float32)
        off += 4 * n_groups
        zps = np.frombuffer(buf, dtype=np.uint8, count=n_groups, offset=off).copy()
        off += n_groups
        packed = np.frombuffer(buf, dtype=np.uint8, count=n_packed, offset=off).copy()
        return cls(rows, cols, bits, group_size, packed, scales, zps)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "QuantizedMatrix":
        return cls.from_bytes(Path(path).read_bytes())


def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    flat = np.ascontiguousarray(codes, dtype=np.uint8).reshape(-1)
    per = 8 // bits
    if flat.size % per:
        raise ShapeError(f"{flat.size} codes do not fill whole bytes at {bits} bits")
    lanes = flat.reshape(-1, per)
    out = np.zeros(lanes.shape[0], dtype=np.uint8)
    for j in range(per):
        out |= lanes[:, j] << np.uint8(j * bits)
    return out


def unpack_codes(packed: np.ndarray, bits: int) -> np.ndarray:
    per = 8 // bits
    mask = np.uint8((1 << bits) - 1)
    shifts = np.arange(per, dtype=np.uint8) * np.uint8(bits)
    return ((packed[:, None] >> shifts[None, :]) & mask).reshape(-1)


def quantize_blockwise(
    m: MatrixLike, bits: int = 4, group_size: int = DEFAULT_GROUP_SIZE
) -> QuantizedMatrix:
    """Quantize ``m`` in groups of ``group_size`` elements along each row.

    The group range is widened to include zero so the zero point never
    clamps; a constant all-zero group gets scale 1.
    """
    m = as_dense(m)
    if bits not in SUPPORTED_BITS:
        raise ShapeError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    if group_size <= 0 or m.cols % group_size:
        raise ShapeError(f"group_size {group_size} does not divide cols {m.cols}")
    x = m.data
    if not np.all(np.isfinite(x)):
        raise DomainError("cannot quantize non-finite values")

    qmax = (1 << bits) - 1
    groups = x.reshape(m.rows, m.cols // group_size, group_size).astype(np.float64)
    lo = np.minimum(groups.min(axis=-1), 0.0)
    hi = np.maximum(groups.max(axis=-1), 0.0)
    scales = ((hi - lo) / qmax).astype(np.float32)
    scales[hi == lo] = 1.0
    s64 = scales.astype(np.float64)
    zps = np.clip(np.rint(-lo / s64), 0, qmax)
    codes = np.clip(np.rint(groups / s64[..., None]) + zps[..., None], 0, qmax).astype(np.uint8)
    return QuantizedMatrix(
        rows=m.rows,
        cols=m.cols,
        bits=bits,
        group_size=group_size,
        packed=pack_codes(codes, bits),
        scales=scales.reshape(-1),
        zero_points=zps.astype(np.uint8).reshape(-1),
    )


def _rescale_rows(q: QuantizedMatrix, r0: int, r1: int) -> np.ndarray:
    """Dequantize rows ``r0:r1`` of ``q`` straight from the packed codes."""
    rb = q.row_bytes
    codes = unpack_codes(q.packed[r0 * rb : r1 * rb], q.bits).reshape(r1 - r0, q.cols)
    gpr = q.groups_per_row
    scales = q.scales[r0 * gpr : r1 * gpr].reshape(r1 - r0, gpr)
    zps = q.zero_points[r0 * gpr : r1 * gpr].reshape(r1 - r0, gpr)
    centered = codes.astype(np.int16) - np.repeat(zps, q.group_size, axis=1).astype(np.int16)
    return np.repeat(scales, q.group_size, axis=1) * centered.astype(np.float32)


def dequantize_blockwise(q: QuantizedMatrix) -> DenseMatrix:
    if q.packed.size != q.rows * q.cols * q.bits // 8:
        raise FormatError("corrupt packed length")
    w = _rescale_rows(q, 0, q.rows)
    _alloc.note("dequant_full", w.nbytes)
    return DenseMatrix(w)


def _gelu(x: np.ndarray) -> np.ndarray:
    c = np.float32(np.sqrt(2.0 / np.pi))
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x * x * x)))


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (np.float32(1.0) + np.exp(-x))


def apply_activation(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == "none":
        return x
    if activation == "silu":
        return _silu(x)
    if activation == "gelu":
        return _gelu(x)
    raise ValueError(f"unsupported activation {activation!r}; expected one of {ACTIVATIONS}")


def _check_gemm(x: DenseMatrix, k: int, n: int, bias) -> Optional[np.ndarray]:
    if x.cols != k:
        raise ShapeError(f"x has {x.cols} columns but weights have {k} rows")
    if bias is None:
        return None
    b = np.asarray(bias, dtype=np.float32).reshape(-1)
    if b.size != n:
        raise ShapeError(f"bias length {b.size} != output width {n}")
    return b


def _epilogue(acc: np.ndarray, bias, activation: str, precision: str) -> DenseMatrix:
    if bias is not None:
        acc += bias
    return DenseMatrix(apply_activation(acc, activation), precision)


def _accumulate(x: np.ndarray, rows_of_w, n: int) -> np.ndarray:
    acc = np.zeros((x.shape[0], n), dtype=np.float32)
    for k, w_row in rows_of_w:
        acc += x[:, k : k + 1] * w_row
    return acc


def gemm_dense(x: MatrixLike, w: MatrixLike, bias=None, activation: str = "none") -> DenseMatrix:
    """x @ w for an unquantized ``w`` with the same k-ascending accumulation."""
    x, w = as_dense(x), as_dense(w)
    b = _check_gemm(x, w.rows, w.cols, bias)
    if activation not in ACTIVATIONS:
        raise ValueError(f"unsupported activation {activation!r}")
    wd = w.data
    acc = _accumulate(x.data, ((k, wd[k]) for k in range(w.rows)), w.cols)
    return _epilogue(acc, b, activation, x.precision)


def gemm_reference(x: MatrixLike, w: QuantizedMatrix, bias=None) -> DenseMatrix:
    x = as_dense(x)
    b = _check_gemm(x, w.rows, w.cols, bias)
    wd = dequantize_blockwise(w).data
    acc = _accumulate(x.data, ((k, wd[k]) for k in range(w.rows)), w.cols)
    return _epilogue(acc, b, "none", x.precision)


def _fused_rows(w: QuantizedMatrix, tile_k: int):
    for k0 in range(0, w.rows, tile_k):
        k1 = min(k0 + tile_k, w.rows)
        tile = _rescale_rows(w, k0, k1)
        _alloc.note("dequant_tile", tile.nbytes)
        for k in range(k0, k1):
            yield k, tile[k - k0]


def gemm_fused_dequant(
    x: MatrixLike,
    w: QuantizedMatrix,
    bias=None,
    activation: str = "none",
    tile_k: int = 8,
) -> DenseMatrix:
    """activation(x @ dequant(w) + bias) without materializing dequant(w).

    Weights are unpacked ``tile_k`` rows at a time; only that tile is ever
    dequantized.
    """
    x = as_dense(x)
    b = _check_gemm(x, w.rows, w.cols, bias)
    if activation not in ACTIVATIONS:
        raise ValueError(f"unsupported activation {activation!r}; expected one of {ACTIVATIONS}")
    acc = _accumulate(x.data, _fused_rows(w, max(1, tile_k)), w.cols)
    return _epilogue(acc, b, activation, x.precision)
