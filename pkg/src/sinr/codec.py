"""Quantization, the ``.sinr`` container and the compress/decompress pipelines.

Container layout (little-endian), wrapped as a whole in one Brotli stream::

    "SINR" | version u16 | flags u16 | a u16 | b u16 | l u16 | k u16
    | activation u8 | omega0 f64 | sigma f64 | pe_levels u8 | bitwidth u8
    | master_seed u64
    then for each of the l+2 layers:
        mode u8 | k1 u32 | k2 u32 | s u32
        | bias block | value block | indices u16[n_codes * s]
    | crc32 u32 (of everything before it)

A block is ``vmin f32 | vmax f32 | count u32`` followed by ``count`` u16
codes, or by ``count`` raw f32 values when the lossless flag is set.  Raw
layers (mode 2) keep every weight in the value block and carry no indices;
``k1``/``k2`` then hold the matrix rows/cols and ``s`` is 0.
"""
from __future__ import annotations

import io
import logging
import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum

import brotli
import numpy as np

from .inr import Activation, ActivationKind, Architecture, Network
from .sparse_coding import (
    MAX_INDEX, TINY_WIDTH, BudgetError, LayerCoding, LayerMode, assemble_layer,
    check_budget, encode_layer, layer_seed, layer_vectors, parameter_counts,
    reconstruct_batch, sweep_layer, SweepResult,
)
from .tensor_core import sample_dictionary

log = logging.getLogger(__name__)

MAGIC = b"SINR"
FORMAT_VERSION = 1
FLAG_LOSSLESS = 0x1
BROTLI_QUALITY = 11
BROTLI_WINDOW = 22

# The sparse-code k2 default: the widest dictionary 16-bit indices can address.
DEFAULT_CODEC_K2_FACTOR = None


class ContainerError(ValueError):
    """Malformed, truncated or inconsistent ``.sinr`` data."""


class StoredMode(IntEnum):
    PER_VECTOR = LayerMode.PER_VECTOR
    FLATTENED = LayerMode.FLATTENED
    RAW = 2


# ---------------------------------------------------------------------------
# Quantization


@dataclass(eq=False)
class QuantizedBlock:
    bitwidth: int
    vmin: float
    vmax: float
    codes: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, QuantizedBlock):
            return NotImplemented
        return (self.bitwidth == other.bitwidth and self.vmin == other.vmin
                and self.vmax == other.vmax and np.array_equal(self.codes, other.codes))


def _f32_floor(x: float) -> float:
    y = np.float32(x)
    if float(y) > x:
        y = np.nextafter(y, np.float32(-np.inf))
    return float(y)


def _f32_ceil(x: float) -> float:
    y = np.float32(x)
    if float(y) < x:
        y = np.nextafter(y, np.float32(np.inf))
    return float(y)


def quantize(values, bitwidth: int = 16) -> QuantizedBlock:
    """Uniform quantizer over the block's own ``[min, max]``.

    The range ends are widened to the nearest float32 so they survive
    serialization unchanged.  Codes round half away from zero; a constant
    block maps to all-zero codes.
    """
    if not 1 <= bitwidth <= 16:
        raise ValueError(f"bitwidth must be in [1, 16], got {bitwidth}")
    v = np.asarray(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot quantize non-finite values")
    if v.size == 0:
        return QuantizedBlock(bitwidth, 0.0, 0.0, np.zeros(0, dtype=np.uint16))
    lo, hi = float(v.min()), float(v.max())
    vmin, vmax = _f32_floor(lo), _f32_ceil(hi)
    if lo == hi and float(np.float32(lo)) == lo:
        vmin = vmax = lo
    levels = (1 << bitwidth) - 1
    if vmax == vmin:
        codes = np.zeros(v.size, dtype=np.uint16)
    else:
        scaled = (v - vmin) / (vmax - vmin) * levels
        codes = np.clip(np.floor(scaled + 0.5), 0, levels).astype(np.uint16)
    return QuantizedBlock(bitwidth, vmin, vmax, codes)


def dequantize(block: QuantizedBlock) -> np.ndarray:
    levels = (1 << block.bitwidth) - 1
    codes = block.codes.astype(np.float64)
    if block.vmax == block.vmin:
        return np.full(codes.shape, block.vmin)
    return block.vmin + codes / levels * (block.vmax - block.vmin)


# ---------------------------------------------------------------------------
# Container


@dataclass(eq=False)
class LayerRecord:
    mode: StoredMode
    k1: int
    k2: int
    s: int
    bias: QuantizedBlock | np.ndarray
    values: QuantizedBlock | np.ndarray
    indices: np.ndarray  # n_codes x s, uint16

    def __eq__(self, other):
        if not isinstance(other, LayerRecord):
            return NotImplemented
        return ((self.mode, self.k1, self.k2, self.s) == (other.mode, other.k1, other.k2, other.s)
                and _block_eq(self.bias, other.bias) and _block_eq(self.values, other.values)
                and np.array_equal(self.indices, other.indices))


def _block_eq(a, b) -> bool:
    if isinstance(a, QuantizedBlock) or isinstance(b, QuantizedBlock):
        return a == b
    return np.array_equal(a, b)


@dataclass(eq=False)
class CompressedINR:
    arch: Architecture
    master_seed: int
    bitwidth: int
    lossless: bool
    layers: list[LayerRecord]
    format_version: int = FORMAT_VERSION

    def __eq__(self, other):
        if not isinstance(other, CompressedINR):
            return NotImplemented
        return ((self.arch, self.master_seed, self.bitwidth, self.lossless, self.format_version)
                == (other.arch, other.master_seed, other.bitwidth, other.lossless,
                    other.format_version)
                and self.layers == other.layers)


def _write_block(buf: io.BytesIO, block, lossless: bool) -> None:
    if lossless:
        arr = np.asarray(block, dtype="<f4")
        buf.write(struct.pack("<ffI", 0.0, 0.0, arr.size))
        buf.write(arr.tobytes())
    else:
        buf.write(struct.pack("<ffI", block.vmin, block.vmax, block.codes.size))
        buf.write(block.codes.astype("<u2").tobytes())


def serialize(c: CompressedINR) -> bytes:
    """Deterministic byte image of a container (before entropy coding)."""
    a = c.arch
    act = a.activation
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HH", c.format_version, FLAG_LOSSLESS if c.lossless else 0))
    buf.write(struct.pack("<HHHH", a.input_dim, a.output_dim, a.hidden_layers, a.width))
    buf.write(struct.pack("<BddBB", int(act.kind), act.omega0, act.sigma, a.pe_levels, c.bitwidth))
    buf.write(struct.pack("<Q", c.master_seed))
    for rec in c.layers:
        buf.write(struct.pack("<BIII", int(rec.mode), rec.k1, rec.k2, rec.s))
        _write_block(buf, rec.bias, c.lossless)
        _write_block(buf, rec.values, c.lossless)
        buf.write(np.asarray(rec.indices, dtype="<u2").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerError(f"truncated container at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(size * count), dtype=dtype).copy()


def _read_block(r: _Reader, lossless: bool, bitwidth: int, expected: int, what: str):
    vmin, vmax, count = r.unpack("<ffI")
    if count != expected:
        raise ContainerError(f"{what}: expected {expected} entries, found {count}")
    if lossless:
        vals = r.array("<f4", count).astype(np.float64)
        if not np.all(np.isfinite(vals)):
            raise ContainerError(f"{what}: non-finite value")
        return vals
    if not (np.isfinite(vmin) and np.isfinite(vmax) and vmin <= vmax):
        raise ContainerError(f"{what}: invalid range [{vmin}, {vmax}]")
    codes = r.array("<u2", count).astype(np.uint16)
    if bitwidth < 16 and count and int(codes.max()) >= (1 << bitwidth):
        raise ContainerError(f"{what}: code exceeds bitwidth {bitwidth}")
    return QuantizedBlock(bitwidth, float(vmin), float(vmax), codes)


def _expected_layout(mode: StoredMode, shape: tuple[int, int]):
    rows, cols = shape
    if mode == StoredMode.RAW:
        return rows, cols, 1
    if mode == StoredMode.FLATTENED:
        return rows * cols, None, 1
    return max(rows, cols), None, min(rows, cols)


def deserialize(data: bytes) -> CompressedINR:
    """Parse and validate a container produced by :func:`serialize`."""
    if len(data) < 8:
        raise ContainerError("container too short")
    body, crc = data[:-4], struct.unpack("<I", data[-4:])[0]
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise ContainerError("bad magic (not a SINR container)")
    version, flags = r.unpack("<HH")
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported format version {version}")
    if zlib.crc32(body) != crc:
        raise ContainerError("checksum mismatch (corrupted container)")
    if flags & ~FLAG_LOSSLESS:
        raise ContainerError(f"unknown flags {flags:#x}")
    lossless = bool(flags & FLAG_LOSSLESS)
    a, b, l, k = r.unpack("<HHHH")
    kind, omega0, sigma, pe, bitwidth = r.unpack("<BddBB")
    (master_seed,) = r.unpack("<Q")
    try:
        arch = Architecture(a, b, l, k, Activation(ActivationKind(kind), omega0, sigma), pe)
    except ValueError as exc:
        raise ContainerError(f"invalid architecture: {exc}") from None
    if not 1 <= bitwidth <= 16:
        raise ContainerError(f"invalid bitwidth {bitwidth}")
    layers = []
    for i, shape in enumerate(arch.layer_shapes()):
        mode_raw, k1, k2, s = r.unpack("<BIII")
        try:
            mode = StoredMode(mode_raw)
        except ValueError:
            raise ContainerError(f"layer {i}: unknown mode {mode_raw}") from None
        exp_k1, exp_k2, n_codes = _expected_layout(mode, shape)
        if k1 != exp_k1 or (exp_k2 is not None and k2 != exp_k2):
            raise ContainerError(f"layer {i}: header ({k1}, {k2}) does not match shape {shape}")
        if mode == StoredMode.RAW:
            if s != 0:
                raise ContainerError(f"layer {i}: raw layer with s={s}")
            n_values, n_idx = shape[0] * shape[1], 0
        else:
            try:
                check_budget(s, k1)
            except BudgetError as exc:
                raise ContainerError(f"layer {i}: {exc}") from None
            if not k1 < k2 <= MAX_INDEX:
                raise ContainerError(f"layer {i}: invalid dictionary width k2={k2}")
            n_values = n_idx = n_codes * s
        bias = _read_block(r, lossless, bitwidth, shape[0], f"layer {i} bias")
        values = _read_block(r, lossless, bitwidth, n_values, f"layer {i} values")
        idx = r.array("<u2", n_idx).astype(np.uint16)
        if mode != StoredMode.RAW:
            idx = idx.reshape(n_codes, s)
            if np.any(idx.astype(np.int64) >= k2) or np.any(np.diff(idx.astype(np.int64), axis=1) <= 0):
                raise ContainerError(f"layer {i}: indices out of range or not increasing")
        layers.append(LayerRecord(mode, k1, k2, s, bias, values, idx))
    if r.pos != len(body):
        raise ContainerError(f"{len(body) - r.pos} trailing bytes")
    return CompressedINR(arch, master_seed, bitwidth, lossless, layers, version)


def entropy_wrap(payload: bytes) -> bytes:
    return brotli.compress(payload, quality=BROTLI_QUALITY, lgwin=BROTLI_WINDOW)


def entropy_unwrap(data: bytes) -> bytes:
    try:
        return brotli.decompress(data)
    except brotli.error as exc:
        raise ContainerError(f"malformed Brotli stream: {exc}") from None


# ---------------------------------------------------------------------------
# Pipelines


@dataclass
class CodecConfig:
    """How to compress a network.

    ``s`` may be a single sparsity for every coded layer, a ``{layer: s}``
    mapping, or ``None`` to sweep each layer for the smallest ``s`` meeting
    ``rel_tol``.  ``k2_factor=None`` uses the widest dictionary that 16-bit
    indices allow.  The input layer is stored raw unless
    ``code_input_layer`` is set: it holds only ``a*k`` weights but its errors
    are amplified by the first activation's frequency.
    """

    s: int | dict | None = None
    rel_tol: float = 0.02
    k2_factor: float | None = DEFAULT_CODEC_K2_FACTOR
    bitwidth: int = 16
    master_seed: int = 0
    lossless: bool = False
    width_threshold: int = TINY_WIDTH
    code_input_layer: bool = False
    raw: bool = False  # keep every layer raw (checkpoints, baselines)
    s_min: int = 2
    sweep_step: int | None = None


@dataclass
class LayerReport:
    index: int
    mode: str
    k1: int
    k2: int
    s: int
    n_codes: int
    rel_err: float  # worst per-vector relative error before quantization
    met: bool
    stored_scalars: int
    sweep: SweepResult | None = None  # full error curve when s was swept


@dataclass
class CompressionReport:
    n_bytes: int
    T_s: int
    T_sinr: int
    layers: list[LayerReport] = field(default_factory=list)

    @property
    def worst_rel_err(self) -> float:
        errs = [lr.rel_err for lr in self.layers if lr.mode != "RAW"]
        return max(errs) if errs else 0.0

    @property
    def s_per_layer(self) -> dict[int, int]:
        return {lr.index: lr.s for lr in self.layers}


def k2_factor_or_max(k2_factor: float | None, k1: int) -> float:
    if k2_factor is None:
        return MAX_INDEX / k1
    return k2_factor


def _raw_record(W: np.ndarray, bias: np.ndarray, cfg: CodecConfig) -> LayerRecord:
    rows, cols = W.shape
    vals = W.ravel()
    if cfg.lossless:
        return LayerRecord(StoredMode.RAW, rows, cols, 0, bias.astype(np.float32),
                           vals.astype(np.float32), np.zeros(0, dtype=np.uint16))
    return LayerRecord(StoredMode.RAW, rows, cols, 0, quantize(bias, cfg.bitwidth),
                       quantize(vals, cfg.bitwidth), np.zeros(0, dtype=np.uint16))


def _coded_record(lc: LayerCoding, bias: np.ndarray, cfg: CodecConfig) -> LayerRecord:
    idx = np.stack([c.indices for c in lc.codes]).astype(np.uint16)
    vals = np.concatenate([c.values for c in lc.codes])
    if cfg.lossless:
        return LayerRecord(StoredMode(lc.mode), lc.k1, lc.k2, lc.s, bias.astype(np.float32),
                           vals.astype(np.float32), idx)
    return LayerRecord(StoredMode(lc.mode), lc.k1, lc.k2, lc.s, quantize(bias, cfg.bitwidth),
                       quantize(vals, cfg.bitwidth), idx)


def _layer_s(cfg: CodecConfig, index: int):
    if isinstance(cfg.s, dict):
        return cfg.s.get(index)
    return cfg.s


def build_container(net: Network, cfg: CodecConfig) -> tuple[CompressedINR, CompressionReport]:
    """Sparse-code (or keep raw) every layer and assemble the container."""
    arch = net.arch
    records, reports = [], []
    for i, (W, bias) in enumerate(zip(net.weights, net.biases)):
        mode, V = layer_vectors(W, cfg.width_threshold)
        k1, n_codes = V.shape
        keep_raw = cfg.raw or (i == 0 and not cfg.code_input_layer) or k1 < 3
        if keep_raw:
            records.append(_raw_record(W, bias, cfg))
            reports.append(LayerReport(i, "RAW", W.shape[0], W.shape[1], 0, 1, 0.0, True, W.size))
            continue
        seed = layer_seed(cfg.master_seed, i)
        factor = k2_factor_or_max(cfg.k2_factor, k1)
        s = _layer_s(cfg, i)
        sweep = None
        try:
            if s is None:
                sweep, lc = sweep_layer(W, seed, cfg.rel_tol, cfg.width_threshold, factor,
                                        cfg.s_min, cfg.sweep_step, layer_index=i)
                met = sweep.met
                if not met:
                    log.warning("layer %d: rel_tol %.3g not met, using s=%d (err %.3g)",
                                i, cfg.rel_tol, sweep.s_opt, sweep.rel_err)
            else:
                lc = encode_layer(W, seed, s, cfg.width_threshold, factor, layer_index=i)
                met = lc.max_rel_err <= cfg.rel_tol
        except BudgetError as exc:
            raise BudgetError(f"layer {i}: {exc}") from None
        records.append(_coded_record(lc, bias, cfg))
        reports.append(LayerReport(i, lc.mode.name, lc.k1, lc.k2, lc.s, len(lc.codes),
                                   lc.max_rel_err, met, lc.stored_scalars, sweep))
    container = CompressedINR(arch, cfg.master_seed, cfg.bitwidth, cfg.lossless, records)
    T_s = parameter_counts(arch.encoded_dim, arch.output_dim, arch.hidden_layers,
                           arch.width, 1)["T_s"]
    report = CompressionReport(0, T_s, sum(lr.stored_scalars for lr in reports), reports)
    return container, report


def compress_inr(net: Network, cfg: CodecConfig | None = None) -> tuple[bytes, CompressionReport]:
    """Network -> ``.sinr`` bytes, plus a report of what each layer became."""
    cfg = cfg or CodecConfig()
    container, report = build_container(net, cfg)
    data = entropy_wrap(serialize(container))
    report.n_bytes = len(data)
    return data, report


def _block_values(block) -> np.ndarray:
    if isinstance(block, QuantizedBlock):
        return dequantize(block)
    return np.asarray(block, dtype=np.float64)


def decode_container(c: CompressedINR) -> Network:
    weights, biases = [], []
    for i, (rec, shape) in enumerate(zip(c.layers, c.arch.layer_shapes())):
        vals = _block_values(rec.values)
        if rec.mode == StoredMode.RAW:
            W = vals.reshape(shape)
        else:
            D = sample_dictionary(layer_seed(c.master_seed, i), rec.k1, rec.k2)
            V = reconstruct_batch(D, rec.indices, vals.reshape(-1, rec.s))
            W = assemble_layer(LayerMode(int(rec.mode)), V, shape)
        weights.append(W)
        biases.append(_block_values(rec.bias))
    try:
        return Network(c.arch, weights, biases)
    except ValueError as exc:
        raise ContainerError(f"decoded network is invalid: {exc}") from None


def decompress_inr(data: bytes) -> Network:
    """``.sinr`` bytes -> forward-ready network; needs nothing but the bytes."""
    return decode_container(deserialize(entropy_unwrap(data)))


def save_checkpoint(net: Network) -> bytes:
    """Uncompressed checkpoint: every layer raw, weights as float32."""
    return compress_inr(net, CodecConfig(raw=True, lossless=True))[0]


def load_checkpoint(data: bytes) -> Network:
    return decompress_inr(data)


def baseline_bytes(net: Network, bitwidth: int = 16) -> bytes:
    """The quantize-then-Brotli baseline: raw weights, same quantizer and coder."""
    return compress_inr(net, CodecConfig(raw=True, bitwidth=bitwidth))[0]
