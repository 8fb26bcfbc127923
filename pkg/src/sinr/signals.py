"""Images, occupancy grids, procedural test signals and their metrics."""
from __future__ import annotations

import math
import os
import re
import struct
from dataclasses import dataclass

import numpy as np

from .inr import Network, coordinate_grid, forward

PSNR_CAP = 200.0
VOXEL_MAGIC = b"SVOX"


class SignalFormatError(ValueError):
    pass


@dataclass(eq=False)
class ImageSignal:
    """``pixels`` has shape ``(height, width, channels)`` with values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"expected (h, w, 1|3) pixels, got {px.shape}")
        if px.size and (px.min() < 0 or px.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def targets(self) -> np.ndarray:
        """``N x channels`` training targets, row-major like :func:`coordinate_grid`."""
        return self.pixels.reshape(-1, self.channels)

    def coords(self) -> np.ndarray:
        return coordinate_grid([self.height, self.width])


@dataclass(eq=False)
class OccupancyGrid:
    """Binary voxels of shape ``(nx, ny, nz)``; x is the slowest axis."""

    voxels: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3:
            raise ValueError(f"expected a 3-D grid, got shape {v.shape}")
        if v.dtype != bool:
            if not np.all((v == 0) | (v == 1)):
                raise ValueError("occupancy values must be 0 or 1")
            v = v.astype(bool)
        self.voxels = v

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def targets(self) -> np.ndarray:
        return self.voxels.reshape(-1, 1).astype(np.float64)

    def coords(self) -> np.ndarray:
        return coordinate_grid(self.dims)


# ---------------------------------------------------------------------------
# File formats


def _atomic_write(path, data: bytes) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


_PNM_HEADER = re.compile(rb"(P[56])(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)"
                         rb"(?:\s+|#[^\n]*\n)+(\d+)\s")


def decode_pnm(data: bytes) -> ImageSignal:
    m = _PNM_HEADER.match(data)
    if not m:
        raise SignalFormatError("malformed PGM/PPM header")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise SignalFormatError(f"unsupported maxval {maxval} (only 255)")
    if w < 1 or h < 1:
        raise SignalFormatError("image dimensions must be positive")
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    payload = data[m.end():m.end() + need]
    if len(payload) < need:
        raise SignalFormatError(f"truncated payload: {len(payload)} of {need} bytes")
    px = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels) / 255.0
    return ImageSignal(px)


def encode_pnm(img: ImageSignal) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    body = np.clip(np.floor(img.pixels * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return b"%s\n%d %d\n255\n" % (magic, img.width, img.height) + body.tobytes()


def load_image(path) -> ImageSignal:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def save_image(img: ImageSignal, path) -> None:
    _atomic_write(path, encode_pnm(img))


def decode_voxels(data: bytes) -> OccupancyGrid:
    if data[:4] != VOXEL_MAGIC:
        raise SignalFormatError("bad magic (not an SVOX file)")
    if len(data) < 16:
        raise SignalFormatError("truncated SVOX header")
    nx, ny, nz = struct.unpack("<III", data[4:16])
    payload = np.frombuffer(data[16:], dtype=np.uint8)
    if payload.size != nx * ny * nz:
        raise SignalFormatError(f"expected {nx * ny * nz} voxels, found {payload.size}")
    if np.any(payload > 1):
        raise SignalFormatError("voxel bytes must be 0 or 1")
    return OccupancyGrid(payload.reshape(nx, ny, nz).astype(bool))


def encode_voxels(grid: OccupancyGrid) -> bytes:
    return VOXEL_MAGIC + struct.pack("<III", *grid.dims) + grid.voxels.astype(np.uint8).tobytes()


def load_voxels(path) -> OccupancyGrid:
    with open(path, "rb") as fh:
        return decode_voxels(fh.read())


def save_voxels(grid: OccupancyGrid, path) -> None:
    _atomic_write(path, encode_voxels(grid))


def load_signal(path) -> ImageSignal | OccupancyGrid:
    """Dispatch on file content: SVOX magic, otherwise PGM/PPM."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] == VOXEL_MAGIC:
        return decode_voxels(data)
    return decode_pnm(data)


# ---------------------------------------------------------------------------
# Metrics


def mse(ref: ImageSignal, test: ImageSignal) -> float:
    if ref.pixels.shape != test.pixels.shape:
        raise ValueError(f"image shapes differ: {ref.pixels.shape} vs {test.pixels.shape}")
    d = ref.pixels - test.pixels
    return float(np.mean(d * d))


def psnr(ref: ImageSignal, test: ImageSignal) -> float:
    """PSNR in dB for signals in [0, 1]; identical images give ``inf``."""
    err = mse(ref, test)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def display_psnr(value: float) -> float:
    return min(value, PSNR_CAP)


def iou(a: OccupancyGrid, b: OccupancyGrid) -> float:
    if a.dims != b.dims:
        raise ValueError(f"grid shapes differ: {a.dims} vs {b.dims}")
    union = np.count_nonzero(a.voxels | b.voxels)
    if union == 0:
        return 1.0
    return np.count_nonzero(a.voxels & b.voxels) / union


def bpp(file_bytes: int, width: int, height: int) -> float:
    if width < 1 or height < 1:
        raise ValueError("image dimensions must be positive")
    return 8.0 * file_bytes / (width * height)


# ---------------------------------------------------------------------------
# Rendering


def _forward_chunked(net: Network, coords: np.ndarray, chunk: int = 1 << 16) -> np.ndarray:
    return np.concatenate([forward(net, coords[i:i + chunk])
                           for i in range(0, len(coords), chunk)])


def render_inr_image(net: Network, width: int, height: int, channels: int = 1) -> ImageSignal:
    if net.arch.input_dim != 2 or net.arch.output_dim != channels:
        raise ValueError(f"network maps {net.arch.input_dim} -> {net.arch.output_dim}, "
                         f"an image needs 2 -> {channels}")
    out = _forward_chunked(net, coordinate_grid([height, width]))
    return ImageSignal(np.clip(out, 0.0, 1.0).reshape(height, width, channels))


def render_inr_occupancy(net: Network, dims, threshold: float = 0.5) -> OccupancyGrid:
    if net.arch.input_dim != 3 or net.arch.output_dim != 1:
        raise ValueError(f"network maps {net.arch.input_dim} -> {net.arch.output_dim}, "
                         "an occupancy field needs 3 -> 1")
    dims = tuple(dims)
    out = _forward_chunked(net, coordinate_grid(dims))
    return OccupancyGrid((out[:, 0] > threshold).reshape(dims))


# ---------------------------------------------------------------------------
# Procedural signals


def procedural_image(size: int = 256, seed: int = 0, channels: int = 1,
                     bumps: int = 24, noise_cutoff: float = 0.1) -> ImageSignal:
    """Smooth gradient + Gaussian bumps + band-limited noise, clipped to [0, 1].

    ``noise_cutoff`` is in cycles per pixel of a 256-wide image, so the
    content scales with ``size``.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    planes = []
    for _ in range(channels):
        gx, gy = rng.uniform(-0.15, 0.15, 2)
        img = 0.5 + gx * xx + gy * yy
        for _ in range(bumps):
            cx, cy = rng.uniform(-0.9, 0.9, 2)
            width = rng.uniform(0.05, 0.3)
            amp = rng.uniform(-0.25, 0.25)
            img += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * width * width))
        freq = np.fft.fftfreq(size) * 256 / size
        radius = np.hypot(freq[:, None], freq[None, :])
        noise = np.real(np.fft.ifft2(np.fft.fft2(rng.standard_normal((size, size)))
                                     * (radius < noise_cutoff)))
        if noise.std() > 0:  # tiny images may keep only the DC term
            img += 0.06 * noise / noise.std()
        planes.append(np.clip(img, 0.0, 1.0))
    return ImageSignal(np.stack(planes, axis=-1))


def sphere_grid(n: int = 64, radius: float = 0.6, center=(0.0, 0.0, 0.0)) -> OccupancyGrid:
    """Voxels of an ``n^3`` grid over ``[-1, 1]^3`` whose centers lie inside the sphere."""
    pts = coordinate_grid([n, n, n]) - np.asarray(center)
    inside = np.einsum("ij,ij->i", pts, pts) <= radius * radius
    return OccupancyGrid(inside.reshape(n, n, n))
