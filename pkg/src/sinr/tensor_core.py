"""Seeded random numbers, Gaussian dictionaries and small least-squares solves.

The encoder and decoder of a ``.sinr`` file never exchange a dictionary; both
regenerate it from ``(seed, k1, k2)``.  Everything here is therefore pinned
down to the bit: SplitMix64 for the integer stream, Box-Muller for normals,
column-major fill order.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
TWO_POW_M53 = 2.0 ** -53

# Columns generated per chunk when sampling large dictionaries.
_CHUNK_ENTRIES = 1 << 22


class RankDeficientError(np.linalg.LinAlgError):
    """Raised when a least-squares basis has (numerically) dependent columns."""


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def splitmix64_next(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 state once.

    Returns ``(new_state, output)``; both are 64-bit unsigned ints.
    """
    state = (state + GOLDEN_GAMMA) & MASK64
    return state, _mix64(state)


@dataclass
class RngState:
    """Mutable convenience wrapper around a SplitMix64 state."""

    state: int = 0

    def __post_init__(self):
        self.state &= MASK64

    def next_u64(self) -> int:
        self.state, out = splitmix64_next(self.state)
        return out

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * TWO_POW_M53


# Box-Muller needs log, sin and cos.  Platform math libraries (and numpy's
# SIMD loops) disagree in the last bit, which would let two machines build
# different dictionaries from one seed.  The versions below use only IEEE
# +, -, *, /, sqrt and exact range reduction, so every platform agrees.

_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10
_SQRT_HALF = math.sqrt(0.5)
_TWO_PI = 2.0 * math.pi
_ATANH_TERMS = [1.0 / (2 * n + 1) for n in range(13)]
_SIN_TERMS = [(-1) ** n / math.factorial(2 * n + 1) for n in range(11)]
_COS_TERMS = [(-1) ** n / math.factorial(2 * n) for n in range(11)]


def _horner(x2: np.ndarray, coeffs) -> np.ndarray:
    acc = np.full_like(x2, coeffs[-1])
    for c in reversed(coeffs[:-1]):
        acc = acc * x2 + c
    return acc


def det_log(u: np.ndarray) -> np.ndarray:
    """Natural log of positive finite ``u``, reproducible on every platform."""
    u = np.asarray(u, dtype=np.float64)
    m, e = np.frexp(u)  # u = m * 2**e, m in [0.5, 1)
    low = m < _SQRT_HALF
    m = np.where(low, m * 2.0, m)
    e = (e - low).astype(np.float64)
    t = (m - 1.0) / (m + 1.0)
    log_m = 2.0 * t * _horner(t * t, _ATANH_TERMS)
    return e * _LN2_HI + (e * _LN2_LO + log_m)


def det_sincos_turns(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(sin(2 pi u), cos(2 pi u))`` for ``u`` in [0, 1), reproducible everywhere.

    The reduction to an octant happens on ``u`` itself, where it is exact.
    """
    u = np.asarray(u, dtype=np.float64)
    quadrant = np.floor(u * 4.0)
    f = u - quadrant * 0.25  # [0, 1/4), exact
    flip = f > 0.125
    f = np.where(flip, 0.25 - f, f)  # exact: both on the same binade grid
    x = f * _TWO_PI  # [0, pi/4]
    x2 = x * x
    s = x * _horner(x2, _SIN_TERMS)
    c = _horner(x2, _COS_TERMS)
    s, c = np.where(flip, c, s), np.where(flip, s, c)
    q = quadrant.astype(np.int64) & 3
    sin = np.choose(q, [s, c, -s, -c])
    cos = np.choose(q, [c, -s, -c, s])
    return sin, cos


def _box_muller(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    u1 = np.maximum((a >> np.uint64(11)).astype(np.float64) * TWO_POW_M53, TWO_POW_M53)
    u2 = (b >> np.uint64(11)).astype(np.float64) * TWO_POW_M53
    rad = np.sqrt(-2.0 * det_log(u1))
    sin, cos = det_sincos_turns(u2)
    return rad * cos, rad * sin


def gaussian_pair(state: int) -> tuple[int, float, float]:
    """Draw two standard normals with Box-Muller; consumes two outputs."""
    state, a = splitmix64_next(state)
    state, b = splitmix64_next(state)
    z0, z1 = _box_muller(np.array([a], dtype=np.uint64), np.array([b], dtype=np.uint64))
    return state, float(z0[0]), float(z1[0])


def splitmix64_stream(seed: int, start: int, count: int) -> np.ndarray:
    """Outputs ``start .. start+count-1`` (0-based) of the generator seeded with ``seed``.

    SplitMix64 is counter based (state_n = seed + n*gamma), so the stream can
    be produced in bulk with wrapping uint64 arithmetic.
    """
    n = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & MASK64) + n * np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


def gaussian_stream(seed: int, start_pair: int, pairs: int) -> np.ndarray:
    """Box-Muller normals for pairs ``start_pair ..``, interleaved ``(z0, z1, z0, z1, ...)``.

    Matches repeated calls to :func:`gaussian_pair` bit for bit.
    """
    raw = splitmix64_stream(seed, 2 * start_pair, 2 * pairs)
    z0, z1 = _box_muller(raw[0::2], raw[1::2])
    out = np.empty(2 * pairs)
    out[0::2] = z0
    out[1::2] = z1
    return out


@dataclass(frozen=True, eq=False)
class Dictionary:
    """A ``k1 x k2`` matrix of unit-norm Gaussian atoms regenerated from a seed."""

    seed: int
    k1: int
    k2: int
    atoms: np.ndarray = field(repr=False)

    def __eq__(self, other):
        if not isinstance(other, Dictionary):
            return NotImplemented
        return ((self.seed, self.k1, self.k2) == (other.seed, other.k1, other.k2)
                and np.array_equal(self.atoms, other.atoms))

    def __hash__(self):
        return hash((self.seed, self.k1, self.k2))


def _sample_atoms(seed: int, k1: int, k2: int) -> np.ndarray:
    pairs_per_col = (k1 + 1) // 2
    atoms = np.empty((k1, k2))
    cols_per_chunk = max(1, _CHUNK_ENTRIES // (2 * pairs_per_col))
    for c0 in range(0, k2, cols_per_chunk):
        c1 = min(k2, c0 + cols_per_chunk)
        vals = gaussian_stream(seed, c0 * pairs_per_col, (c1 - c0) * pairs_per_col)
        block = vals.reshape(c1 - c0, 2 * pairs_per_col)[:, :k1]
        atoms[:, c0:c1] = block.T
    # Fixed summation order (row by row) so the norms do not depend on SIMD width.
    sq = np.zeros(k2)
    for row in atoms:
        sq += row * row
    atoms /= np.sqrt(sq)
    return atoms


@functools.lru_cache(maxsize=4)
def _cached_atoms(seed: int, k1: int, k2: int) -> np.ndarray:
    atoms = _sample_atoms(seed, k1, k2)
    atoms.setflags(write=False)
    return atoms


def sample_dictionary(seed: int, k1: int, k2: int) -> Dictionary:
    """Build the seeded Gaussian dictionary.

    Columns are filled top to bottom from consecutive Box-Muller pairs (the
    spare value of a final odd pair in each column is dropped), then each
    column is scaled to unit L2 norm.

    Raises
    ------
    ValueError
        If ``k1 < 1`` or ``k2 <= k1`` (the dictionary must be overcomplete).
    """
    if k1 < 1:
        raise ValueError(f"k1 must be positive, got {k1}")
    if k2 <= k1:
        raise ValueError(f"dictionary must be overcomplete: k2={k2} <= k1={k1}")
    seed &= MASK64
    return Dictionary(seed, k1, k2, _cached_atoms(seed, k1, k2))


def least_squares(basis: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Solve ``argmin_c ||basis @ c - target||_2`` through a thin QR factorization.

    Raises :class:`RankDeficientError` when the Gram matrix of ``basis`` has a
    pivot below ``1e-12`` times its largest diagonal entry.
    """
    basis = np.asarray(basis, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if basis.ndim == 1:
        basis = basis[:, None]
    k1, t = basis.shape
    if t > k1:
        raise RankDeficientError(f"{t} columns cannot be independent in R^{k1}")
    if t == 0:
        return np.zeros(0)
    q, r = np.linalg.qr(basis)
    # Gram pivots are the squared diagonal of R.
    pivots = np.abs(np.diag(r)) ** 2
    largest = np.max(np.einsum("ij,ij->j", basis, basis))
    if largest == 0.0 or np.min(pivots) < 1e-12 * largest:
        raise RankDeficientError("basis columns are numerically dependent")
    return np.linalg.solve(r, q.T @ target) if t > 1 else (q.T @ target) / r[0, 0]
