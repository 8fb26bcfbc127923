"""Sparse codes of INR weight vectors over a seeded Gaussian dictionary.

Each weight vector ``w`` (length ``k1``) is replaced by ``s`` coefficients and
their atom indices such that ``w ~= A x``.  Storing both halves costs ``2s``
scalars, so a code is only worth keeping when ``2s < k1``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .tensor_core import Dictionary, RankDeficientError, least_squares, sample_dictionary

log = logging.getLogger(__name__)

MAX_INDEX = 1 << 16
TINY_WIDTH = 50
DEFAULT_K2_FACTOR = 2.0


class BudgetError(ValueError):
    """A sparsity level that would not save storage (``2s >= k1``)."""


class CodingError(RuntimeError):
    """OMP failure annotated with where in the network it happened."""


class LayerMode(IntEnum):
    PER_VECTOR = 0
    FLATTENED = 1


def check_budget(s: int, k1: int) -> None:
    if s < 1:
        raise BudgetError(f"sparsity must be >= 1, got s={s}")
    if 2 * s >= k1:
        raise BudgetError(f"2s < k1 violated: s={s}, k1={k1}")


@dataclass(frozen=True, eq=False)
class SparseCode:
    """``s`` nonzero coefficients of a length-``k2`` code, with sorted indices."""

    k1: int
    k2: int
    indices: np.ndarray
    values: np.ndarray
    truncated: bool = False  # OMP stopped early on a dependent atom

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ValueError("indices and values must be 1-D and equally long")
        check_budget(len(idx), self.k1)
        if self.k2 > MAX_INDEX:
            raise ValueError(f"k2={self.k2} does not fit 16-bit indices")
        if np.any(np.diff(idx) <= 0):
            raise ValueError("indices must be strictly increasing")
        if idx[0] < 0 or idx[-1] >= self.k2:
            raise IndexError(f"atom index out of range [0, {self.k2})")

    @property
    def s(self) -> int:
        return len(self.indices)

    def __eq__(self, other):
        if not isinstance(other, SparseCode):
            return NotImplemented
        return (self.k1 == other.k1 and self.k2 == other.k2
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.values, other.values))

    def dense(self) -> np.ndarray:
        x = np.zeros(self.k2)
        x[self.indices] = self.values
        return x


@dataclass
class OMPTrace:
    """Per-iteration diagnostics of a batched OMP run.

    ``rel_err[t, v]`` is ``||r||/||w||`` for vector ``v`` after ``t+1`` atoms
    (NaN once that vector stopped early).
    """

    rel_err: np.ndarray
    ortho: np.ndarray  # max |A_S^T r| / ||w|| after each refit
    order: np.ndarray  # n x s atom picks in selection order, -1 after an early stop

    def error_at(self, s: int) -> np.ndarray:
        """Worst available error per vector using at most ``s`` atoms."""
        block = self.rel_err[:s]
        out = np.empty(block.shape[1])
        for v in range(block.shape[1]):
            col = block[:, v]
            col = col[~np.isnan(col)]
            out[v] = col[-1] if len(col) else 1.0
        return out


def omp_batch(dictionary: Dictionary, W: np.ndarray, s: int) -> tuple[list[SparseCode], OMPTrace]:
    """Run OMP on every column of ``W`` (shape ``k1 x n``) with ``s`` atoms.

    The atom search is shared across columns as one matrix product per
    iteration; the refit keeps an incrementally orthogonalized basis per
    column and solves the final coefficients with :func:`least_squares`.
    Ties in correlation go to the lowest atom index.
    """
    A = dictionary.atoms
    k1, k2 = A.shape
    W = np.asarray(W, dtype=np.float64)
    if W.ndim == 1:
        W = W[:, None]
    if W.shape[0] != k1:
        raise ValueError(f"vector length {W.shape[0]} != dictionary k1 {k1}")
    check_budget(s, k1)
    n = W.shape[1]
    norms = np.linalg.norm(W, axis=0)
    if np.any(norms == 0):
        raise ValueError("cannot sparse-code an all-zero vector")

    Q = np.zeros((n, k1, s))
    support = np.full((n, s), -1, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    count = np.zeros(n, dtype=np.int64)
    R = W.T.copy()  # residuals, one per row
    rel_err = np.full((s, n), np.nan)
    ortho = np.zeros(s)
    taken = np.zeros((n, k2), dtype=bool)

    for t in range(s):
        if not active.any():
            break
        corr = np.abs(R @ A)
        corr[taken] = -np.inf
        pick = np.argmax(corr, axis=1)
        atom = A[:, pick].T.copy()
        Qt = Q[:, :, :t]
        for _ in range(2):  # Gram-Schmidt, twice for stability
            atom -= np.einsum("nkt,nt->nk", Qt, np.einsum("nkt,nk->nt", Qt, atom))
        anorm = np.linalg.norm(atom, axis=1)
        dependent = active & (anorm < 1e-6)
        if dependent.any():
            log.debug("omp: %d vectors hit a dependent atom at t=%d", dependent.sum(), t)
            active &= ~dependent
        act = np.flatnonzero(active)
        q = atom[act] / anorm[act, None]
        Q[act, :, t] = q
        support[act, t] = pick[act]
        taken[act, pick[act]] = True
        count[act] += 1
        R[act] -= np.einsum("nk,n->nk", q, np.einsum("nk,nk->n", q, R[act]))
        rel_err[t, act] = np.linalg.norm(R[act], axis=1) / norms[act]
        if len(act):
            sel = A[:, support[act, :t + 1]]  # k1 x m x (t+1)
            ortho[t] = np.max(np.abs(np.einsum("kmt,mk->mt", sel, R[act])) / norms[act, None])

    return codes_from_order(dictionary, W, support, s), OMPTrace(rel_err, ortho, support)


def codes_from_order(dictionary: Dictionary, W: np.ndarray, order: np.ndarray,
                     s: int) -> list[SparseCode]:
    """Codes using the first ``s`` greedy picks of each column of ``W``.

    OMP's selection at step ``t`` only depends on the first ``t`` picks, so a
    prefix of a longer run is exactly the ``s``-atom OMP result.  Columns that
    stopped early are padded with the lowest unused atoms at coefficient 0.
    """
    A = dictionary.atoms
    k1, k2 = A.shape
    codes = []
    for v in range(W.shape[1]):
        picks = order[v, :s]
        picks = picks[picks >= 0]
        if len(picks) == 0:
            raise CodingError(f"vector {v}: no usable atom")
        idx = np.sort(picks)
        try:
            coef = least_squares(A[:, idx], W[:, v])
        except RankDeficientError as exc:
            raise CodingError(f"vector {v}: {exc}") from exc
        truncated = len(idx) < s
        if truncated:
            spare = np.setdiff1d(np.arange(s + len(idx)), idx)[:s - len(idx)]
            full = np.concatenate([idx, spare])
            perm = np.argsort(full)
            idx = full[perm]
            coef = np.concatenate([coef, np.zeros(len(spare))])[perm]
        codes.append(SparseCode(k1, k2, idx, coef, truncated=truncated))
    return codes


def omp(dictionary: Dictionary, w: np.ndarray, s: int) -> SparseCode:
    """Greedy ``s``-atom code of one vector (see :func:`omp_batch`)."""
    w = np.asarray(w, dtype=np.float64).ravel()
    codes, _ = omp_batch(dictionary, w[:, None], s)
    return codes[0]


def reconstruct(dictionary: Dictionary, code: SparseCode) -> np.ndarray:
    """``w = A x`` for a sparse ``x``."""
    if code.k2 != dictionary.k2 or code.k1 != dictionary.k1:
        raise ValueError(
            f"code shape ({code.k1}, {code.k2}) does not match dictionary "
            f"({dictionary.k1}, {dictionary.k2})")
    if code.s and (code.indices.min() < 0 or code.indices.max() >= dictionary.k2):
        raise IndexError("atom index out of range")
    return reconstruct_batch(dictionary, code.indices[None, :], code.values[None, :])[:, 0]


def reconstruct_batch(dictionary: Dictionary, indices: np.ndarray,
                      values: np.ndarray) -> np.ndarray:
    """Decode ``n`` codes at once; ``indices``/``values`` are ``n x s``.

    Terms are accumulated in index order with plain IEEE adds (no BLAS), so
    every platform decodes the same bits.
    """
    A = dictionary.atoms
    indices = np.asarray(indices, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    out = np.zeros((A.shape[0], len(indices)))
    for t in range(indices.shape[1]):
        out += A[:, indices[:, t]] * values[:, t]
    return out


# ---------------------------------------------------------------------------
# Layer layout


def layer_vectors(W: np.ndarray, threshold: int = TINY_WIDTH) -> tuple[LayerMode, np.ndarray]:
    """Split a weight matrix into the vectors that get coded.

    Vectors run along the longer axis of ``W`` (its hidden-width side), one
    per entry of the shorter axis: columns of the ``k x a`` input layer, rows
    of the ``b x k`` output layer, columns of a square hidden layer.  Layers
    narrower than ``threshold`` are flattened row-major into one vector.

    Returns ``(mode, V)`` with ``V`` of shape ``k1 x n_vectors``.
    """
    W = np.asarray(W, dtype=np.float64)
    rows, cols = W.shape
    if max(rows, cols) < threshold:
        return LayerMode.FLATTENED, W.reshape(-1, 1)
    if rows >= cols:
        return LayerMode.PER_VECTOR, W
    return LayerMode.PER_VECTOR, W.T


def assemble_layer(mode: LayerMode, V: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`layer_vectors`."""
    rows, cols = shape
    if mode == LayerMode.FLATTENED:
        return V.reshape(rows, cols)
    if rows >= cols:
        return V.reshape(rows, cols)
    return V.T.reshape(rows, cols)


def choose_k2(k1: int, k2_factor: float = DEFAULT_K2_FACTOR) -> int:
    """Dictionary width for vectors of length ``k1`` (capped to 16-bit indices)."""
    k2 = min(int(round(k2_factor * k1)), MAX_INDEX)
    if k2 <= k1:
        raise ValueError(f"k2_factor={k2_factor} gives k2={k2} <= k1={k1}")
    return k2


def layer_seed(master_seed: int, layer_index: int) -> int:
    return (master_seed ^ layer_index) & ((1 << 64) - 1)


@dataclass(eq=False)
class LayerCoding:
    """Sparse codes for every vector of one weight matrix."""

    mode: LayerMode
    shape: tuple[int, int]
    k1: int
    k2: int
    s: int
    seed: int
    codes: list[SparseCode] = field(repr=False)
    max_rel_err: float = float("nan")

    @property
    def stored_scalars(self) -> int:
        return 2 * self.s * len(self.codes)

    def decode(self) -> np.ndarray:
        D = sample_dictionary(self.seed, self.k1, self.k2)
        V = reconstruct_batch(D, np.stack([c.indices for c in self.codes]),
                              np.stack([c.values for c in self.codes]))
        return assemble_layer(self.mode, V, self.shape)


def encode_layer(W: np.ndarray, seed: int, s: int, width_threshold: int = TINY_WIDTH,
                 k2_factor: float = DEFAULT_K2_FACTOR, layer_index: int = 0) -> LayerCoding:
    """Sparse-code one weight matrix with the dictionary of ``seed``.

    ``seed`` is the already layer-specific seed (see :func:`layer_seed`).
    """
    mode, V = layer_vectors(W, width_threshold)
    k1, n = V.shape
    try:
        check_budget(s, k1)
    except BudgetError as exc:
        raise BudgetError(f"layer {layer_index} ({mode.name}, k1={k1}): {exc}") from None
    k2 = choose_k2(k1, k2_factor)
    D = sample_dictionary(seed, k1, k2)
    try:
        codes, trace = omp_batch(D, V, s)
    except (CodingError, ValueError) as exc:
        raise CodingError(f"layer {layer_index}: {exc}") from exc
    err = float(np.max(trace.error_at(s)))
    return LayerCoding(mode, tuple(W.shape), k1, k2, s, seed, codes, err)


@dataclass
class SweepResult:
    s_opt: int
    rel_err: float
    met: bool
    grid: list[int]
    curve: list[float]  # worst-case relative error at each grid point


def sweep_grid(k1: int, s_min: int = 2, step: int | None = None) -> list[int]:
    if step is None:
        step = max(1, k1 // 64)
    s_max = (k1 - 1) // 2
    return list(range(min(s_min, s_max), s_max + 1, step))


def sweep_layer(W: np.ndarray, seed: int, rel_tol: float, width_threshold: int = TINY_WIDTH,
                k2_factor: float = DEFAULT_K2_FACTOR, s_min: int = 2, step: int | None = None,
                layer_index: int = 0) -> tuple[SweepResult, LayerCoding]:
    """Sweep ``s`` for one weight matrix and return the coding at the chosen ``s``.

    Greedy selection does not depend on the requested ``s``, so a single OMP
    run up to the largest feasible ``s`` yields the whole error curve.
    """
    if not rel_tol > 0:
        raise ValueError("rel_tol must be positive")
    mode, V = layer_vectors(W, width_threshold)
    k1 = V.shape[0]
    grid = sweep_grid(k1, s_min, step)
    if not grid or grid[-1] < 1:
        raise BudgetError(f"layer {layer_index}: no sparsity satisfies 2s < k1 for k1={k1}")
    D = sample_dictionary(seed, k1, choose_k2(k1, k2_factor))
    try:
        _, trace = omp_batch(D, V, grid[-1])
    except (CodingError, ValueError) as exc:
        raise CodingError(f"layer {layer_index}: {exc}") from exc
    curve = [float(np.max(trace.error_at(s))) for s in grid]
    result = SweepResult(grid[-1], curve[-1], False, grid, curve)
    for s, e in zip(grid, curve):
        if e <= rel_tol:
            result = SweepResult(s, e, True, grid, curve)
            break
    codes = codes_from_order(D, V, trace.order, result.s_opt)
    coding = LayerCoding(mode, tuple(W.shape), k1, D.k2, result.s_opt, seed, codes,
                         result.rel_err)
    return result, coding


def sweep_s(W: np.ndarray, seed: int, rel_tol: float, width_threshold: int = TINY_WIDTH,
            k2_factor: float = DEFAULT_K2_FACTOR, s_min: int = 2,
            step: int | None = None) -> SweepResult:
    """Smallest grid ``s`` whose worst per-vector relative error is within ``rel_tol``.

    The grid runs from ``s_min`` in steps of ``max(1, k1 // 64)`` while
    ``2s < k1``.  When no grid point qualifies the largest one is returned
    with ``met=False``.
    """
    return sweep_layer(W, seed, rel_tol, width_threshold, k2_factor, s_min, step)[0]


def parameter_counts(a: int, b: int, l: int, k: int, s: int) -> dict[str, int]:
    """Raw and sparse-coded weight counts of an ``l``-hidden-layer, width-``k`` MLP."""
    return {
        "T_s": a * k + l * k * k + b * k,
        "T_sinr": a * 2 * s + k * l * 2 * s + b * 2 * s,
    }
