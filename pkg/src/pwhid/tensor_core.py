"""Dense tensor helpers: n-mode products, CPD evaluation and symmetric kernels.

Tensors are plain :class:`numpy.ndarray` objects in C (row-major) order. An
order-0 tensor is a 0-d array, so chains of n-mode products end in a scalar.
Symmetric tensors are stored densely; every entry is copied from the entry at
its sorted index, which makes permutation invariance exact.
"""
from __future__ import annotations

import itertools
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import DimensionError, EmptyFactorsError, ModeError

__all__ = [
    "nmode_product",
    "cpd_eval",
    "squeeze_unit_modes",
    "frob_distance",
    "symmetrize",
    "is_symmetric",
    "canonicalize",
    "sorted_index_tuples",
    "multiplicity",
    "unique_entries",
    "from_unique",
    "write_kernel",
    "read_kernel",
]


def _as_tensor(t) -> np.ndarray:
    arr = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor entries must be finite")
    return arr


def nmode_product(t, v, mode: int) -> np.ndarray:
    """Contract mode ``mode`` (0-based) of ``t`` with the vector ``v``.

    The result has order ``t.ndim - 1``; contracting an order-1 tensor
    yields a 0-d array.

    >>> nmode_product([[1, 2], [3, 4]], [1, 1], 0)
    array([4., 6.])
    """
    t = _as_tensor(t)
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {v.shape}")
    if not 0 <= mode < t.ndim:
        raise ModeError(f"mode {mode} out of range for order-{t.ndim} tensor")
    if t.shape[mode] != v.shape[0]:
        raise DimensionError(
            f"mode {mode} has dimension {t.shape[mode]}, vector has {v.shape[0]}"
        )
    return np.asarray(np.tensordot(t, v, axes=([mode], [0])))


def cpd_eval(factors: Sequence) -> np.ndarray:
    """Evaluate the CPD ``[[A, B, C, ...]]`` as a dense tensor.

    Each factor is an ``(I_k, R)`` matrix sharing the rank ``R``; a 1-D
    factor is read as a ``1 x R`` row. Unit modes are kept, so the result
    has one mode per factor.
    """
    if len(factors) == 0:
        raise EmptyFactorsError("at least one factor is required")
    mats = [np.atleast_2d(np.asarray(f, dtype=float)) for f in factors]
    rank = mats[0].shape[1]
    for k, f in enumerate(mats):
        if f.ndim != 2 or f.shape[1] != rank:
            raise DimensionError(
                f"factor {k} has shape {f.shape}, expected (*, {rank})"
            )
    out = mats[0]
    # Khatri-Rao style accumulation: keep the rank axis last until the end.
    for f in mats[1:]:
        out = out[..., None, :] * f
    return out.sum(axis=-1)


def squeeze_unit_modes(t) -> np.ndarray:
    """Drop every mode of dimension one (a 1 x 1 tensor becomes a 0-d array)."""
    t = np.asarray(t, dtype=float)
    return t.reshape([n for n in t.shape if n != 1])


def frob_distance(a, b) -> float:
    """Frobenius norm of ``a - b`` after squeezing unit modes of both."""
    a = squeeze_unit_modes(a)
    b = squeeze_unit_modes(b)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def _check_cubical(t: np.ndarray) -> None:
    if t.ndim > 0 and len(set(t.shape)) != 1:
        raise DimensionError(f"all dimensions must be equal, got {t.shape}")


def canonicalize(t) -> np.ndarray:
    """Copy every entry from its sorted-index representative.

    Makes a numerically symmetric tensor exactly permutation invariant.
    """
    t = np.asarray(t, dtype=float)
    if t.ndim <= 1:
        return t.copy()
    idx = np.indices(t.shape).reshape(t.ndim, -1)
    idx.sort(axis=0)
    return t[tuple(idx)].reshape(t.shape)


def is_symmetric(t) -> bool:
    """Exact (bitwise) permutation invariance test."""
    t = np.asarray(t)
    if t.ndim <= 1:
        return True
    if len(set(t.shape)) != 1:
        return False
    return bool(np.array_equal(t, canonicalize(t)))


def symmetrize(t) -> np.ndarray:
    """Average ``t`` over all index permutations.

    Already-symmetric input is returned unchanged, so the map is exactly
    idempotent.
    """
    t = _as_tensor(t)
    _check_cubical(t)
    if is_symmetric(t):
        return t.copy()
    perms = list(itertools.permutations(range(t.ndim)))
    avg = sum(np.transpose(t, p) for p in perms) / len(perms)
    return canonicalize(avg)


def sorted_index_tuples(dim: int, order: int) -> list[tuple[int, ...]]:
    """All non-decreasing ``order``-tuples over ``range(dim)``, lexicographic."""
    return list(itertools.combinations_with_replacement(range(dim), order))


def multiplicity(index: Sequence[int]) -> int:
    """Number of distinct permutations of ``index``."""
    counts = np.unique(np.asarray(index), return_counts=True)[1]
    return math.factorial(len(index)) // math.prod(math.factorial(int(c)) for c in counts)


def unique_entries(t) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(indices, values)`` for the sorted-index entries of ``t``.

    ``indices`` is an ``(n_unique, order)`` integer array in lexicographic
    order.
    """
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return np.zeros((1, 0), dtype=int), t.reshape(1)
    _check_cubical(t)
    idx = np.array(sorted_index_tuples(t.shape[0], t.ndim), dtype=int)
    return idx, t[tuple(idx.T)]


def from_unique(values, dim: int, order: int) -> np.ndarray:
    """Scatter unique coefficients (lexicographic sorted tuples) into a dense
    symmetric tensor of the given order and dimension."""
    values = np.asarray(values, dtype=float)
    idx = np.array(sorted_index_tuples(dim, order), dtype=int)
    if values.shape != (len(idx),):
        raise DimensionError(
            f"expected {len(idx)} unique values for order {order}, dim {dim}; "
            f"got shape {values.shape}"
        )
    out = np.zeros((dim,) * order)
    out[tuple(idx.T)] = values
    return canonicalize(out)


def write_kernel(path, kernel) -> None:
    """Write a symmetric kernel in the plain-text kernel format.

    Header ``volterra d=<order> m=<dim-1>``, then one ``s1 .. sd value`` line
    per sorted index tuple; values use the shortest round-tripping repr.
    """
    kernel = np.asarray(kernel, dtype=float)
    if kernel.ndim == 0:
        raise DimensionError("kernels must have order >= 1")
    idx, vals = unique_entries(kernel)
    lines = [f"volterra d={kernel.ndim} m={kernel.shape[0] - 1}"]
    for tup, val in zip(idx, vals):
        lines.append(" ".join(str(int(s)) for s in tup) + " " + repr(float(val)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_kernel(path) -> np.ndarray:
    """Read a kernel file and expand it into a dense symmetric tensor."""
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError(f"{path}: empty kernel file")
    head = text[0].split()
    try:
        if head[0] != "volterra":
            raise ValueError
        fields = dict(tok.split("=", 1) for tok in head[1:])
        order, m = int(fields["d"]), int(fields["m"])
    except (ValueError, KeyError, IndexError):
        raise ValueError(f"{path}: malformed header {text[0]!r}") from None
    dim = m + 1
    expected = sorted_index_tuples(dim, order)
    rows = [ln.split() for ln in text[1:] if ln.strip()]
    if len(rows) != len(expected):
        raise DimensionError(
            f"{path}: expected {len(expected)} entries, found {len(rows)}"
        )
    values = np.empty(len(rows))
    for i, (row, tup) in enumerate(zip(rows, expected)):
        if len(row) != order + 1 or tuple(int(s) for s in row[:order]) != tup:
            raise ValueError(f"{path}: line {i + 2} does not match index {tup}")
        values[i] = float(row[order])
    return from_unique(values, dim, order)
