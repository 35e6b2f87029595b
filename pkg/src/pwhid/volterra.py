"""Least-squares estimation of symmetric Volterra kernels.

Each unique coefficient ``H_d(s_1 <= ... <= s_d)`` gets one regressor,
``mu * u(k - s_1) ... u(k - s_d)`` with ``mu`` the number of distinct
permutations of the lag tuple, so the solution vector holds the symmetric
kernel entries themselves.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from ._validation import check_degrees, check_nonneg_int, check_signal, check_signal_pair
from .exceptions import DimensionError, IllConditionedError, InsufficientDataError
from .tensor_core import from_unique, multiplicity, sorted_index_tuples

__all__ = [
    "enumerate_monomials",
    "n_monomials",
    "RegressionProblem",
    "lag_matrix",
    "build_regression",
    "estimate_kernels",
    "volterra_predict",
]

DEFAULT_COND_LIMIT = 1e10


def enumerate_monomials(m: int, d: int) -> list[tuple[int, ...]]:
    """Non-decreasing ``d``-tuples of lags in ``0..m``, lexicographic.

    There are ``comb(m + d, d)`` of them: 231 for ``m=20, d=2``.
    """
    m = check_nonneg_int(m, "m")
    if d < 1:
        raise ValueError("d must be >= 1")
    return sorted_index_tuples(m + 1, d)


def n_monomials(m: int, degrees: Sequence[int]) -> int:
    return sum(comb(m + d, d) for d in check_degrees(degrees))


@dataclass(frozen=True)
class RegressionProblem:
    design: np.ndarray
    target: np.ndarray
    column_index: tuple[tuple[int, tuple[int, ...]], ...]
    m: int
    degrees: tuple[int, ...]

    @property
    def n_columns(self) -> int:
        return self.design.shape[1]


def lag_matrix(u, m: int, start: int = 0) -> np.ndarray:
    """Rows ``[u(k), u(k-1), ..., u(k-m)]`` for ``k = start .. N-1`` (0-based),
    with samples before the record taken as zero."""
    u = check_signal(u, "input")
    padded = np.concatenate([np.zeros(m), u])
    n = u.size
    cols = [padded[m - s + start : m - s + n] for s in range(m + 1)]
    return np.stack(cols, axis=1)


def build_regression(u, y, m: int, degrees: Sequence[int]) -> RegressionProblem:
    """Linear-in-parameters form of the truncated Volterra model.

    Rows run over ``k = m .. N-1`` (0-based) so that no regressor touches the
    unobserved pre-record samples.
    """
    u, y = check_signal_pair(u, y)
    m = check_nonneg_int(m, "m")
    degrees = check_degrees(degrees)
    n_rows = u.size - m
    n_cols = n_monomials(m, degrees)
    if n_rows < n_cols:
        raise InsufficientDataError(
            f"{n_rows} usable samples for {n_cols} unknowns (memory {m}, degrees {degrees})"
        )
    lags = lag_matrix(u, m, start=m)
    blocks = []
    column_index = []
    for d in degrees:
        tuples = enumerate_monomials(m, d)
        idx = np.array(tuples, dtype=int)
        mu = np.array([multiplicity(t) for t in tuples], dtype=float)
        block = lags[:, idx[:, 0]] * mu
        for j in range(1, d):
            block *= lags[:, idx[:, j]]
        blocks.append(block)
        column_index.extend((d, t) for t in tuples)
    return RegressionProblem(
        design=np.hstack(blocks),
        target=y[m:].copy(),
        column_index=tuple(column_index),
        m=m,
        degrees=degrees,
    )


def estimate_kernels(
    problem: RegressionProblem,
    cond_limit: float = DEFAULT_COND_LIMIT,
    full_output: bool = False,
):
    """Solve the regression by Householder QR and scatter into kernels.

    Returns ``{d: H_d}``; with ``full_output`` also a dict holding the
    1-norm condition estimate of the design and the residual RMS.

    Raises
    ------
    IllConditionedError
        If the condition estimate exceeds ``cond_limit``.
    """
    A = problem.design
    Q, R = scipy.linalg.qr(A, mode="economic", check_finite=False)
    rcond, info = lapack.dtrcon(R, norm="1", uplo="U", diag="N")
    cond = np.inf if rcond == 0.0 or info != 0 else 1.0 / rcond
    if not cond <= cond_limit:
        raise IllConditionedError(float(cond), cond_limit)
    theta = scipy.linalg.solve_triangular(R, Q.T @ problem.target, check_finite=False)

    kernels = {}
    dim = problem.m + 1
    offset = 0
    for d in problem.degrees:
        n = comb(problem.m + d, d)
        kernels[d] = from_unique(theta[offset : offset + n], dim, d)
        offset += n
    if not full_output:
        return kernels
    resid = problem.target - A @ theta
    return kernels, {
        "condition": float(cond),
        "residual_rms": float(np.sqrt(np.mean(resid**2))),
        "n_rows": int(A.shape[0]),
        "n_columns": int(A.shape[1]),
    }


def volterra_predict(kernels: Mapping[int, np.ndarray], u) -> np.ndarray:
    """Evaluate the truncated Volterra series for every sample of ``u``.

    Sums ``H_d(s_1..s_d) u(k-s_1)...u(k-s_d)`` over all lag tuples, not just
    the sorted ones; samples before the record are zero.
    """
    u = check_signal(u, "input")
    dims = {np.asarray(H).shape[0] for H in kernels.values() if np.ndim(H) > 0}
    if len(dims) != 1:
        raise DimensionError(f"kernels disagree on memory: dims {sorted(dims)}")
    dim = dims.pop()
    lags = lag_matrix(u, dim - 1)
    y = np.zeros(u.size)
    for d, H in kernels.items():
        H = np.asarray(H, dtype=float)
        if H.shape != (dim,) * d:
            raise DimensionError(f"kernel of degree {d} has shape {H.shape}")
        acc = lags @ H.reshape(dim, -1)
        for _ in range(d - 1):
            acc = np.einsum("kij,ki->kj", acc.reshape(u.size, dim, -1), lags)
        y += acc.ravel()
    return y
