"""Joint structured CPD of Volterra kernels for parallel Wiener-Hammerstein models.

For degree ``d`` the kernel of an ``R``-branch model is the CPD

    H_d = [[P, ..., P, q^T, c_d^T]]      (d copies of P)

with ``P = [P_1 ... P_R]`` stacking the banded Toeplitz matrices of the front
filters, ``q^T = [q_1^T ... q_R^T]`` the back filters and ``c_d^T`` the
polynomial coefficients, each repeated ``m_q + 1`` times. ``P`` and ``q`` are
shared by all degrees. The leading taps ``p_0 = q_0 = 1`` are fixed, leaving
``p_1..p_{m_p}``, ``q_1..q_{m_q}`` and ``c_{r,d}`` as unknowns.

The sum of squared Frobenius misfits over all degrees is minimised by
Levenberg-Marquardt on the unique (sorted-index) kernel entries, each residual
weighted by the square root of its permutation count so the two costs agree.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from joblib import Parallel, delayed

from ._validation import check_degrees
from .exceptions import DegreeError, DimensionError, DivergenceError, ShapeError
from .system import Branch, FirFilter, ParallelWhModel, PolyNonlinearity, build_p_matrix
from .tensor_core import canonicalize, cpd_eval, multiplicity, sorted_index_tuples

__all__ = [
    "DecisionVariables",
    "StructuredFactors",
    "LMOptions",
    "FitResult",
    "assemble_factors",
    "model_kernel",
    "joint_cost",
    "joint_gradient",
    "random_init",
    "fit_joint_cpd",
    "multistart",
    "extract_model",
    "parameterize",
    "parameter_error",
]


@dataclass
class DecisionVariables:
    """Free parameters of a normalized ``R``-branch model.

    ``p_free`` is ``(R, m_p)``, ``q_free`` is ``(R, m_q)`` and ``c`` maps each
    degree to ``R`` polynomial coefficients.
    """

    p_free: np.ndarray
    q_free: np.ndarray
    c: dict[int, np.ndarray]

    def __post_init__(self):
        self.p_free = np.atleast_2d(np.asarray(self.p_free, dtype=float))
        self.q_free = np.asarray(self.q_free, dtype=float).reshape(self.p_free.shape[0], -1)
        self.c = {int(d): np.asarray(v, dtype=float).reshape(-1) for d, v in sorted(self.c.items())}
        r = self.p_free.shape[0]
        if not self.c:
            raise ShapeError("at least one degree is required")
        if any(v.shape != (r,) for v in self.c.values()):
            raise ShapeError(f"every coefficient vector must have {r} entries")
        if not np.all(np.isfinite(self.to_vector())):
            raise ValueError("decision variables must be finite")

    @property
    def r(self) -> int:
        return self.p_free.shape[0]

    @property
    def m_p(self) -> int:
        return self.p_free.shape[1]

    @property
    def m_q(self) -> int:
        return self.q_free.shape[1]

    @property
    def degrees(self) -> tuple[int, ...]:
        return tuple(self.c)

    @property
    def size(self) -> int:
        return self.r * (self.m_p + self.m_q + len(self.c))

    def to_vector(self) -> np.ndarray:
        """Flatten as ``[p_free.ravel(), q_free.ravel(), c[d_1], c[d_2], ...]``."""
        return np.concatenate(
            [self.p_free.ravel(), self.q_free.ravel()] + [self.c[d] for d in self.c]
        )

    @classmethod
    def from_vector(cls, x, r: int, m_p: int, m_q: int, degrees: Sequence[int]):
        x = np.asarray(x, dtype=float)
        degrees = check_degrees(degrees)
        if x.shape != (r * (m_p + m_q + len(degrees)),):
            raise ShapeError(f"vector of shape {x.shape} does not fit r={r}, m_p={m_p}, m_q={m_q}")
        n_p, n_q = r * m_p, r * m_q
        p = x[:n_p].reshape(r, m_p)
        q = x[n_p : n_p + n_q].reshape(r, m_q)
        c = {d: x[n_p + n_q + i * r : n_p + n_q + (i + 1) * r] for i, d in enumerate(degrees)}
        return cls(p.copy(), q.copy(), {d: v.copy() for d, v in c.items()})


@dataclass(frozen=True)
class StructuredFactors:
    P: np.ndarray
    q_row: np.ndarray
    c_rows: dict[int, np.ndarray]


def assemble_factors(v: DecisionVariables) -> StructuredFactors:
    """Build the shared block-Toeplitz ``P``, the ``q`` row and the ``c_d`` rows."""
    ones = np.ones(v.m_q + 1)
    P = np.hstack(
        [build_p_matrix(np.concatenate([[1.0], v.p_free[r]]), v.m_q) for r in range(v.r)]
    )
    q_row = np.concatenate([np.concatenate([[1.0], v.q_free[r]]) for r in range(v.r)])
    c_rows = {d: np.kron(c, ones) for d, c in v.c.items()}
    return StructuredFactors(P, q_row[None, :], {d: row[None, :] for d, row in c_rows.items()})


def model_kernel(v: DecisionVariables, d: int) -> np.ndarray:
    """Dense degree-``d`` kernel ``[[P, ..., P, q^T, c_d^T]]`` of ``v``."""
    if d not in v.c:
        raise DegreeError(f"degree {d} not among {v.degrees}")
    f = assemble_factors(v)
    dim = v.m_p + v.m_q + 1
    H = cpd_eval([f.P] * d + [f.q_row, f.c_rows[d]])
    return canonicalize(H.reshape((dim,) * d))


def _check_kernels(dim: int, kernels: Mapping[int, np.ndarray], degrees) -> dict[int, np.ndarray]:
    out = {}
    if set(kernels) != set(degrees):
        raise DimensionError(
            f"kernel degrees {sorted(kernels)} do not match model degrees {sorted(degrees)}"
        )
    for d in degrees:
        H = np.asarray(kernels[d], dtype=float)
        if H.shape != (dim,) * d:
            raise DimensionError(f"degree-{d} kernel has shape {H.shape}, expected {(dim,) * d}")
        out[d] = H
    return out


def _weights(weights, degrees) -> dict[int, float]:
    if weights is None:
        return {d: 1.0 for d in degrees}
    return {d: float(weights.get(d, 1.0)) for d in degrees}


def joint_cost(v: DecisionVariables, kernels: Mapping[int, np.ndarray], weights=None) -> float:
    """Sum over degrees of ``||H_d - [[P, .., P, q^T, c_d^T]]||_F**2``.

    Evaluated on dense tensors; ``weights`` optionally scales each degree.
    """
    kernels = _check_kernels(v.m_p + v.m_q + 1, kernels, v.degrees)
    w = _weights(weights, v.degrees)
    return float(sum(w[d] * np.sum((kernels[d] - model_kernel(v, d)) ** 2) for d in v.degrees))


class _ResidualStack:
    """Weighted residuals and analytic Jacobian over unique kernel entries."""

    def __init__(self, kernels, r, m_p, m_q, degrees, weights=None):
        self.r, self.m_p, self.m_q = r, m_p, m_q
        self.degrees = check_degrees(degrees)
        dim = m_p + m_q + 1
        kernels = _check_kernels(dim, kernels, self.degrees)
        w = _weights(weights, self.degrees)
        self.blocks = []
        for d in self.degrees:
            tuples = sorted_index_tuples(dim, d)
            idx = np.array(tuples, dtype=int).reshape(len(tuples), d)
            sw = np.sqrt(w[d] * np.array([multiplicity(t) for t in tuples], dtype=float))
            target = kernels[d][tuple(idx.T)]
            # lag offset s_j - i between each index and each back-filter tap
            offsets = idx[:, :, None] - np.arange(m_q + 1)[None, None, :]
            self.blocks.append((d, idx, sw, target, offsets))
        self.n_residuals = sum(len(b[1]) for b in self.blocks)

    def _unpack(self, x):
        v = DecisionVariables.from_vector(x, self.r, self.m_p, self.m_q, self.degrees)
        P = [build_p_matrix(np.concatenate([[1.0], v.p_free[r]]), self.m_q) for r in range(self.r)]
        q = [np.concatenate([[1.0], v.q_free[r]]) for r in range(self.r)]
        return v, P, q

    def residuals(self, x) -> tuple[np.ndarray, dict[int, float]]:
        v, P, q = self._unpack(x)
        parts, per_degree = [], {}
        for d, idx, sw, target, _ in self.blocks:
            model = np.zeros(len(idx))
            for r in range(self.r):
                G = np.prod(P[r][idx], axis=1)
                model += v.c[d][r] * (G @ q[r])
            res = sw * (target - model)
            per_degree[d] = float(res @ res)
            parts.append(res)
        return np.concatenate(parts), per_degree

    def jacobian(self, x) -> np.ndarray:
        v, P, q = self._unpack(x)
        r_, m_p, m_q = self.r, self.m_p, self.m_q
        n_p, n_q = r_ * m_p, r_ * m_q
        J = np.zeros((self.n_residuals, v.size))
        row = 0
        for k, (d, idx, sw, _, offsets) in enumerate(self.blocks):
            rows = slice(row, row + len(idx))
            for r in range(r_):
                F = P[r][idx]  # (n_unique, d, m_q + 1)
                G = np.prod(F, axis=1)
                c = v.c[d][r]
                J[rows, n_p + n_q + k * r_ + r] = G @ q[r]
                J[rows, n_p + r * m_q : n_p + (r + 1) * m_q] = c * G[:, 1:]
                if m_p:
                    dP = np.zeros((len(idx), m_p))
                    for j in range(d):
                        others = np.prod(np.delete(F, j, axis=1), axis=1) * q[r]
                        lag = offsets[:, j, :]
                        for l in range(1, m_p + 1):
                            dP[:, l - 1] += np.where(lag == l, others, 0.0).sum(axis=1)
                    J[rows, r * m_p : (r + 1) * m_p] = c * dP
            J[rows] *= -sw[:, None]
            row += len(idx)
        return J


def joint_gradient(v: DecisionVariables, kernels: Mapping[int, np.ndarray], weights=None) -> np.ndarray:
    """Gradient of :func:`joint_cost` with respect to ``v.to_vector()``."""
    stack = _ResidualStack(kernels, v.r, v.m_p, v.m_q, v.degrees, weights)
    x = v.to_vector()
    res, _ = stack.residuals(x)
    return 2.0 * stack.jacobian(x).T @ res


@dataclass
class LMOptions:
    max_iters: int = 500
    gtol: float = 1e-10
    xtol: float = 1e-10
    lambda0: float = 1e-3
    lambda_max: float = 1e16
    init_filter_std: float = 0.3
    init_coef_std: float = 0.1
    weights: dict[int, float] | None = None


@dataclass
class FitResult:
    variables: DecisionVariables
    final_cost: float
    cost_per_degree: dict[int, float]
    iterations: int
    converged: bool
    cost_trace: list[float] = field(default_factory=list)
    start_index: int = 0
    seed: str = ""
    error: str | None = None

    @property
    def model(self) -> ParallelWhModel:
        return extract_model(self.variables)

    def degenerate_branches(self, rtol: float = 1e-6) -> list[int]:
        """Branches whose coefficients are all negligible; reported, not pruned."""
        c = np.array([self.variables.c[d] for d in self.variables.degrees])
        scale = np.max(np.abs(c)) if c.size else 0.0
        return [r for r in range(c.shape[1]) if np.all(np.abs(c[:, r]) <= rtol * scale)]


def fit_joint_cpd(
    kernels: Mapping[int, np.ndarray],
    r: int,
    m_p: int,
    m_q: int,
    degrees: Sequence[int],
    init: DecisionVariables,
    opts: LMOptions | None = None,
) -> FitResult:
    """Levenberg-Marquardt from ``init`` on the joint structured CPD cost.

    Damping follows Marquardt's diagonal scaling; ``lambda`` is divided by 10
    after an accepted step and multiplied by 10 after a rejected one.
    ``converged`` is set when the gradient infinity norm drops below
    ``opts.gtol`` or the relative step below ``opts.xtol``.

    Raises
    ------
    DivergenceError
        If the cost or Jacobian becomes non-finite.
    """
    opts = opts or LMOptions()
    degrees = check_degrees(degrees)
    if (init.r, init.m_p, init.m_q, init.degrees) != (r, m_p, m_q, degrees):
        raise ShapeError("initial point does not match (r, m_p, m_q, degrees)")
    stack = _ResidualStack(kernels, r, m_p, m_q, degrees, opts.weights)
    x = init.to_vector()
    res, per_degree = stack.residuals(x)
    cost = float(res @ res)
    if not math.isfinite(cost):
        raise DivergenceError("non-finite cost at the initial point")
    trace = [cost]
    lam = opts.lambda0
    converged = False
    it = 0
    while it < opts.max_iters:
        J = stack.jacobian(x)
        if not np.all(np.isfinite(J)):
            raise DivergenceError(f"non-finite Jacobian at iteration {it}")
        g = J.T @ res
        if 2.0 * np.max(np.abs(g), initial=0.0) < opts.gtol:
            converged = True
            break
        A = J.T @ J
        diag = np.diag(A).copy()
        diag = np.maximum(diag, 1e-12 * max(diag.max(initial=0.0), 1e-300))
        it += 1
        while True:
            try:
                step = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                step = None
            if step is not None:
                x_new = x + step
                res_new, per_new = stack.residuals(x_new)
                cost_new = float(res_new @ res_new)
                if math.isfinite(cost_new) and cost_new <= cost:
                    break
            lam *= 10.0
            if lam > opts.lambda_max:
                step = None
                break
        if step is None:
            # No damping level reduces the cost: numerically stationary.
            converged = True
            break
        x, res, per_degree, cost = x_new, res_new, per_new, cost_new
        trace.append(cost)
        lam = max(lam / 10.0, 1e-15)
        if np.linalg.norm(step) < opts.xtol * (np.linalg.norm(x) + opts.xtol):
            converged = True
            break
    return FitResult(
        variables=DecisionVariables.from_vector(x, r, m_p, m_q, degrees),
        final_cost=cost,
        cost_per_degree=per_degree,
        iterations=it,
        converged=converged,
        cost_trace=trace,
    )


def random_init(r, m_p, m_q, degrees, rng, opts: LMOptions | None = None) -> DecisionVariables:
    """Gaussian starting point: filters ``N(0, init_filter_std**2)``,
    coefficients ``N(0, init_coef_std**2)``."""
    opts = opts or LMOptions()
    rng = np.random.default_rng(rng)
    p = rng.normal(0.0, opts.init_filter_std, size=(r, m_p))
    q = rng.normal(0.0, opts.init_filter_std, size=(r, m_q))
    c = {d: rng.normal(0.0, opts.init_coef_std, size=r) for d in check_degrees(degrees)}
    return DecisionVariables(p, q, c)


def start_seed(root: int | np.random.SeedSequence, index: int) -> np.random.SeedSequence:
    """Seed of start ``index``: the root's spawn key extended by ``index``."""
    if not isinstance(root, np.random.SeedSequence):
        root = np.random.SeedSequence(root)
    return np.random.SeedSequence(root.entropy, spawn_key=tuple(root.spawn_key) + (index,))


def _seed_label(ss: np.random.SeedSequence) -> str:
    return "/".join(str(k) for k in (ss.entropy, *ss.spawn_key))


def _run_start(kernels, r, m_p, m_q, degrees, index, ss, opts) -> FitResult:
    init = random_init(r, m_p, m_q, degrees, np.random.default_rng(ss), opts)
    try:
        result = fit_joint_cpd(kernels, r, m_p, m_q, degrees, init, opts)
    except DivergenceError as exc:
        result = FitResult(init, math.inf, {d: math.inf for d in degrees}, 0, False, error=str(exc))
    result.start_index = index
    result.seed = _seed_label(ss)
    return result


def multistart(
    kernels: Mapping[int, np.ndarray],
    r: int,
    m_p: int,
    m_q: int,
    degrees: Sequence[int],
    n_starts: int,
    rng_seed,
    opts: LMOptions | None = None,
    n_jobs: int | None = None,
) -> tuple[list[FitResult], int]:
    """Run :func:`fit_joint_cpd` from ``n_starts`` random points.

    Start ``i`` draws its initial point from ``start_seed(rng_seed, i)``, so
    results do not depend on ``n_jobs``. Returns the results in start order and
    the index of the lowest final cost.
    """
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    opts = opts or LMOptions()
    degrees = check_degrees(degrees)
    kernels = {d: np.asarray(kernels[d], dtype=float) for d in degrees}
    jobs = (
        delayed(_run_start)(kernels, r, m_p, m_q, degrees, i, start_seed(rng_seed, i), opts)
        for i in range(n_starts)
    )
    results = Parallel(n_jobs=n_jobs)(jobs)
    best = int(np.argmin([res.final_cost for res in results]))
    return results, best


def extract_model(v: DecisionVariables) -> ParallelWhModel:
    branches = []
    for r in range(v.r):
        front = FirFilter(np.concatenate([[1.0], v.p_free[r]]))
        back = FirFilter(np.concatenate([[1.0], v.q_free[r]]))
        poly = PolyNonlinearity({d: float(c[r]) for d, c in v.c.items()})
        branches.append(Branch(front, poly, back))
    return ParallelWhModel(tuple(branches))


def parameterize(model: ParallelWhModel, degrees: Sequence[int] | None = None) -> DecisionVariables:
    """Inverse of :func:`extract_model` for normalized models."""
    if not model.normalized:
        raise ValueError("only normalized models can be parameterized")
    degrees = check_degrees(degrees if degrees is not None else model.degrees)
    return DecisionVariables(model.p[:, 1:], model.q[:, 1:], {d: model.c(d) for d in degrees})


def _branch_vectors(model: ParallelWhModel, degrees) -> np.ndarray:
    return np.array(
        [
            np.concatenate([b.front.coeffs, b.back.coeffs, [b.nonlinearity.coeff(d) for d in degrees]])
            for b in model.branches
        ]
    )


def parameter_error(a: ParallelWhModel, b: ParallelWhModel) -> float:
    """Relative coefficient error of ``b`` against reference ``a``.

    Minimised over branch permutations: ``min_pi ||a - pi(b)|| / ||a||``
    where each branch contributes its front taps, back taps and polynomial
    coefficients.
    """
    if (a.r, a.m_p, a.m_q) != (b.r, b.m_p, b.m_q) or a.degrees != b.degrees:
        raise ShapeError(
            f"models differ in shape: (r, m_p, m_q, degrees) = "
            f"{(a.r, a.m_p, a.m_q, a.degrees)} vs {(b.r, b.m_p, b.m_q, b.degrees)}"
        )
    va = _branch_vectors(a, a.degrees)
    vb = _branch_vectors(b, a.degrees)
    best = min(
        float(np.sum((va - vb[list(perm)]) ** 2)) for perm in itertools.permutations(range(a.r))
    )
    return math.sqrt(best) / math.sqrt(float(np.sum(va**2)))
