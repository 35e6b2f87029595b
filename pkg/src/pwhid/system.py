"""Parallel Wiener-Hammerstein systems: simulation, noise and exact kernels.

A branch is ``FIR front -> polynomial -> FIR back``; a parallel model sums
``R`` branches sharing the front memory ``m_p`` and back memory ``m_q``.
The kernels of such a model have dimension ``m_p + m_q + 1`` per mode.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._validation import check_signal
from .exceptions import (
    DegenerateSignalError,
    DegreeError,
    NormalizationError,
    ShapeError,
    SignalLengthError,
)
from .tensor_core import canonicalize, cpd_eval, squeeze_unit_modes

__all__ = [
    "FirFilter",
    "PolyNonlinearity",
    "Branch",
    "ParallelWhModel",
    "simulate",
    "add_output_noise",
    "build_p_matrix",
    "analytic_kernels",
    "sample_random_model",
    "save_model",
    "load_model",
    "save_signal",
    "load_signal",
]


@dataclass(frozen=True)
class FirFilter:
    """FIR impulse response; ``coeffs[0]`` is the leading tap."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float).ravel()
        if c.size < 1:
            raise ShapeError("a FIR filter needs at least one coefficient")
        if not np.all(np.isfinite(c)):
            raise ValueError("FIR coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def memory(self) -> int:
        return self.coeffs.size - 1

    @property
    def normalized(self) -> bool:
        return self.coeffs[0] == 1.0

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Filter ``x`` with zero initial conditions; output has ``len(x)``."""
        return np.convolve(x, self.coeffs)[: len(x)]


@dataclass(frozen=True)
class PolyNonlinearity:
    """Static polynomial without constant term, ``f(x) = sum_d c_d x**d``."""

    coeffs_by_degree: Mapping[int, float]

    def __post_init__(self):
        coeffs = {int(d): float(c) for d, c in dict(self.coeffs_by_degree).items()}
        if any(d < 1 for d in coeffs):
            raise DegreeError("polynomial degrees must be >= 1 (no constant term)")
        if not all(math.isfinite(c) for c in coeffs.values()):
            raise ValueError("polynomial coefficients must be finite")
        object.__setattr__(self, "coeffs_by_degree", dict(sorted(coeffs.items())))

    @property
    def degrees(self) -> list[int]:
        return list(self.coeffs_by_degree)

    def coeff(self, d: int) -> float:
        return self.coeffs_by_degree.get(d, 0.0)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for d, c in self.coeffs_by_degree.items():
            out += c * x**d
        return out


@dataclass(frozen=True)
class Branch:
    front: FirFilter
    nonlinearity: PolyNonlinearity
    back: FirFilter


@dataclass(frozen=True)
class ParallelWhModel:
    branches: tuple[Branch, ...] = field(default_factory=tuple)

    def __post_init__(self):
        branches = tuple(self.branches)
        if not branches:
            raise ShapeError("a parallel model needs at least one branch")
        if len({b.front.memory for b in branches}) != 1:
            raise ShapeError("all front filters must share the same memory")
        if len({b.back.memory for b in branches}) != 1:
            raise ShapeError("all back filters must share the same memory")
        object.__setattr__(self, "branches", branches)

    @classmethod
    def from_arrays(cls, p, q, c: Mapping[int, Sequence[float]]) -> "ParallelWhModel":
        """Build from ``(R, m_p+1)`` front taps, ``(R, m_q+1)`` back taps and
        a map ``degree -> R coefficients``."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        q = np.atleast_2d(np.asarray(q, dtype=float))
        if p.shape[0] != q.shape[0]:
            raise ShapeError("p and q must have one row per branch")
        branches = []
        for r in range(p.shape[0]):
            poly = PolyNonlinearity({d: float(np.asarray(v)[r]) for d, v in c.items()})
            branches.append(Branch(FirFilter(p[r]), poly, FirFilter(q[r])))
        return cls(tuple(branches))

    @property
    def r(self) -> int:
        return len(self.branches)

    @property
    def m_p(self) -> int:
        return self.branches[0].front.memory

    @property
    def m_q(self) -> int:
        return self.branches[0].back.memory

    @property
    def memory(self) -> int:
        return self.m_p + self.m_q

    @property
    def degrees(self) -> list[int]:
        return sorted({d for b in self.branches for d in b.nonlinearity.degrees})

    @property
    def normalized(self) -> bool:
        return all(b.front.normalized and b.back.normalized for b in self.branches)

    @property
    def p(self) -> np.ndarray:
        return np.array([b.front.coeffs for b in self.branches])

    @property
    def q(self) -> np.ndarray:
        return np.array([b.back.coeffs for b in self.branches])

    def c(self, d: int) -> np.ndarray:
        return np.array([b.nonlinearity.coeff(d) for b in self.branches])

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "m_p": self.m_p,
            "m_q": self.m_q,
            "p": self.p.tolist(),
            "q": self.q.tolist(),
            "c": {str(d): self.c(d).tolist() for d in self.degrees},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ParallelWhModel":
        model = cls.from_arrays(
            data["p"], data["q"], {int(d): v for d, v in data["c"].items()}
        )
        if (model.r, model.m_p, model.m_q) != (data["r"], data["m_p"], data["m_q"]):
            raise ShapeError("model fields r/m_p/m_q disagree with coefficient lists")
        return model


def simulate(model: ParallelWhModel, u) -> np.ndarray:
    """Output of ``model`` driven by ``u`` from zero initial conditions."""
    u = check_signal(u, "input")
    if u.size < model.m_p + model.m_q + 1:
        raise SignalLengthError(
            f"input has {u.size} samples, need at least {model.m_p + model.m_q + 1}"
        )
    y = np.zeros_like(u)
    for b in model.branches:
        y += b.back.apply(b.nonlinearity(b.front.apply(u)))
    return y


def add_output_noise(clean, snr_db: float | None, rng_seed) -> np.ndarray:
    """Add white Gaussian noise at the given SNR (dB) relative to mean(clean**2).

    ``snr_db`` of ``None`` or ``inf`` returns a copy of ``clean``. ``rng_seed``
    may be an int, a SeedSequence or a Generator.
    """
    clean = check_signal(clean, "clean output")
    if snr_db is None or snr_db == math.inf:
        return clean.copy()
    power = float(np.mean(clean**2))
    if power == 0.0:
        raise DegenerateSignalError("cannot set an SNR on a zero-power signal")
    variance = power / 10.0 ** (snr_db / 10.0)
    rng = np.random.default_rng(rng_seed)
    return clean + rng.normal(0.0, math.sqrt(variance), size=clean.shape)


def build_p_matrix(front: FirFilter | Sequence[float], m_q: int) -> np.ndarray:
    """Banded Toeplitz matrix mapping input lags to front-filter output lags.

    Entry ``(i, j)`` equals ``p[i - j]`` when ``0 <= i - j <= m_p``. For
    ``u_lags = [u(k), ..., u(k - m_p - m_q)]`` the product ``u_lags @ P``
    equals ``[v(k), ..., v(k - m_q)]``.
    """
    if not isinstance(front, FirFilter):
        front = FirFilter(front)
    if not front.normalized:
        raise NormalizationError(
            f"front filter must have leading coefficient 1, got {front.coeffs[0]!r}"
        )
    if m_q < 0:
        raise ValueError("m_q must be non-negative")
    m_p = front.memory
    P = np.zeros((m_p + m_q + 1, m_q + 1))
    for j in range(m_q + 1):
        P[j : j + m_p + 1, j] = front.coeffs
    return P


def analytic_kernels(model: ParallelWhModel, degrees: Iterable[int]) -> dict[int, np.ndarray]:
    """Exact symmetric Volterra kernels of a normalized model.

    Each branch contributes ``c_{r,d} [[P_r, ..., P_r, q_r^T]]`` to ``H_d``.
    """
    if not model.normalized:
        raise NormalizationError("analytic kernels require a normalized model")
    support = set(model.degrees)
    out = {}
    for d in degrees:
        d = int(d)
        if d not in support:
            raise DegreeError(f"degree {d} not in model (degrees {sorted(support)})")
        dim = model.memory + 1
        H = np.zeros((dim,) * d)
        for b in model.branches:
            c = b.nonlinearity.coeff(d)
            if c == 0.0:
                continue
            P = build_p_matrix(b.front, model.m_q)
            H += c * squeeze_unit_modes(cpd_eval([P] * d + [b.back.coeffs[None, :]])).reshape(H.shape)
        out[d] = canonicalize(H)
    return out


def _exponential_filter(rng: np.random.Generator, memory: int, min_lead: float) -> np.ndarray:
    lags = np.arange(memory + 1)
    while True:
        a = rng.uniform(-1.0, 1.0, size=2)
        b = rng.uniform(0.3, 0.9, size=2)
        h = (a[:, None] * b[:, None] ** lags).sum(axis=0)
        if abs(h[0]) >= min_lead:
            out = h / h[0]
            out[0] = 1.0
            return out


def sample_random_model(
    r: int,
    m_p: int,
    m_q: int,
    degrees: Sequence[int] = (2, 3),
    rng_seed=None,
    coef_std: float = 0.1,
    min_lead: float = 1e-3,
) -> ParallelWhModel:
    """Draw a normalized random model.

    Filters are two-term decaying exponentials ``sum_j a_j b_j**i`` with
    ``a_j ~ U(-1, 1)`` and ``b_j ~ U(0.3, 0.9)``, rescaled to a unit leading
    tap; draws whose leading tap is smaller than ``min_lead`` in magnitude are
    rejected. Polynomial coefficients are ``N(0, coef_std**2)``.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    rng = np.random.default_rng(rng_seed)
    branches = []
    for _ in range(r):
        p = _exponential_filter(rng, m_p, min_lead)
        q = _exponential_filter(rng, m_q, min_lead)
        c = {int(d): float(rng.normal(0.0, coef_std)) for d in degrees}
        branches.append(Branch(FirFilter(p), PolyNonlinearity(c), FirFilter(q)))
    return ParallelWhModel(tuple(branches))


def save_model(path, model: ParallelWhModel) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n")


def load_model(path) -> ParallelWhModel:
    return ParallelWhModel.from_dict(json.loads(Path(path).read_text()))


def save_signal(path, x) -> None:
    x = check_signal(x)
    Path(path).write_text("".join(repr(float(v)) + "\n" for v in x))


def load_signal(path) -> np.ndarray:
    values = [float(tok) for tok in Path(path).read_text().split()]
    return check_signal(np.array(values))
