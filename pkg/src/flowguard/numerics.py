"""Numerical building blocks: symmetric eigensolver, bracketed root finding,
log-gamma, reproducible random streams and Monte Carlo averaging."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError, InvalidInputError, NoRootError

SYMMETRY_RTOL = 1e-12
PSD_RTOL = 1e-10


@dataclass(frozen=True)
class EigenDecomp:
    """Eigenvalues in ascending order and orthonormal eigenvectors as columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        u = self.eigenvectors
        return (u * self.eigenvalues) @ u.T

    @property
    def min_vector(self) -> np.ndarray:
        return self.eigenvectors[:, 0]


def check_symmetric(m, name="matrix") -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidInputError(f"{name} must be square, got shape {m.shape}")
    scale = max(np.max(np.abs(m)), np.finfo(float).tiny)
    if np.max(np.abs(m - m.T)) > SYMMETRY_RTOL * scale:
        raise InvalidInputError(f"{name} is not symmetric")
    return m


def _fix_signs(v: np.ndarray) -> np.ndarray:
    # first nonzero component of each column made positive
    for j in range(v.shape[1]):
        col = v[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-14)
        if nz.size and col[nz[0]] < 0:
            v[:, j] = -col
    return v


def eigh(m, tol: float = 1e-15, max_sweeps: int = 100) -> EigenDecomp:
    """Cyclic Jacobi eigendecomposition of a real symmetric matrix.

    Each rotation zeroes one off-diagonal pair; sweeps repeat until the
    off-diagonal Frobenius mass drops below ``tol`` times the total mass.
    """
    a = check_symmetric(m).copy()
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    total = np.sqrt(np.sum(a * a))
    if total == 0.0:
        return EigenDecomp(np.zeros(n), np.eye(n))
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        if off <= tol * total:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return EigenDecomp(w[order], _fix_signs(v[:, order].copy()))


def check_psd(decomp: EigenDecomp, name="matrix") -> None:
    lam = decomp.eigenvalues
    if lam[0] < -PSD_RTOL * max(abs(lam[-1]), np.finfo(float).tiny):
        raise InvalidInputError(f"{name} is not positive semi-definite (min eigenvalue {lam[0]:.3g})")


def bisect_decreasing(
    f: Callable[[float], float],
    lo: float,
    hi: float,
    tol: float = 1e-12,
    max_doublings: int = 200,
    max_iter: int = 2000,
) -> float:
    """Root of a strictly decreasing ``f`` with ``f(lo) > 0``.

    ``hi`` is doubled (relative to ``lo``) until ``f(hi) < 0``.
    """
    flo = f(lo)
    if flo <= 0:
        if flo == 0:
            return lo
        raise NoRootError(f"f(lo)={flo} is not positive")
    fhi = f(hi)
    k = 0
    while fhi > 0:
        if k >= max_doublings:
            raise NoRootError(f"no sign change after {max_doublings} doublings")
        hi = lo + 2.0 * (hi - lo)
        fhi = f(hi)
        k += 1
    if fhi == 0:
        return hi
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        fm = f(mid)
        if abs(fm) <= tol:
            return mid
        if fm > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * min(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


def log_gamma(x: float) -> float:
    if not x > 0:
        raise DomainError(f"log_gamma requires x > 0, got {x}")
    return math.lgamma(x)


@dataclass(frozen=True)
class RngState:
    """Seed plus generator name; Philox is counter-based, so streams are
    identical across platforms for a fixed seed."""

    seed: int = 0
    algorithm: str = "philox"

    def generator(self) -> np.random.Generator:
        if self.algorithm != "philox":
            raise InvalidInputError(f"unsupported rng algorithm {self.algorithm!r}")
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed)))

    def spawn(self, k: int) -> list[np.random.Generator]:
        children = np.random.SeedSequence(self.seed).spawn(k)
        return [np.random.Generator(np.random.Philox(c)) for c in children]


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngState):
        return rng.generator()
    if rng is None or isinstance(rng, (int, np.integer)):
        return RngState(0 if rng is None else int(rng)).generator()
    raise InvalidInputError(f"cannot build a generator from {type(rng).__name__}")


def mc_expect(
    f: Callable[[np.ndarray], np.ndarray],
    n: int,
    samples: int,
    rng: RngState | int = 0,
    chunk: int = 200_000,
) -> np.ndarray:
    """Sample mean of ``f`` over i.i.d. standard-normal vectors of dimension ``n``.

    ``f`` receives a ``(batch, n)`` array and returns per-sample values stacked
    on axis 0.  Chunk ``k`` draws from substream ``k`` of the seed, so the
    result depends only on ``(seed, samples, chunk)``.
    """
    if samples < 1:
        raise InvalidInputError("samples must be >= 1")
    state = rng if isinstance(rng, RngState) else RngState(int(rng))
    n_chunks = -(-samples // chunk)
    gens = state.spawn(n_chunks)
    total = None
    for k, g in enumerate(gens):
        size = min(chunk, samples - k * chunk)
        vals = np.asarray(f(g.standard_normal((size, n))), dtype=float)
        part = vals.sum(axis=0)
        total = part if total is None else total + part
    return total / samples
