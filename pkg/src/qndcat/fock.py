"""Truncated Fock-space numerics for a single cavity mode.

Quadrature convention used throughout the package:

    x = (a + a^dag) / 2,    p = (a - a^dag) / (2i)

so the vacuum quadrature variance is 1/4 and a coherent state labelled
``alpha`` has <x> + i<p> = alpha.  All thresholds elsewhere in the package
assume this convention.
"""

from __future__ import annotations

import cmath
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm


class TruncationError(ValueError):
    """Requested state does not fit safely in the truncated basis."""


@dataclass(frozen=True)
class FockSpace:
    """Fock basis |0>, ..., |dim-1>."""

    dim: int

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"need dim >= 2, got {self.dim}")


@dataclass(frozen=True)
class OperatorSet:
    """Dense matrices for a, a^dag, n, x, p on a truncated Fock basis."""

    a: np.ndarray
    a_dag: np.ndarray
    n: np.ndarray
    x: np.ndarray
    p: np.ndarray

    @property
    def dim(self) -> int:
        return self.a.shape[0]


def build_operator_set(space: FockSpace) -> OperatorSet:
    """Ladder and quadrature matrices; a[k-1, k] = sqrt(k)."""
    d = space.dim
    a = np.diag(np.sqrt(np.arange(1, d, dtype=float)), k=1).astype(complex)
    a_dag = a.conj().T
    n = a_dag @ a
    x = (a + a_dag) / 2.0
    p = (a - a_dag) / 2.0j
    return OperatorSet(a=a, a_dag=a_dag, n=n, x=x, p=p)


def fock_state(n: int, space: FockSpace) -> np.ndarray:
    """Number state |n> as a unit amplitude vector."""
    if not 0 <= n < space.dim:
        raise ValueError(f"Fock index {n} outside basis 0..{space.dim - 1}")
    v = np.zeros(space.dim, dtype=complex)
    v[n] = 1.0
    return v


def coherent_state(alpha: complex, space: FockSpace) -> np.ndarray:
    """Coherent state, amplitudes proportional to alpha^n / sqrt(n!).

    Truncation safety requires |alpha|^2 <= dim/4.
    """
    if abs(alpha) ** 2 > space.dim / 4.0 * (1 + 1e-9):
        raise TruncationError(
            f"|alpha|^2 = {abs(alpha)**2:.3g} exceeds dim/4 = {space.dim / 4.0:.3g}"
        )
    v = np.empty(space.dim, dtype=complex)
    v[0] = 1.0
    for k in range(1, space.dim):
        v[k] = v[k - 1] * alpha / np.sqrt(k)
    v /= np.linalg.norm(v)
    return v


def displacement_operator(gamma: complex, space: FockSpace) -> np.ndarray:
    """D(gamma) = exp(gamma a^dag - gamma* a) on the truncated basis."""
    d = space.dim
    a = np.diag(np.sqrt(np.arange(1, d, dtype=float)), k=1).astype(complex)
    return expm(gamma * a.conj().T - np.conj(gamma) * a)


def squeeze_operator(zeta: complex, space: FockSpace) -> np.ndarray:
    """S(zeta) = exp[(zeta* a^2 - zeta a^dag^2)/2] on the truncated basis."""
    d = space.dim
    a = np.diag(np.sqrt(np.arange(1, d, dtype=float)), k=1).astype(complex)
    a2 = a @ a
    return expm(0.5 * (np.conj(zeta) * a2 - zeta * a2.conj().T))


_SQRT_CACHE: dict[int, list[float]] = {}


def _sqrt_table(d: int) -> list[float]:
    tab = _SQRT_CACHE.get(d)
    if tab is None:
        tab = [float(np.sqrt(k)) for k in range(d + 1)]
        _SQRT_CACHE[d] = tab
    return tab


def _check_dsq_truncation(alpha: complex, zeta: complex, space: FockSpace) -> None:
    r = abs(zeta)
    if r > 1.5:
        raise TruncationError(f"|zeta| = {r:.3g} exceeds squeezing bound 1.5")
    if abs(alpha) ** 2 * np.exp(2 * r) > space.dim / 4.0 * (1 + 1e-9):
        raise TruncationError(
            f"|alpha|^2 e^(2|zeta|) = {abs(alpha)**2 * np.exp(2 * r):.3g} "
            f"exceeds dim/4 = {space.dim / 4.0:.3g}"
        )


def displaced_squeezed_state(alpha: complex, zeta: complex, space: FockSpace) -> np.ndarray:
    """D(alpha) S(zeta) |0>, built from the operator exponentials."""
    _check_dsq_truncation(alpha, zeta, space)
    v = displacement_operator(alpha, space) @ squeeze_operator(zeta, space)[:, 0]
    return v / np.linalg.norm(v)


def displaced_squeezed_fast(alpha: complex, zeta: complex, space: FockSpace) -> np.ndarray:
    """Same state as :func:`displaced_squeezed_state` via a three-term recurrence.

    O(dim) instead of O(dim^3); used in optimizer inner loops.  The global
    phase matches the operator-exponential construction, which matters when
    two such states are superposed with a relative phase.
    """
    _check_dsq_truncation(alpha, zeta, space)
    return dsq_amplitudes(alpha, zeta, space)


def dsq_amplitudes(alpha: complex, zeta: complex, space: FockSpace) -> np.ndarray:
    """Displaced-squeezed amplitudes with only an anti-overflow guard.

    The strict dim/4 margin of the public constructors is too conservative
    for optimizer loops that probe |alpha| ~ sqrt(dim)/2; callers here are
    expected to check tail population themselves.
    """
    d = space.dim
    r = abs(zeta)
    if r > 1.5 or abs(alpha) ** 2 * np.exp(2 * r) > d:
        raise TruncationError("parameters far outside the truncated basis")
    alpha = complex(alpha)
    mu = float(np.cosh(r))
    nu = complex(zeta) * np.sinh(r) / r if r > 0 else 0.0j  # e^{i theta} sinh r
    A = alpha * mu + alpha.conjugate() * nu
    sq = _sqrt_table(d)
    # <0|D(alpha)S(zeta)|0> fixes normalization and phase of the recurrence;
    # plain Python complex arithmetic keeps the loop fast in optimizer calls.
    c = [0j] * d
    c[0] = cmath.exp(-0.5 * abs(alpha) ** 2 - 0.5 * alpha.conjugate() ** 2 * nu / mu) / np.sqrt(mu)
    if d > 1:
        c[1] = A * c[0] / mu
    for k in range(1, d - 1):
        c[k + 1] = (A * c[k] - nu * sq[k] * c[k - 1]) / (mu * sq[k + 1])
    out = np.asarray(c)
    nrm = np.linalg.norm(out)
    if nrm < 1e-12:
        raise TruncationError("displaced squeezed amplitudes underflow the basis")
    return out / nrm


def density_matrix(psi: np.ndarray) -> np.ndarray:
    """Pure-state density matrix |psi><psi|."""
    return np.outer(psi, psi.conj())


def expectation(op: np.ndarray, rho: np.ndarray) -> complex:
    """Tr(op rho)."""
    return complex(np.trace(op @ rho))


def hermitize(rho: np.ndarray) -> np.ndarray:
    return (rho + rho.conj().T) / 2.0


def renormalize(rho: np.ndarray) -> np.ndarray:
    return rho / np.trace(rho).real


def validate_density_matrix(rho: np.ndarray, check_positivity: bool = False,
                            herm_tol: float = 1e-10, trace_tol: float = 1e-9,
                            eig_tol: float = -1e-8) -> None:
    """Raise if rho violates the Hermiticity / trace / positivity contracts."""
    herm = np.max(np.abs(rho - rho.conj().T))
    if herm >= herm_tol:
        raise ValueError(f"Hermiticity violation {herm:.3g} >= {herm_tol:.3g}")
    tr = np.trace(rho)
    if abs(tr - 1.0) >= trace_tol:
        raise ValueError(f"trace deviates from 1 by {abs(tr - 1.0):.3g}")
    if check_positivity:
        w = np.linalg.eigvalsh(hermitize(rho))
        if w.min() < eig_tol:
            raise ValueError(f"negative eigenvalue {w.min():.3g} < {eig_tol:.3g}")


def top_level_population(rho: np.ndarray, fraction: float = 0.1) -> float:
    """Population in the top ``fraction`` of Fock levels (truncation leakage)."""
    d = rho.shape[0]
    k = max(1, int(np.ceil(fraction * d)))
    return float(np.sum(np.diag(rho).real[d - k:]))


def apply_displacement(rho: np.ndarray, gamma: complex, space: FockSpace,
                       leak_tol: float = 1e-6) -> np.ndarray:
    """D(gamma) rho D(gamma)^dag; warns (not fatal) on truncation overflow."""
    U = displacement_operator(gamma, space)
    out = U @ rho @ U.conj().T
    out = renormalize(hermitize(out))
    if top_level_population(out, 1.0 / space.dim) > leak_tol:
        warnings.warn(
            f"displacement by {gamma:.3g} pushed population "
            f"{top_level_population(out, 1.0 / space.dim):.2g} into the top Fock level",
            RuntimeWarning,
        )
    return out


# ---------------------------------------------------------------------------
# Husimi Q function
# ---------------------------------------------------------------------------

def _coherent_rows(alphas: np.ndarray, dim: int) -> np.ndarray:
    """Rows of normalized coherent amplitude vectors for an array of alphas."""
    out = np.empty((alphas.size, dim), dtype=complex)
    out[:, 0] = 1.0
    for k in range(1, dim):
        out[:, k] = out[:, k - 1] * alphas / np.sqrt(k)
    out /= np.linalg.norm(out, axis=1)[:, None]
    return out


def husimi_q(rho: np.ndarray, x: float, p: float) -> float:
    """Q(x, p) = <alpha|rho|alpha> / pi at alpha = x + i p."""
    v = _coherent_rows(np.array([x + 1j * p]), rho.shape[0])[0]
    q = np.real(v.conj() @ rho @ v) / np.pi
    return float(q)


def husimi_grid(rho: np.ndarray, xs: np.ndarray, ps: np.ndarray) -> np.ndarray:
    """Q on the Cartesian grid xs x ps; returns array of shape (len(xs), len(ps))."""
    X, P = np.meshgrid(xs, ps, indexing="ij")
    al = (X + 1j * P).ravel()
    C = _coherent_rows(al, rho.shape[0])
    q = np.einsum("ij,jk,ik->i", C.conj(), rho, C).real / np.pi
    return q.reshape(X.shape)


class PAxisScanner:
    """Reusable max-of-Q scanner along the p axis (x = 0).

    Precomputes the coherent vectors for a fixed grid so the scan costs one
    dense contraction per call; the feedback protocol polls this every few
    integrator steps.
    """

    def __init__(self, space: FockSpace, p_max: float, samples: int):
        if samples < 64:
            raise ValueError(f"need samples >= 64, got {samples}")
        self.grid = np.linspace(-p_max, p_max, samples)
        self._rows = _coherent_rows(1j * self.grid, space.dim)
        self._rows_conj = self._rows.conj()

    def max_q(self, rho: np.ndarray) -> float:
        q = ((self._rows @ rho) * self._rows_conj).sum(axis=1).real
        return float(q.max() / np.pi)


def max_q_on_p_axis(rho: np.ndarray, p_max: float | None = None,
                    samples: int = 257) -> float:
    """Max of Q(0, p) over a uniform grid p in [-p_max, p_max]."""
    d = rho.shape[0]
    if p_max is None:
        p_max = float(np.sqrt(d))
    scanner = PAxisScanner(FockSpace(d), p_max, samples)
    return scanner.max_q(rho)


def write_husimi_csv(path, rho: np.ndarray, xs: np.ndarray, ps: np.ndarray) -> None:
    """Dump a Q grid as CSV with header x,p,Q (row-major over the grid)."""
    q = husimi_grid(rho, xs, ps)
    with open(path, "w") as fh:
        fh.write("x,p,Q\n")
        for i, xv in enumerate(xs):
            for j, pv in enumerate(ps):
                fh.write(f"{xv:.10g},{pv:.10g},{q[i, j]:.10g}\n")
