"""Semi-analytic model of the probing statistics on crescent states.

Because the photon-number probing is non-demolition, a finite stretch of
probing acts as one Gaussian conditioning map: an accumulated coupling beta
produces outcome p_p with density

    f(p_p) = pi^(-1/2) sum_n |c_n|^2 exp[-(p_p - beta n)^2]

and updates the amplitudes c_n -> c_n exp[-(beta n - p_p)^2 / 2] (times
normalization).  Applied to the displaced crescent state this predicts which
outcomes leave a two-lobe state with a dark Husimi trace on the p axis
(successful region) and which collapse it to a single blob.

The crescent family itself consists of the eigenstates of the non-normal
operator n - 2i|xi| x, interpolating from a number state (|xi| -> 0) to a
coherent state (|xi| >> 1).  The raw eigenvector bulges toward positive p;
the feedback protocol produces its mirror image (bulging toward negative p,
the two are complex conjugates in the Fock basis), so the displaced-state
helpers conjugate first to align orientations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize_scalar

from . import fock
from .fock import FockSpace, PAxisScanner, build_operator_set


class EigenvalueTieError(RuntimeError):
    """Two eigenvalues are equally near the target occupation."""

    def __init__(self, msg, candidates):
        super().__init__(msg)
        self.candidates = candidates


@dataclass(frozen=True)
class CrescentSpec:
    xi_abs: float
    n_star: int
    dim: int

    def __post_init__(self):
        if self.xi_abs < 0:
            raise ValueError("xi_abs must be >= 0")
        if self.dim < 4 * self.n_star:
            raise ValueError("dim must be >= 4 * n_star")


@dataclass(frozen=True)
class ProbeInteraction:
    beta: float

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")


@dataclass
class RegionAnalysis:
    """Outcome-axis decomposition: blob (I), two-lobe (II), merged-arm (III)."""

    p_grid: np.ndarray
    f: np.ndarray
    max_q: np.ndarray
    region_label: list
    border_I_II: Optional[float]
    border_II_III: Optional[float]
    region_II_mass: float
    f_maxima: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("p_p,f,maxQ,region_label\n")
            for p, fv, q, lab in zip(self.p_grid, self.f, self.max_q, self.region_label):
                fh.write(f"{p:.10g},{fv:.10g},{q:.10g},{lab}\n")


def crescent_state(spec: CrescentSpec) -> np.ndarray:
    """Eigenvector of n - 2i|xi| x with eigenvalue real part nearest n_star.

    Normalized, global phase fixed so the largest-magnitude amplitude is
    real positive.  Raises :class:`EigenvalueTieError` when the selection is
    ambiguous (e.g. a complex-conjugate eigenvalue pair).
    """
    ops = build_operator_set(FockSpace(spec.dim))
    A = ops.n - 2j * spec.xi_abs * ops.x
    w, V = np.linalg.eig(A)
    dist = np.abs(w.real - spec.n_star)
    order = np.argsort(dist)
    if len(order) > 1 and dist[order[1]] - dist[order[0]] < 1e-9:
        cand = w[order[:2]]
        raise EigenvalueTieError(
            f"eigenvalues {cand[0]:.6g} and {cand[1]:.6g} are equally near "
            f"n_star = {spec.n_star}", cand)
    lam = w[order[0]]
    v = V[:, order[0]]
    res = np.linalg.norm(A @ v - lam * v) / np.linalg.norm(v)
    if res > 1e-8:
        raise RuntimeError(f"eigenpair residual {res:.2g} exceeds 1e-8")
    v = v / np.linalg.norm(v)
    k = int(np.argmax(np.abs(v)))
    return v * np.exp(-1j * np.angle(v[k]))


def outcome_distribution(state: np.ndarray, beta: float) -> Callable[[np.ndarray], np.ndarray]:
    """Density of the integrated probe outcome for accumulated coupling beta."""
    probs = np.abs(state) ** 2
    levels = np.arange(state.size)

    def f(p_p):
        p = np.atleast_1d(np.asarray(p_p, dtype=float))
        out = (np.exp(-(p[:, None] - beta * levels[None, :]) ** 2) * probs[None, :]).sum(axis=1)
        out = out / np.sqrt(np.pi)
        return out if np.ndim(p_p) else float(out[0])

    return f


def conditional_update(state: np.ndarray, beta: float, p_p: float) -> np.ndarray:
    """Amplitude update c_n -> c_n exp[-(beta n - p_p)^2 / 2], renormalized."""
    levels = np.arange(state.size)
    out = state * np.exp(-0.5 * (beta * levels - p_p) ** 2)
    nrm = np.linalg.norm(out)
    if nrm < 1e-150:
        raise ValueError(f"outcome p_p = {p_p} lies far outside the state's support")
    return out / nrm


def displaced_crescent(spec: CrescentSpec, target_p: float | None = None) -> np.ndarray:
    """Crescent state oriented like the feedback-produced one, displaced so
    <p> = target_p (default 0.9 sqrt(n_star))."""
    if target_p is None:
        target_p = 0.9 * np.sqrt(spec.n_star)
    v = np.conj(crescent_state(spec))  # mirror: bulge toward negative p
    space = FockSpace(spec.dim)
    ops = build_operator_set(space)
    p0 = float(np.real(v.conj() @ ops.p @ v))
    U = fock.displacement_operator(1j * (target_p - p0), space)
    v = U @ v
    return v / np.linalg.norm(v)


def classify_regions(state: np.ndarray, beta: float, delta_prime: float = 0.005,
                     grid: np.ndarray | None = None,
                     n_star: int | None = None) -> RegionAnalysis:
    """Label each outcome by the character of the post-measurement state.

    Region II is the maximal contiguous run of outcomes whose conditioned
    state has max Husimi Q on the p axis below delta_prime; everything below
    it is region I, everything above region III.  Empty region II is a valid
    result.
    """
    d = state.size
    if grid is None:
        hi = 1.5 * beta * (n_star if n_star is not None else d / 4.0) + 5.0
        grid = np.linspace(0.0, hi, 512)
    f = outcome_distribution(state, beta)(grid)
    scanner = PAxisScanner(FockSpace(d), float(np.sqrt(d)), 257)
    max_q = np.empty_like(grid)
    for i, pp in enumerate(grid):
        try:
            c = conditional_update(state, beta, pp)
        except ValueError:
            max_q[i] = np.nan
            continue
        max_q[i] = scanner.max_q(np.outer(c, c.conj()))
    dark = max_q < delta_prime
    # maximal contiguous dark run
    best_lo = best_hi = None
    i = 0
    while i < len(grid):
        if dark[i]:
            j = i
            while j + 1 < len(grid) and dark[j + 1]:
                j += 1
            if best_lo is None or (j - i) > (best_hi - best_lo):
                best_lo, best_hi = i, j
            i = j + 1
        else:
            i += 1
    if best_lo is None:
        border_I_II = border_II_III = None
        labels = ["I" if (grid[i] <= grid[int(np.nanargmax(f))]) else "III"
                  for i in range(len(grid))]
        mass = 0.0
    else:
        border_I_II = float(grid[best_lo])
        border_II_III = float(grid[best_hi])
        labels = ["I" if g < border_I_II else ("II" if g <= border_II_III else "III")
                  for g in grid]
        dg = grid[1] - grid[0]
        mass = float(f[best_lo:best_hi + 1].sum() * dg)
    maxima = [(float(grid[i]), float(f[i])) for i in range(1, len(grid) - 1)
              if f[i] > f[i - 1] and f[i] >= f[i + 1]]
    return RegionAnalysis(p_grid=grid, f=f, max_q=max_q, region_label=labels,
                          border_I_II=border_I_II, border_II_III=border_II_III,
                          region_II_mass=mass, f_maxima=maxima)


def calibrate_xi(rho_b: np.ndarray, n_star: int | None = None,
                 xi_bounds: tuple = (1e-3, 3.0)) -> tuple[float, float, int]:
    """Best |xi| matching a simulated crescent (pre-displacement stage).

    Maximizes <v*|rho_b|v*> over xi, where v is the crescent eigenvector and
    the conjugation aligns its bulge with the feedback-produced orientation.
    The eigenvalue is selected near the state's own mean occupation (the
    feedback hands off well before the target occupation is reached, so the
    matching family member is the one at <n> of rho_b, not at the protocol
    target).  Returns (xi, overlap achieved, occupation used).

    The shape parameter xi transfers across the family: analyses at the
    protocol target reuse it with ``CrescentSpec(xi, n_star, dim)``.
    """
    dim = rho_b.shape[0]
    levels = np.arange(dim)
    n_sel = int(round(float(np.diagonal(rho_b).real @ levels)))
    n_sel = max(2, n_sel)

    def neg_overlap(log_xi):
        spec = CrescentSpec(xi_abs=float(np.exp(log_xi)), n_star=n_sel,
                            dim=max(dim, 4 * n_sel))
        try:
            v = np.conj(crescent_state(spec))[:dim]
            v = v / np.linalg.norm(v)
        except (EigenvalueTieError, RuntimeError):
            return 0.0
        return -float(np.real(v.conj() @ rho_b @ v))

    res = minimize_scalar(neg_overlap, bounds=(np.log(xi_bounds[0]), np.log(xi_bounds[1])),
                          method="bounded", options={"xatol": 1e-3})
    return float(np.exp(res.x)), -float(res.fun), n_sel


def estimate_ansatz_from_record(spec: CrescentSpec, beta: float, p_p: float):
    """Record-based prediction of the final superposition parameters.

    Conditions the displaced crescent on the integrated outcome p_p, centers
    the result, and fits the two-component displaced-squeezed family to it.
    Returns (FidelityResult, predicted state vector after centering).
    """
    from .fidelity import optimize_fidelity

    space = FockSpace(spec.dim)
    ops = build_operator_set(space)
    v = displaced_crescent(spec)
    c = conditional_update(v, beta, p_p)
    exp_x = float(np.real(c.conj() @ ops.x @ c))
    exp_p = float(np.real(c.conj() @ ops.p @ c))
    U = fock.displacement_operator(-(exp_x + 1j * exp_p), space)
    c = U @ c
    c = c / np.linalg.norm(c)
    rho = np.outer(c, c.conj())
    return optimize_fidelity(rho), c
