"""Ito integration of the measurement-conditioned master equation.

The conditioned state evolves under continuous photon-number probing of
strength M with detection efficiency eta, optional cavity decay kappa, and a
feedback Hamiltonian proportional to the x quadrature:

    d rho = M D[n] rho dt + kappa D[a] rho dt - i [c_fb * x, rho] dt
            + sqrt(M eta) H[n] rho dW

with the superoperators

    D[X] rho = X rho X^dag - (X^dag X rho + rho X^dag X) / 2
    H[X] rho = X rho + rho X^dag - Tr[(X + X^dag) rho] rho

The innovation dW is a Wiener increment, Normal(0, dt).  The homodyne
photocurrent increment is reconstructed as

    dy = 2 sqrt(M eta) <n> dt + dW

which is the single place where the photocurrent normalization is fixed: the
factor 2 matches the H[n] form above, so the accumulated signal over a window
[0, T] relates to the one-shot conditioning map of the segmented probe model
through beta^2 = 2 M eta T and p_p = y / sqrt(2 T).

Three discretizations are provided (all default to M dt = 1e-3):

* ``exp`` (engine default): the number channel is applied multiplicatively,
  rho_jk *= g_j g_k with Gaussian factors g_j = exp[-(beta j - p)^2 / 2],
  beta = sqrt(2 M eta dt), p = beta <n> + dW / sqrt(2 dt), together with the
  unmonitored-dephasing factor exp[-M (1-eta) dt (j-k)^2 / 2], a Kraus pair
  for cavity loss, and the exact displacement unitary for the feedback term.
  Driven by the same Wiener increments as plain Euler-Maruyama and strongly
  convergent to the same equation, but unconditionally stable, positive, and
  purity-preserving at eta = 1, kappa = 0.
* ``euler``: textbook additive Euler-Maruyama with per-step Hermitization
  and trace renormalization.  Unstable on wide bases: the H[n] multipliers
  sqrt(M dt) (j + k - 2<n>) reach order one for tail elements at dim ~ 40,
  and the top diagonal corner has no D[n] damping; use for narrow states or
  small M dt when an independent additive route is wanted.
* ``kraus``: as ``exp`` but with the segment outcome sampled from the exact
  Gaussian mixture (ancestor sampling) instead of being innovation-driven;
  the exact discrete filter, at the cost of a different randomness layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .fock import FockSpace, OperatorSet, build_operator_set, hermitize

#: Kept in sync with the integrator default; stiffness guard is 1e-2.
DEFAULT_M_DT = 1e-3


class IntegrationError(RuntimeError):
    """Divergence (NaN/Inf) in the conditioned state."""

    def __init__(self, msg: str, step: int | None = None):
        super().__init__(msg)
        self.step = step


@dataclass(frozen=True)
class SmeParams:
    """Physical parameters of the probing channel.

    Rates are plain angular-frequency-free inverse seconds; only products
    rate*time enter the dynamics.
    """

    M: float
    eta: float = 1.0
    kappa: float = 0.0
    dt: float = 1e-3

    def __post_init__(self):
        if self.M < 0:
            raise ValueError("M must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.M * self.dt > 1e-2:
            raise ValueError(
                f"M*dt = {self.M * self.dt:.3g} exceeds stiffness guard 1e-2"
            )


class NoiseStream:
    """Reproducible Wiener increments on a fixed base lattice.

    Generator: numpy Philox (counter-based) keyed through
    ``numpy.random.SeedSequence``; the increment sequence is a pure function
    of the seed material, stable across platforms for a given numpy version.

    Increments are assembled from a base lattice of resolution ``dt_base``
    (default dt/4).  An integration step of dt = m * dt_base consumes m base
    normals, so halving dt re-traverses the *same* Brownian path at finer
    resolution -- ensemble statistics then shift only by the discretization
    error, not by a fresh noise draw.  ``counter`` indexes the base lattice.
    """

    def __init__(self, seed, dt: float, dt_base: float | None = None):
        if dt_base is None:
            dt_base = dt / 4.0
        m = dt / dt_base
        if abs(m - round(m)) > 1e-9 or round(m) < 1:
            raise ValueError(f"dt = {dt} is not an integer multiple of dt_base = {dt_base}")
        self._m = int(round(m))
        self.dt = dt
        self.dt_base = dt_base
        self.seed = seed
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self._gen = np.random.Generator(np.random.Philox(ss))
        self.counter = 0

    @classmethod
    def for_trajectory(cls, base_seed: int, index: int, dt: float,
                       dt_base: float | None = None) -> "NoiseStream":
        """Stream for trajectory ``index``: SeedSequence(base_seed, spawn_key=(index,)).

        The SeedSequence hash is the stated stable per-trajectory seed map, so
        ensembles are reproducible and independent of scheduling order.
        """
        ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(index,))
        return cls(ss, dt, dt_base)

    def wiener_increments(self, n: int) -> np.ndarray:
        """Next n increments dW ~ Normal(0, dt), consuming n*m base normals."""
        z = self._gen.standard_normal(n * self._m)
        self.counter += n * self._m
        return z.reshape(n, self._m).sum(axis=1) * np.sqrt(self.dt_base)

    def uniforms(self, n: int) -> np.ndarray:
        """Auxiliary uniforms (used by the Kraus cross-check integrator)."""
        self.counter += n * self._m  # keep lattice bookkeeping monotone
        return self._gen.random(n)

    def normals(self, n: int) -> np.ndarray:
        """Auxiliary unit normals (Kraus cross-check integrator)."""
        self.counter += n * self._m
        return self._gen.standard_normal(n)


@dataclass(frozen=True)
class StepRecord:
    """One integrator step of the detection record and tracked moments."""

    t: float
    dW: float
    dy: float
    exp_n: float
    exp_x: float
    exp_p: float
    M_t: float
    e_f: float


class StepLog:
    """Column-oriented log of StepRecords (cheap to grow, cheap to slice)."""

    COLUMNS = ("t", "dW", "dy", "exp_n", "exp_x", "exp_p", "M_t", "e_f")

    def __init__(self):
        self._chunks: list[np.ndarray] = []
        self._buf = np.empty((1024, len(self.COLUMNS)))
        self._fill = 0

    def append(self, *row: float) -> None:
        if self._fill == self._buf.shape[0]:
            self._chunks.append(self._buf)
            self._buf = np.empty_like(self._buf)
            self._fill = 0
        self._buf[self._fill] = row
        self._fill += 1

    def as_array(self) -> np.ndarray:
        parts = self._chunks + [self._buf[: self._fill]]
        return np.concatenate(parts, axis=0) if parts else np.empty((0, 8))

    def column(self, name: str) -> np.ndarray:
        return self.as_array()[:, self.COLUMNS.index(name)]

    def __len__(self) -> int:
        return sum(c.shape[0] for c in self._chunks) + self._fill

    def __getitem__(self, i: int) -> StepRecord:
        return StepRecord(*self.as_array()[i])

    def __iter__(self) -> Iterator[StepRecord]:
        for row in self.as_array():
            yield StepRecord(*row)

    def extend_from(self, other: "StepLog") -> None:
        for row in other.as_array():
            self.append(*row)

    def to_csv(self, path) -> None:
        arr = self.as_array()
        np.savetxt(path, arr, delimiter=",", header=",".join(self.COLUMNS), comments="")

    def to_npy(self, path) -> None:
        arr = np.core.records.fromarrays(self.as_array().T, names=",".join(self.COLUMNS))
        np.save(path, arr)


def superop_D(X: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """D[X] rho = X rho X^dag - (X^dag X rho + rho X^dag X)/2."""
    if X.shape != rho.shape:
        raise ValueError(f"shape mismatch: {X.shape} vs {rho.shape}")
    XdX = X.conj().T @ X
    return X @ rho @ X.conj().T - 0.5 * (XdX @ rho + rho @ XdX)


def superop_H(X: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """H[X] rho = X rho + rho X^dag - Tr[(X + X^dag) rho] rho."""
    if X.shape != rho.shape:
        raise ValueError(f"shape mismatch: {X.shape} vs {rho.shape}")
    mean = np.trace((X + X.conj().T) @ rho)
    return X @ rho + rho @ X.conj().T - mean * rho


def sme_step(rho: np.ndarray, params: SmeParams, H_fb: np.ndarray,
             dW: float, ops: OperatorSet | None = None) -> tuple[np.ndarray, StepRecord]:
    """Single Euler-Maruyama step of the conditioned master equation.

    Reference implementation built from the generic superoperators; the
    trajectory engine uses :class:`SmeIntegrator`, which computes the same
    update with number-basis shortcuts.
    """
    if ops is None:
        ops = build_operator_set(FockSpace(rho.shape[0]))
    exp_n = np.trace(ops.n @ rho).real
    drift = params.M * superop_D(ops.n, rho)
    if params.kappa > 0:
        drift = drift + params.kappa * superop_D(ops.a, rho)
    if H_fb is not None and np.any(H_fb):
        drift = drift - 1j * (H_fb @ rho - rho @ H_fb)
    rho_new = rho + drift * params.dt + np.sqrt(params.M * params.eta) * dW * superop_H(ops.n, rho)
    rho_new = hermitize(rho_new)
    tr = np.trace(rho_new).real
    if not np.isfinite(tr) or tr <= 0:
        raise IntegrationError(f"state diverged (trace = {tr})")
    rho_new = rho_new / tr
    dy = 2.0 * np.sqrt(params.M * params.eta) * exp_n * params.dt + dW
    rec = StepRecord(
        t=np.nan, dW=dW, dy=dy, exp_n=exp_n,
        exp_x=np.trace(ops.x @ rho).real, exp_p=np.trace(ops.p @ rho).real,
        M_t=params.M, e_f=0.0,
    )
    return rho_new, rec


class SmeIntegrator:
    """Stepper specialized to photon-number probing on a Fock basis.

    All three Lindblad/feedback structures reduce to banded or elementwise
    updates in the number basis, which keeps a dim=40 step in the tens of
    microseconds:

    * D[n] rho: elementwise multiply by -(j-k)^2/2,
    * H[n] rho: elementwise multiply by (j + k - 2<n>),
    * D[a] rho: one shifted copy plus an elementwise multiply,
    * [x, rho]: two BLAS products with the tridiagonal x matrix.
    """

    def __init__(self, space: FockSpace):
        self.space = space
        d = space.dim
        j = np.arange(d, dtype=float)
        self._levels = j
        self._decay = -0.5 * (j[:, None] - j[None, :]) ** 2
        self._sumjk = j[:, None] + j[None, :]
        self._shift = np.sqrt(np.outer(j[1:] + 0.0, j[1:] + 0.0))  # sqrt((j+1)(k+1)) block
        self._sqrt_lvl = np.sqrt(j[1:])
        self.ops = build_operator_set(space)
        self._x = self.ops.x
        xeig, xvec = np.linalg.eigh(self._x)
        self._xeig = xeig
        self._xvec = xvec
        self._xvec_h = xvec.conj().T

    def moments(self, rho: np.ndarray) -> tuple[float, float, float]:
        """(<n>, <x>, <p>) from the main and first diagonals."""
        diag = np.diagonal(rho).real
        sub = np.diagonal(rho, offset=-1)
        exp_n = float(diag @ self._levels)
        exp_x = float(self._sqrt_lvl @ sub.real)
        exp_p = float(self._sqrt_lvl @ sub.imag)
        return exp_n, exp_x, exp_p

    def var_n(self, rho: np.ndarray) -> float:
        diag = np.diagonal(rho).real
        m = diag @ self._levels
        return float(diag @ self._levels**2 - m * m)

    def step_euler(self, rho: np.ndarray, M_t: float, eta: float, kappa: float,
                   fb_coeff: float, dW: float, dt: float,
                   exp_n: float | None = None) -> np.ndarray:
        """Additive Euler-Maruyama step; feedback Hamiltonian is fb_coeff * x."""
        if exp_n is None:
            exp_n = float(np.diagonal(rho).real @ self._levels)
        factor = (M_t * dt) * self._decay
        if M_t > 0 and eta > 0:
            factor = factor + (np.sqrt(M_t * eta) * dW) * (self._sumjk - 2.0 * exp_n)
        new = rho + factor * rho
        if kappa > 0:
            loss = -0.5 * self._sumjk * rho
            loss[:-1, :-1] += self._shift * rho[1:, 1:]
            new += (kappa * dt) * loss
        if fb_coeff != 0.0:
            xr = self._x @ rho
            new -= (1j * fb_coeff * dt) * (xr - xr.conj().T)
        new = 0.5 * (new + new.conj().T)
        tr = np.trace(new).real
        if not np.isfinite(tr) or tr <= 0:
            raise IntegrationError(f"state diverged (trace = {tr})")
        return new / tr

    def _condition(self, rho: np.ndarray, beta: float, p_seg: float) -> np.ndarray:
        g = np.exp(-0.5 * (beta * self._levels - p_seg) ** 2)
        return rho * np.outer(g, g)

    def _unmonitored_dephasing(self, rho: np.ndarray, M_t, eta, dt) -> np.ndarray:
        return rho * np.exp((M_t * (1.0 - eta) * dt) * self._decay)

    def _amplitude_damp(self, rho: np.ndarray, kappa: float, dt: float) -> np.ndarray:
        # leading amplitude-damping Kraus pair; error O((kappa dt n)^2) per step
        d = self.space.dim
        gam = 1.0 - np.exp(-kappa * dt)
        e0 = np.sqrt((1.0 - gam) ** np.arange(d))
        out = rho * np.outer(e0, e0)
        k1 = self._sqrt_lvl * np.sqrt(gam) * np.sqrt((1.0 - gam) ** (np.arange(1, d) - 1.0))
        out[:-1, :-1] = out[:-1, :-1] + rho[1:, 1:] * np.outer(k1, k1)
        return out

    def _feedback_displace(self, rho: np.ndarray, fb_coeff: float, dt: float) -> np.ndarray:
        # exp(-i c x dt) = D(-i c dt / 2): exact unitary via the x eigenbasis
        phases = np.exp(-1j * fb_coeff * dt * self._xeig)
        U = (self._xvec * phases) @ self._xvec_h
        return U @ rho @ U.conj().T

    def step_exp(self, rho: np.ndarray, M_t: float, eta: float, kappa: float,
                 fb_coeff: float, dW: float, dt: float,
                 exp_n: float | None = None) -> np.ndarray:
        """Multiplicative (exponential) step driven by the innovation dW."""
        if M_t > 0 and eta > 0:
            if exp_n is None:
                exp_n = float(np.diagonal(rho).real @ self._levels)
            beta = np.sqrt(2.0 * M_t * eta * dt)
            p_seg = beta * exp_n + dW / np.sqrt(2.0 * dt)
            rho = self._condition(rho, beta, p_seg)
        if M_t > 0 and eta < 1.0:
            rho = self._unmonitored_dephasing(rho, M_t, eta, dt)
        if kappa > 0:
            rho = self._amplitude_damp(rho, kappa, dt)
        if fb_coeff != 0.0:
            rho = self._feedback_displace(rho, fb_coeff, dt)
        rho = 0.5 * (rho + rho.conj().T)
        tr = np.trace(rho).real
        if not np.isfinite(tr) or tr <= 0:
            raise IntegrationError(f"state diverged (trace = {tr})")
        return rho / tr

    def step_kraus(self, rho: np.ndarray, M_t: float, eta: float, kappa: float,
                   fb_coeff: float, dt: float, noise: NoiseStream) -> tuple[np.ndarray, float]:
        """Exact-filter cross-check step: mixture-sampled segment outcome.

        Returns (rho', p_segment).  CPTP by construction.
        """
        beta = np.sqrt(2.0 * M_t * eta * dt)
        if beta > 0:
            diag = np.clip(np.diagonal(rho).real, 0.0, None)
            diag = diag / diag.sum()
            u = noise.uniforms(1)[0]
            n_true = int(np.searchsorted(np.cumsum(diag), u))
            p_seg = beta * n_true + noise.normals(1)[0] / np.sqrt(2.0)
            rho = self._condition(rho, beta, p_seg)
        else:
            p_seg = 0.0
        if M_t > 0 and eta < 1.0:
            rho = self._unmonitored_dephasing(rho, M_t, eta, dt)
        if kappa > 0:
            rho = self._amplitude_damp(rho, kappa, dt)
        if fb_coeff != 0.0:
            rho = self._feedback_displace(rho, fb_coeff, dt)
        rho = 0.5 * (rho + rho.conj().T)
        return rho / np.trace(rho).real, p_seg


Schedule = Callable[[float, np.ndarray], tuple[float, float, float]]


def integrate(rho0: np.ndarray, schedule: Schedule, params: SmeParams,
              noise: NoiseStream, t_end: float,
              method: str = "exp") -> tuple[np.ndarray, StepLog]:
    """Run the conditioned dynamics from t=0 to t_end.

    ``schedule(t, rho) -> (M_t, fb_coeff, e_f)`` supplies the ramped
    measurement strength and the feedback Hamiltonian coefficient on x (the
    recorded policy value e_f is carried through to the log).  Raises
    :class:`IntegrationError` with the failing step index on divergence.
    """
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    eng = SmeIntegrator(FockSpace(rho0.shape[0]))
    log = StepLog()
    rho = rho0.copy()
    dt = params.dt
    n_steps = int(round(t_end / dt))
    t = 0.0
    dws = noise.wiener_increments(n_steps) if method in ("euler", "exp") else None
    for k in range(n_steps):
        M_t, fb_coeff, e_f = schedule(t, rho)
        exp_n, exp_x, exp_p = eng.moments(rho)
        try:
            if method == "euler":
                dW = dws[k]
                rho = eng.step_euler(rho, M_t, params.eta, params.kappa, fb_coeff, dW, dt, exp_n)
            elif method == "exp":
                dW = dws[k]
                rho = eng.step_exp(rho, M_t, params.eta, params.kappa, fb_coeff, dW, dt, exp_n)
            elif method == "kraus":
                rho, p_seg = eng.step_kraus(rho, M_t, params.eta, params.kappa,
                                            fb_coeff, dt, noise)
                dW = p_seg * np.sqrt(2.0 * dt) - 2.0 * np.sqrt(M_t * params.eta) * exp_n * dt
            else:
                raise ValueError(f"unknown method {method!r}")
        except IntegrationError as err:
            raise IntegrationError(str(err), step=k) from None
        dy = 2.0 * np.sqrt(M_t * params.eta) * exp_n * dt + dW
        log.append(t, dW, dy, exp_n, exp_x, exp_p, M_t, e_f)
        t += dt
    return rho, log
