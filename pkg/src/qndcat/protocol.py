"""Five-stage feedback protocol for producing two-lobe superposition states.

Starting from vacuum: (a) photon-number feedback steers the field toward a
target occupation n_star until the p quadrature drops below
(n_star - 1)^(1/4) - sqrt(n_star), leaving a crescent-shaped state; (b) the
field is displaced up to <p> = 0.9 sqrt(n_star); (c) feedback-free probing
conditions the state until the Husimi density along the p axis falls below
delta (two separated lobes) or the state collapses to a quasi-coherent blob,
in which case the feedback stage is restarted on the collapsed field; (d) a
final displacement centers the state.  The probe is ramped on slowly and off
quickly around every displacement, and the whole attempt shares one time
budget of 10 / M_max.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import fock
from .fock import FockSpace, PAxisScanner, build_operator_set
from .sme import IntegrationError, NoiseStream, SmeIntegrator, StepLog

#: rate-time products of the reference ramps: 200 ns and 2 ns at M = 2.12 MHz
RAMP_ON_M_PRODUCT = 2.12e6 * 200e-9
RAMP_OFF_M_PRODUCT = 2.12e6 * 2e-9


class StagePhase(enum.Enum):
    FOCK_FEEDBACK = "fock_feedback"
    DISPLACE_TO_PROBE = "displace_to_probe"
    PROBE_NO_FEEDBACK = "probe_no_feedback"
    FINAL_CENTER = "final_center"
    SUCCESS = "success"
    QUASI_COHERENT_RESTART = "quasi_coherent_restart"
    TIMEOUT = "timeout"


@dataclass
class ProtocolConfig:
    """All physical and numerical knobs of one protocol run.

    Rates (M_max, G, kappa) are in inverse seconds; every place they enter
    the dynamics is a rate*time product, so only ratios to M_max matter.
    Fields left at None are resolved to their defaults in __post_init__.
    """

    n_star: int = 10
    M_max: float = 2.12e6
    eta: float = 1.0
    kappa: float = 0.0
    G: Optional[float] = None            # default 0.8 * M_max / sqrt(n_star), calibrated
    delta: float = 0.005
    dt: Optional[float] = None           # default 1e-3 / M_max
    dim: Optional[int] = None            # default 4 * n_star
    t_budget: Optional[float] = None     # default 10 / M_max
    t_on: Optional[float] = None         # default 200 ns scaled to M_max = 2.12 MHz
    t_off: Optional[float] = None        # default 2 ns, same scaling
    p_probe_factor: float = 0.9
    seed: int = 0
    # collapse detector and polling
    mandel_band: tuple = (0.5, 2.0)
    gaussian_overlap_threshold: float = 0.9
    gaussian_fit_max_squeeze: float = 0.5    # blobs are nearly coherent; arcs need r >> this
    detector_warmup_beta2: float = 0.1       # min integrated 2 M eta t before detector engages
    deadend_var: float = 4.0                 # ring/Fock-like dead end: Var(n) below this ...
    deadend_axis_fraction: float = 0.7       # ... and axis Q at least this fraction of global max
    check_interval: Optional[float] = None   # physical time between probe checks
    threshold_poll_interval: Optional[float] = None  # feedback-stage <p> polling period
    q_axis_p_max: Optional[float] = None
    q_axis_samples: int = 257
    restart_reset_to_vacuum: bool = False
    leak_tol: float = 1e-6
    method: str = "exp"

    def __post_init__(self):
        if self.n_star < 2:
            raise ValueError("n_star must be >= 2")
        if self.delta > 0.005:
            raise ValueError("delta must be <= 0.005")
        if self.M_max <= 0:
            raise ValueError("M_max must be positive")
        if self.G is None:
            # calibrated: fastest hand-off that still lets the measurement
            # number-squeeze the descending state into a usable crescent
            self.G = 0.8 * self.M_max / np.sqrt(self.n_star)
        if self.dt is None:
            self.dt = 1e-3 / self.M_max
        if self.dim is None:
            self.dim = 4 * self.n_star
        if self.dim < 4 * self.n_star:
            raise ValueError("dim must be >= 4 * n_star for protocol use")
        if self.t_budget is None:
            self.t_budget = 10.0 / self.M_max
        if self.t_on is None:
            self.t_on = RAMP_ON_M_PRODUCT / self.M_max
        if self.t_off is None:
            self.t_off = RAMP_OFF_M_PRODUCT / self.M_max
        if not self.t_off < self.t_on / 10.0:
            raise ValueError("need t_off << t_on")
        if self.check_interval is None:
            self.check_interval = 50e-3 / self.M_max  # 50 default steps
        if self.threshold_poll_interval is None:
            # slow polling rides through transient noise dips of <p>, letting
            # the crescent mature before the hand-off fires
            self.threshold_poll_interval = 0.5 / self.M_max
        if self.q_axis_p_max is None:
            self.q_axis_p_max = float(np.sqrt(self.dim))

    @property
    def p_threshold(self) -> float:
        """Feedback hand-off point: (n_star - 1)^(1/4) - sqrt(n_star)."""
        return (self.n_star - 1.0) ** 0.25 - np.sqrt(self.n_star)

    @property
    def p_probe_target(self) -> float:
        return self.p_probe_factor * np.sqrt(self.n_star)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mandel_band"] = list(self.mandel_band)
        return d


@dataclass
class FidelityBlock:
    """Summary of the final-state fidelity optimization (filled by run_protocol)."""

    value: float
    ansatz: dict
    converged: bool
    non_bimodal: bool
    evaluations: int


@dataclass
class TrajectoryRecord:
    """Everything observable about one protocol attempt."""

    config: dict
    outcome: str                              # success | timeout | numerical-failure
    restart_count: int
    transitions: list                         # [(t, stage_name), ...]
    final_rho: np.ndarray
    log: StepLog
    stage_b_rho: Optional[np.ndarray] = None
    fidelity: Optional[FidelityBlock] = None
    max_q_at_stop: Optional[float] = None
    leak_flag: bool = False
    max_top_population: float = 0.0
    error: Optional[str] = None

    SCHEMA = "qndcat/trajectory-record/v1"

    def to_json_dict(self, trace_points: int = 200) -> dict:
        arr = self.log.as_array()
        stride = max(1, len(arr) // trace_points) if len(arr) else 1
        traces = {
            name: arr[::stride, i].tolist()
            for i, name in enumerate(StepLog.COLUMNS)
            if name in ("t", "exp_n", "exp_x", "exp_p", "M_t", "e_f")
        } if len(arr) else {}
        return {
            "schema": self.SCHEMA,
            "config": self.config,
            "outcome": self.outcome,
            "restart_count": self.restart_count,
            "transitions": [[float(t), s] for t, s in self.transitions],
            "fidelity": None if self.fidelity is None else {
                "value": self.fidelity.value,
                "ansatz": self.fidelity.ansatz,
                "converged": self.fidelity.converged,
                "non_bimodal": self.fidelity.non_bimodal,
                "evaluations": self.fidelity.evaluations,
            },
            "max_q_at_stop": self.max_q_at_stop,
            "leak_flag": bool(self.leak_flag),
            "max_top_population": float(self.max_top_population),
            "error": self.error,
            "traces": traces,
        }


def feedback_hamiltonian(rho: np.ndarray, config: ProtocolConfig,
                         ops=None) -> np.ndarray:
    """G (n_star - <n>) x as a dense matrix."""
    if ops is None:
        ops = build_operator_set(FockSpace(rho.shape[0]))
    exp_n = np.trace(ops.n @ rho).real
    return config.G * (config.n_star - exp_n) * ops.x


def measurement_ramp(t: float, stage: StagePhase, config: ProtocolConfig) -> float:
    """Probe strength at time t after stage entry (linear switch-on)."""
    if stage in (StagePhase.FOCK_FEEDBACK, StagePhase.PROBE_NO_FEEDBACK):
        return config.M_max * min(max(t / config.t_on, 0.0), 1.0)
    return 0.0


def switch_off_ramp(t: float, M_from: float, config: ProtocolConfig) -> float:
    """Probe strength at time t after switch-off starts (linear to zero)."""
    return M_from * max(1.0 - t / config.t_off, 0.0)


def detect_quasi_coherent_collapse(rho: np.ndarray, config: ProtocolConfig,
                                   engine: SmeIntegrator | None = None) -> bool:
    """Collapse test: Mandel band AND a dominant single-Gaussian component.

    Var(n)/<n> must lie inside ``config.mandel_band`` and the best overlap
    with one nearly-coherent displaced squeezed state (moment-seeded coarse
    scan plus local refinement, squeezing capped at
    ``config.gaussian_fit_max_squeeze``) must exceed
    ``config.gaussian_overlap_threshold``.  The squeezing cap matters: an
    uncollapsed crescent arc is hugged surprisingly well by a strongly
    squeezed Gaussian, but a genuinely quasi-coherent blob is not squeezed.
    """
    if engine is None:
        engine = SmeIntegrator(FockSpace(rho.shape[0]))
    exp_n, exp_x, exp_p = engine.moments(rho)
    if exp_n < 1e-6:
        return True  # vacuum counts as collapsed
    mandel = engine.var_n(rho) / exp_n
    lo, hi = config.mandel_band
    if not lo <= mandel <= hi:
        return False
    overlap = best_gaussian_overlap(rho, engine,
                                    max_squeeze=config.gaussian_fit_max_squeeze)
    return overlap > config.gaussian_overlap_threshold


def best_gaussian_overlap(rho: np.ndarray, engine: SmeIntegrator | None = None,
                          max_squeeze: float = 1.4) -> float:
    """max over (alpha, zeta), |zeta| <= max_squeeze, of <alpha,zeta| rho |alpha,zeta>."""
    from scipy.optimize import minimize

    space = FockSpace(rho.shape[0])
    if engine is None:
        engine = SmeIntegrator(space)
    exp_n, exp_x, exp_p = engine.moments(rho)

    def objective(params):
        ax, ay, r, th = params
        r = abs(r)
        if r > max_squeeze:
            return 1.0
        alpha = ax + 1j * ay
        try:
            v = fock.dsq_amplitudes(alpha, r * np.exp(1j * (th % (2 * np.pi))), space)
        except fock.TruncationError:
            return 1.0
        if np.sum(np.abs(v[-2:]) ** 2) > 1e-6:
            return 1.0
        return -float(np.real(v.conj() @ rho @ v))

    best = np.inf
    for dr, dth in ((0.0, 0.0), (0.15, 0.0), (0.15, np.pi / 2), (0.15, np.pi)):
        x0 = np.array([exp_x, exp_p, dr, dth])
        res = minimize(objective, x0, method="Nelder-Mead",
                       options={"xatol": 1e-4, "fatol": 1e-6, "maxfev": 400})
        if res.fun < best:
            best = res.fun
    return -best


class _Clock:
    """Shared budget bookkeeping in integrator steps."""

    def __init__(self, config: ProtocolConfig):
        self.dt = config.dt
        self.steps_left = int(round(config.t_budget / config.dt))
        self.t = 0.0

    def take(self, want: int) -> int:
        n = min(want, self.steps_left)
        self.steps_left -= n
        return n

    def advance(self, n: int) -> None:
        self.t += n * self.dt

    @property
    def exhausted(self) -> bool:
        return self.steps_left <= 0


class ProtocolRun:
    """One trajectory of the full stage machine (internal driver)."""

    def __init__(self, config: ProtocolConfig, noise: NoiseStream | None = None):
        self.config = config
        self.space = FockSpace(config.dim)
        self.engine = SmeIntegrator(self.space)
        self.noise = noise if noise is not None else NoiseStream(config.seed, config.dt)
        self.scanner = PAxisScanner(self.space, config.q_axis_p_max, config.q_axis_samples)
        half = config.q_axis_p_max
        X, P = np.meshgrid(np.linspace(0.0, half, 24), np.linspace(-half, half, 33),
                           indexing="ij")
        self._half_rows = fock._coherent_rows((X + 1j * P).ravel(), config.dim)
        self._half_rows_conj = self._half_rows.conj()
        self.log = StepLog()
        self.transitions: list = []
        self.clock = _Clock(config)
        self.restart_count = 0
        self.stage_b_rho = None
        self.max_top_population = 0.0
        self.leak_flag = False
        self._top_frac_levels = max(1, int(np.ceil(0.1 * config.dim)))

    def _mark(self, stage: StagePhase) -> None:
        self.transitions.append((self.clock.t, stage.value))

    def max_q_halfplane(self, rho: np.ndarray) -> float:
        q = ((self._half_rows @ rho) * self._half_rows_conj).sum(axis=1).real
        return float(q.max() / np.pi)

    def _update_leak(self, rho: np.ndarray) -> None:
        pop = float(np.sum(np.diagonal(rho).real[-self._top_frac_levels:]))
        if pop > self.max_top_population:
            self.max_top_population = pop
        if pop > self.config.leak_tol:
            self.leak_flag = True

    def _run_steps(self, rho: np.ndarray, n: int, M_of_k, feedback: bool):
        """Advance n steps; M_of_k maps local step index -> probe strength."""
        cfg = self.config
        eng = self.engine
        use_exp = cfg.method == "exp"
        if cfg.method in ("exp", "euler"):
            dws = self.noise.wiener_increments(n)
        for k in range(n):
            M_t = M_of_k(k)
            exp_n, exp_x, exp_p = eng.moments(rho)
            if feedback:
                e_f = cfg.n_star - exp_n
                c = cfg.G * e_f
            else:
                e_f = 0.0
                c = 0.0
            if use_exp:
                dW = dws[k]
                rho = eng.step_exp(rho, M_t, cfg.eta, cfg.kappa, c, dW, cfg.dt, exp_n)
            elif cfg.method == "euler":
                dW = dws[k]
                rho = eng.step_euler(rho, M_t, cfg.eta, cfg.kappa, c, dW, cfg.dt, exp_n)
            else:
                rho, p_seg = eng.step_kraus(rho, M_t, cfg.eta, cfg.kappa, c, cfg.dt, self.noise)
                dW = p_seg * np.sqrt(2 * cfg.dt) - 2 * np.sqrt(M_t * cfg.eta) * exp_n * cfg.dt
            dy = 2.0 * np.sqrt(M_t * cfg.eta) * exp_n * cfg.dt + dW
            self.log.append(self.clock.t + k * cfg.dt, dW, dy, exp_n, exp_x, exp_p, M_t, e_f)
        self.clock.advance(n)
        return rho

    def _switch_off(self, rho: np.ndarray, M_from: float, feedback: bool):
        cfg = self.config
        n = self.clock.take(max(1, int(round(cfg.t_off / cfg.dt))))
        if n == 0:
            return rho, False
        ramp = [switch_off_ramp((k + 1) * cfg.dt, M_from, cfg) for k in range(n)]
        rho = self._run_steps(rho, n, lambda k: ramp[k], feedback)
        return rho, not self.clock.exhausted

    def stage_fock_feedback(self, rho: np.ndarray):
        """Feedback toward n_star until <p> < (n_star-1)^(1/4) - sqrt(n_star)."""
        cfg = self.config
        self._mark(StagePhase.FOCK_FEEDBACK)
        threshold = cfg.p_threshold
        chunk = max(1, int(round(cfg.threshold_poll_interval / cfg.dt)))
        t_enter = self.clock.t
        while True:
            _, _, exp_p = self.engine.moments(rho)
            if exp_p < threshold:
                return rho, True
            if self.clock.exhausted:
                return rho, False
            n = self.clock.take(chunk)
            t0 = self.clock.t - t_enter
            rho = self._run_steps(
                rho, n,
                lambda k: measurement_ramp(t0 + (k + 1) * cfg.dt, StagePhase.FOCK_FEEDBACK, cfg),
                feedback=True,
            )
            self._update_leak(rho)

    def stage_displace_to_probe(self, rho: np.ndarray):
        """Shift the crescent up to <p> = 0.9 sqrt(n_star) with the probe off."""
        cfg = self.config
        self._mark(StagePhase.DISPLACE_TO_PROBE)
        _, _, exp_p = self.engine.moments(rho)
        gamma = 1j * (cfg.p_probe_target - exp_p)
        rho = fock.apply_displacement(rho, gamma, self.space, leak_tol=cfg.leak_tol)
        self._update_leak(rho)
        return rho

    def stage_probe(self, rho: np.ndarray):
        """Feedback-free probing until the p-axis Husimi maximum drops below delta.

        Returns (rho, "success" | "restart" | "timeout").  The collapse
        detector is consulted only once the photon-number variance has
        dropped below half its probe-entry value: before any appreciable
        conditioning the displaced crescent itself can sit inside the
        detector's Mandel band, while a genuine collapse always crushes the
        variance.
        """
        cfg = self.config
        self._mark(StagePhase.PROBE_NO_FEEDBACK)
        base_chunk = max(1, int(round(cfg.check_interval / cfg.dt)))
        chunk = base_chunk
        t_enter = self.clock.t
        beta2 = 0.0  # integrated 2 M eta t since probe entry
        while True:
            if self.clock.exhausted:
                return rho, "timeout"
            n = self.clock.take(chunk)
            t0 = self.clock.t - t_enter
            ramp = [measurement_ramp(t0 + (k + 1) * cfg.dt, StagePhase.PROBE_NO_FEEDBACK, cfg)
                    for k in range(n)]
            rho = self._run_steps(rho, n, lambda k: ramp[k], feedback=False)
            beta2 += 2.0 * cfg.eta * cfg.dt * sum(ramp)
            self._update_leak(rho)
            # the axis-dark window is transient (over-probing squeezes the
            # lobes back into a closed ring), so poll finely near it
            max_q_now = self.scanner.max_q(rho)
            if max_q_now < 6 * cfg.delta:
                chunk = 1
            elif max_q_now < 30 * cfg.delta or self.engine.var_n(rho) < 2 * cfg.deadend_var:
                chunk = max(1, base_chunk // 10)
            else:
                chunk = base_chunk
            if max_q_now < cfg.delta:
                M_now = measurement_ramp(self.clock.t - t_enter, StagePhase.PROBE_NO_FEEDBACK, cfg)
                rho, ok = self._switch_off(rho, M_now, feedback=False)
                if not ok and self.scanner.max_q(rho) >= cfg.delta:
                    return rho, "timeout"
                if self.scanner.max_q(rho) < cfg.delta:
                    return rho, "success"
                t_enter = self.clock.t  # criterion slipped during switch-off; re-ramp
                beta2 = 0.0
                continue
            if beta2 < cfg.detector_warmup_beta2:
                continue
            dead_end = (self.engine.var_n(rho) < cfg.deadend_var and
                        self.scanner.max_q(rho) >
                        cfg.deadend_axis_fraction * self.max_q_halfplane(rho))
            if dead_end or detect_quasi_coherent_collapse(rho, cfg, self.engine):
                M_now = measurement_ramp(self.clock.t - t_enter, StagePhase.PROBE_NO_FEEDBACK, cfg)
                rho, _ = self._switch_off(rho, M_now, feedback=False)
                return rho, "restart"

    def stage_final_center(self, rho: np.ndarray):
        """Displace the state so <x> = <p> = 0."""
        cfg = self.config
        self._mark(StagePhase.FINAL_CENTER)
        _, exp_x, exp_p = self.engine.moments(rho)
        rho = fock.apply_displacement(rho, -(exp_x + 1j * exp_p), self.space,
                                      leak_tol=cfg.leak_tol)
        self._update_leak(rho)
        return rho


def run_protocol(config: ProtocolConfig, noise: NoiseStream | None = None,
                 compute_fidelity: bool = True) -> TrajectoryRecord:
    """Execute the stage machine from vacuum within the shared time budget."""
    run = ProtocolRun(config, noise)
    cfg = config
    rho = fock.density_matrix(fock.fock_state(0, run.space))
    outcome = "timeout"
    max_q_at_stop = None
    error = None
    try:
        while True:
            if run.clock.exhausted:
                run._mark(StagePhase.TIMEOUT)
                break
            rho, reached = run.stage_fock_feedback(rho)
            if not reached:
                run._mark(StagePhase.TIMEOUT)
                break
            M_now = cfg.M_max  # plateau or partial ramp; switch-off handles either
            t_in = run.clock.t - run.transitions[-1][0]
            M_now = measurement_ramp(t_in, StagePhase.FOCK_FEEDBACK, cfg)
            rho, ok = run._switch_off(rho, M_now, feedback=True)
            if not ok:
                run._mark(StagePhase.TIMEOUT)
                break
            run.stage_b_rho = rho.copy()
            rho = run.stage_displace_to_probe(rho)
            rho, result = run.stage_probe(rho)
            if result == "success":
                max_q_at_stop = run.scanner.max_q(rho)
                rho = run.stage_final_center(rho)
                run._mark(StagePhase.SUCCESS)
                outcome = "success"
                break
            if result == "timeout":
                run._mark(StagePhase.TIMEOUT)
                break
            run._mark(StagePhase.QUASI_COHERENT_RESTART)
            run.restart_count += 1
            if cfg.restart_reset_to_vacuum:
                rho = fock.density_matrix(fock.fock_state(0, run.space))
            else:
                # re-steer the collapsed field as-is, except in the runaway
                # quadrant: the n_star - <n> policy pushes <p> upward when
                # <n> > n_star, which is destabilizing at positive <p>, so
                # such blobs are first displaced back to the origin
                exp_n, exp_x, exp_p = run.engine.moments(rho)
                if exp_p > 0.5 and exp_n > cfg.n_star:
                    rho = fock.apply_displacement(rho, -(exp_x + 1j * exp_p), run.space,
                                                  leak_tol=cfg.leak_tol)
    except IntegrationError as err:
        outcome = "numerical-failure"
        error = str(err)

    fidelity_block = None
    if compute_fidelity and outcome != "numerical-failure":
        from .fidelity import optimize_fidelity

        centered = rho
        for _ in range(3):  # deep-in-truncation states may need repeated shifts
            _, exp_x, exp_p = run.engine.moments(centered)
            if abs(exp_x) < 0.4 and abs(exp_p) < 0.4:
                break
            centered = fock.apply_displacement(centered, -(exp_x + 1j * exp_p),
                                               run.space, leak_tol=cfg.leak_tol)
        try:
            res = optimize_fidelity(centered)
        except ValueError as err:
            error = error or f"fidelity skipped: {err}"
        else:
            fidelity_block = FidelityBlock(
                value=res.value,
                ansatz=res.ansatz.to_dict(),
                converged=res.converged,
                non_bimodal=res.non_bimodal,
                evaluations=res.evaluations,
            )

    return TrajectoryRecord(
        config=cfg.to_dict(),
        outcome=outcome,
        restart_count=run.restart_count,
        transitions=run.transitions,
        final_rho=rho,
        log=run.log,
        stage_b_rho=run.stage_b_rho,
        fidelity=fidelity_block,
        max_q_at_stop=max_q_at_stop,
        leak_flag=run.leak_flag,
        max_top_population=run.max_top_population,
        error=error,
    )


def save_record_json(record: TrajectoryRecord, path) -> None:
    with open(path, "w") as fh:
        json.dump(record.to_json_dict(), fh, indent=1)
