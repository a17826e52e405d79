"""Time stepping of the coupled Navier-Stokes / Fokker-Planck system.

Each spatial cell of a :class:`~fene2d.flow_domain.FlowGrid` carries an h-field
(``f / M``) on a shared :class:`~fene2d.config_space.QGrid`.  One step is the
Lie splitting transport -> Fokker-Planck -> momentum (Strang optional), or a
Picard iteration of that map on the end-of-step velocity.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .config_space import ConfigDensity, FokkerPlanckOperator, QGrid, kramers_stress_h
from .flow_domain import (
    FlowGrid,
    StokesBasis,
    StokesOperator,
    VelocityState,
    advection_term,
    build_stokes,
    sigma_of_u,
    stokes_eigenbasis,
    tensor_divergence,
    viscous_semigroup_step,
)
from .params import DerivedParams, PhysicalParams, derive_params

log = logging.getLogger(__name__)


class CFLError(RuntimeError):
    """Step size too large for the explicit parts of the scheme."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class PicardError(RuntimeError):
    def __init__(self, message: str, iterations: int, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.iterations = iterations
        self.step = step


class StepError(RuntimeError):
    """A substep failure, tagged with the step index."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {cause}")
        self.step = step


@dataclass
class Scenario:
    """Initial data and scheme options.

    ``initial`` is ``"equilibrium"``, ``"perturbation"`` or ``"file"``.  The
    perturbation is ``h = a (1 + epsilon * phi(x) * P(q))`` with
    ``phi = sin(pi x / L1) sin(pi y / L2)`` and the mean-zero polynomial
    ``P = q1 + 2 q1 q2 + q1^2 - q2^2``.
    """

    initial: str = "perturbation"
    epsilon: float = 1e-2
    initial_file: str | None = None
    u0: str = "zero"  # zero | eigenmode | random
    u0_amplitude: float = 0.0
    u0_mode: int = 1  # 1-based, as in v_1
    seed: int = 0
    sigma_mode: str = "corotational"
    dt: float = 1e-2
    t_end: float = 1.0
    scheme: str = "splitting"  # splitting | picard
    splitting: str = "lie"  # lie | strang
    picard_max: int = 20
    picard_tol: float = 1e-12
    transport: str = "central"  # central | upwind
    advection: bool = True
    stress_coupling: bool = True
    smooth_passes: int = 0
    cfl: float = 1.0
    clip_negative: bool = False  # post-step mass-preserving clip; off so positivity is observed

    def validate(self) -> None:
        choices = {
            "initial": ("equilibrium", "perturbation", "file"),
            "u0": ("zero", "eigenmode", "random"),
            "sigma_mode": ("general", "corotational"),
            "scheme": ("splitting", "picard"),
            "splitting": ("lie", "strang"),
            "transport": ("central", "upwind"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.t_end >= 0:
            raise ValueError(f"t_end must be >= 0, got {self.t_end}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.picard_max < 1 or not self.picard_tol > 0:
            raise ValueError("picard_max must be >= 1 and picard_tol > 0")
        if self.u0_mode < 1:
            raise ValueError("u0_mode is 1-based")
        if self.initial == "file" and not self.initial_file:
            raise ValueError("initial = file needs initial_file")
        if not self.cfl > 0:
            raise ValueError("cfl must be > 0")

    @property
    def n_steps(self) -> int:
        return self.steps_from(0.0)

    def steps_from(self, t0: float) -> int:
        """Steps needed to reach ``t_end`` from ``t0`` (restarts continue to the same end time)."""
        return max(0, int(round((self.t_end - t0) / self.dt)))


@dataclass
class Discretization:
    """Everything fixed during a run: grids, operators, basis, constants."""

    params: PhysicalParams
    derived: DerivedParams
    flow: FlowGrid
    stokes: StokesOperator
    basis: StokesBasis
    qgrid: QGrid
    fp: FokkerPlanckOperator

    @classmethod
    def build(
        cls,
        params: PhysicalParams,
        n1: int = 16,
        n2: int = 16,
        n_modes: int = 20,
        n_r: int = 24,
        n_theta: int = 48,
        length1: float = 1.0,
        length2: float = 1.0,
        cache_dir=None,
    ) -> "Discretization":
        d = derive_params(params)
        flow = FlowGrid(n1, n2, length1, length2)
        stokes = build_stokes(flow)
        basis = stokes_eigenbasis(stokes, n_modes, cache_dir=cache_dir)
        q = QGrid(n_r, n_theta, d.delta)
        return cls(params, d, flow, stokes, basis, q, FokkerPlanckOperator(q, d.alpha3))

    @property
    def cell_shape(self) -> tuple[int, int]:
        return self.flow.cells


@dataclass
class CoupledState:
    u: VelocityState
    density: ConfigDensity
    t: float = 0.0
    step: int = 0

    @property
    def h(self) -> np.ndarray:
        return self.density.h

    def copy(self) -> "CoupledState":
        return CoupledState(self.u.copy(), self.density.copy(), self.t, self.step)


# ---- initial data -------------------------------------------------------------

def perturbation_pattern(qgrid: QGrid) -> np.ndarray:
    q1, q2 = qgrid.q1, qgrid.q2
    return q1 + 2.0 * q1 * q2 + (q1**2 - q2**2)


def spatial_bump(flow: FlowGrid) -> np.ndarray:
    x, y = flow.cell_centers()
    return np.sin(np.pi * x / flow.length1) * np.sin(np.pi * y / flow.length2)


def normalize_mass(qgrid: QGrid, h: np.ndarray, target: float) -> np.ndarray:
    """Clip negatives and rescale each cell to mass ``target``."""
    h = np.where(h < 0.0, 0.0, h)
    mass = qgrid.mass_h(h)
    if np.any(mass <= 0):
        raise ValueError("density has a cell with zero mass")
    return h * (target / mass)[..., None, None]


def smooth_cells(h: np.ndarray, passes: int) -> np.ndarray:
    """Mass- and sign-preserving 3x3 averaging over the spatial axes."""
    for _ in range(passes):
        p = np.pad(h, ((1, 1), (1, 1)) + ((0, 0),) * (h.ndim - 2), mode="edge")
        acc = np.zeros_like(h)
        for di in range(3):
            for dj in range(3):
                acc += p[di : di + h.shape[0], dj : dj + h.shape[1]]
        h = acc / 9.0
    return h


def initial_state(disc: Discretization, sc: Scenario) -> CoupledState:
    sc.validate()
    q, d = disc.qgrid, disc.derived
    cells = disc.cell_shape
    if sc.initial == "equilibrium":
        h = np.full(cells + q.shape, d.a_eq)
    elif sc.initial == "perturbation":
        h = d.a_eq * (
            1.0 + sc.epsilon * spatial_bump(disc.flow)[..., None, None] * perturbation_pattern(q)
        )
    else:
        from .io import read_h_field

        h, delta = read_h_field(sc.initial_file)
        if h.shape != cells + q.shape or not np.isclose(delta, q.delta):
            raise ValueError(
                f"{sc.initial_file}: field {h.shape} delta={delta} does not match "
                f"grid {cells + q.shape} delta={q.delta}"
            )
    if sc.initial != "equilibrium":
        h = smooth_cells(h, sc.smooth_passes)
        h = normalize_mass(q, h, d.eq_mass)
    c = np.zeros(disc.basis.n)
    if sc.u0 == "eigenmode":
        if sc.u0_mode > disc.basis.n:
            raise ValueError(f"u0_mode {sc.u0_mode} exceeds basis size {disc.basis.n}")
        c[sc.u0_mode - 1] = sc.u0_amplitude
    elif sc.u0 == "random":
        rng = np.random.default_rng(sc.seed)
        c = rng.standard_normal(disc.basis.n) / np.arange(1, disc.basis.n + 1)
        c *= sc.u0_amplitude / np.linalg.norm(c)
    return CoupledState(VelocityState(disc.basis, c), ConfigDensity(q, h, d.a_eq))


# ---- substeps -----------------------------------------------------------------

def stress_field(disc: Discretization, h: np.ndarray) -> np.ndarray:
    """Per-cell Kramers stress of the shift ``psi = (h - a) M``; shape (n1, n2, 2, 2)."""
    return kramers_stress_h(disc.qgrid, h - disc.derived.a_eq)


def stress_divergence(disc: Discretization, h: np.ndarray) -> np.ndarray:
    """Face force ``alpha2 div tau``.

    The equilibrium stress is a constant matrix and has zero discrete
    divergence, so it is subtracted first to avoid rounding noise.
    """
    return disc.derived.alpha2 * tensor_divergence(disc.flow, stress_field(disc, h))


def drift_cfl_ok(disc: Discretization, sigma: np.ndarray, dt: float, cfl: float) -> tuple[bool, float]:
    """Explicit drift is stable if either the hyperbolic or the diffusion-dominated limit holds."""
    smax = float(np.max(np.abs(sigma), initial=0.0))
    if smax == 0.0:
        return True, 0.0
    q = disc.qgrid
    dq = min(float(np.min(np.diff(q.r))), float(1.0 - q.r[-1]), float(q.r[0] * q.dtheta))
    limit = max(dq / smax, 2.0 * disc.derived.alpha3 / smax**2)
    return dt <= cfl * limit, limit


def transport_cfl(disc: Discretization, w: np.ndarray, dt: float) -> float:
    u, v = disc.flow.split(w)
    return dt * (
        float(np.max(np.abs(u), initial=0.0)) / disc.flow.h1
        + float(np.max(np.abs(v), initial=0.0)) / disc.flow.h2
    )


def fp_substep(disc: Discretization, h: np.ndarray, sigma: np.ndarray | None, dt: float) -> np.ndarray:
    """Implicit diffusion, explicit drift:
    ``(W_M + dt alpha3 K) h_new = W_M h + dt G^T (W_M h)``.

    Exactly mass conserving, and exactly stationary at ``h = const`` when
    ``sigma`` is zero or skew.
    """
    q = disc.qgrid
    b = q.wm * h
    if sigma is not None:
        tr = sigma[..., 0, 0] + sigma[..., 1, 1]
        if np.max(np.abs(tr), initial=0.0) > 1e-8 * max(1.0, float(np.max(np.abs(sigma)))):
            raise ValueError(f"sigma is not trace free (max |tr| = {np.max(np.abs(tr)):.2e})")
        b = b + dt * q.drift_adjoint(sigma, b)
    return disc.fp.solve_implicit(b, dt)


def transport_substep(
    disc: Discretization, h: np.ndarray, w: np.ndarray, dt: float, scheme: str = "central"
) -> np.ndarray:
    """Explicit conservative update of every q-slice by the face velocities ``w``.

    Walls carry zero normal velocity so no probability crosses them; a
    per-cell constant is preserved because ``w`` is discretely divergence-free.
    """
    flow = disc.flow
    u, v = flow.split(w)
    if not np.any(u) and not np.any(v):
        return h.copy()
    qa = (None, None)
    fx = np.zeros((flow.n1 + 1, flow.n2) + h.shape[2:])
    fy = np.zeros((flow.n1, flow.n2 + 1) + h.shape[2:])
    if scheme == "central":
        fx[1:-1] = u[(...,) + qa] * 0.5 * (h[1:] + h[:-1])
        fy[:, 1:-1] = v[(...,) + qa] * 0.5 * (h[:, 1:] + h[:, :-1])
    elif scheme == "upwind":
        up, um = np.maximum(u, 0.0)[(...,) + qa], np.minimum(u, 0.0)[(...,) + qa]
        vp, vm = np.maximum(v, 0.0)[(...,) + qa], np.minimum(v, 0.0)[(...,) + qa]
        fx[1:-1] = up * h[:-1] + um * h[1:]
        fy[:, 1:-1] = vp * h[:, :-1] + vm * h[:, 1:]
    else:
        raise ValueError(f"unknown transport scheme {scheme!r}")
    return h - dt * ((fx[1:] - fx[:-1]) / flow.h1 + (fy[:, 1:] - fy[:, :-1]) / flow.h2)


def momentum_substep(
    disc: Discretization,
    c: np.ndarray,
    h: np.ndarray,
    dt: float,
    advection: bool = True,
    stress: bool = True,
    c_adv: np.ndarray | None = None,
) -> np.ndarray:
    """Exponential Euler: ``c <- exp(-alpha1 dt Lambda) [c + dt P_n(-u.grad u + F)]``.

    ``c_adv`` selects the velocity used in the explicit terms (defaults to ``c``).
    """
    basis = disc.basis
    force = np.zeros(disc.flow.n_vel)
    if advection:
        w = basis.reconstruct(c if c_adv is None else c_adv)
        force -= advection_term(disc.flow, w)
    if stress:
        force += stress_divergence(disc, h)
    return viscous_semigroup_step(basis, c + dt * basis.project(force), disc.derived.alpha1, dt)


@dataclass
class StepOptions:
    sigma_mode: str = "corotational"
    splitting: str = "lie"
    transport: str = "central"
    advection: bool = True
    stress_coupling: bool = True
    cfl: float = 1.0

    @classmethod
    def from_scenario(cls, sc: Scenario) -> "StepOptions":
        return cls(sc.sigma_mode, sc.splitting, sc.transport, sc.advection, sc.stress_coupling, sc.cfl)


def _micro(disc: Discretization, h: np.ndarray, c: np.ndarray, dt: float, opt: StepOptions, step: int | None):
    """Transport then Fokker-Planck, both driven by the velocity ``c``."""
    w = disc.basis.reconstruct(c)
    courant = transport_cfl(disc, w, dt)
    if courant > opt.cfl:
        raise CFLError(f"transport Courant number {courant:.3g} exceeds {opt.cfl}", step)
    sigma = sigma_of_u(disc.flow, w, opt.sigma_mode)
    ok, limit = drift_cfl_ok(disc, sigma, dt, opt.cfl)
    if not ok:
        raise CFLError(f"drift limit: dt={dt:.3g} > {opt.cfl * limit:.3g}", step)
    h = transport_substep(disc, h, w, dt, opt.transport)
    return fp_substep(disc, h, sigma, dt)


def split_step(
    disc: Discretization, c: np.ndarray, h: np.ndarray, dt: float, opt: StepOptions,
    step: int | None = None, c_drive: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One splitting step; ``c_drive`` is the velocity driving the micro substeps."""
    drive = c if c_drive is None else c_drive
    if opt.splitting == "lie":
        h_new = _micro(disc, h, drive, dt, opt, step)
        c_new = momentum_substep(disc, c, h_new, dt, opt.advection, opt.stress_coupling, c_adv=drive)
        return c_new, h_new
    h_half = _micro(disc, h, drive, 0.5 * dt, opt, step)
    c_new = momentum_substep(disc, c, h_half, dt, opt.advection, opt.stress_coupling, c_adv=drive)
    h_new = _micro(disc, h_half, c_new if c_drive is None else c_drive, 0.5 * dt, opt, step)
    return c_new, h_new


def picard_step(
    disc: Discretization,
    state: CoupledState,
    dt: float,
    k_max: int = 20,
    tol: float = 1e-12,
    opt: StepOptions | None = None,
) -> tuple[CoupledState, int]:
    """Fixed-point iteration of the step map on the velocity driving the q-substeps.

    Iterate ``k`` drives transport, drift and advection with ``c_k``; the first
    iterate uses the start-of-step velocity, so ``k = 1`` is the plain
    splitting step.  Converged when ``||c_{k+1} - c_k|| < tol``.
    """
    opt = opt or StepOptions()
    c0, h0 = state.u.coeffs, state.h
    drive = c0
    prev_diff = math.inf
    growth = 0
    for k in range(1, k_max + 1):
        c_new, h_new = split_step(disc, c0, h0, dt, opt, state.step, c_drive=drive)
        diff = float(np.linalg.norm(c_new - drive))
        if not math.isfinite(diff):
            raise PicardError("non-finite Picard iterate; reduce dt", k, state.step)
        if diff < tol:
            break
        growth = growth + 1 if diff >= prev_diff else 0
        if growth >= 3:
            raise PicardError(
                f"Picard iteration diverging (|dc| = {diff:.3e}); reduce dt below the contraction threshold",
                k, state.step,
            )
        prev_diff = diff
        drive = c_new
    else:
        raise PicardError(
            f"no convergence in {k_max} iterations (|dc| = {diff:.3e}); reduce dt", k_max, state.step
        )
    new = CoupledState(
        VelocityState(disc.basis, c_new), ConfigDensity(disc.qgrid, h_new, disc.derived.a_eq),
        state.t + dt, state.step + 1,
    )
    return new, k


def advance(disc: Discretization, state: CoupledState, sc: Scenario) -> tuple[CoupledState, int]:
    """One step according to ``sc``; returns the new state and the Picard count (1 for splitting)."""
    opt = StepOptions.from_scenario(sc)
    if sc.scheme == "picard":
        new, iters = picard_step(disc, state, sc.dt, sc.picard_max, sc.picard_tol, opt)
        c, h = new.u.coeffs, new.h
    else:
        c, h = split_step(disc, state.u.coeffs, state.h, sc.dt, opt, state.step)
        iters = 1
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(h))):
        raise StepError(state.step, FloatingPointError("non-finite state"))
    if sc.clip_negative and np.min(h) < 0.0:
        h = normalize_mass(disc.qgrid, h, disc.derived.eq_mass)
    new = CoupledState(
        VelocityState(disc.basis, c), ConfigDensity(disc.qgrid, h, disc.derived.a_eq),
        state.t + sc.dt, state.step + 1,
    )
    return new, iters


def run(disc: Discretization, sc: Scenario, sample_every: int = 1, state: CoupledState | None = None,
        callback=None):
    """Integrate to ``sc.t_end`` and return ``(final_state, records)``.

    One :class:`~fene2d.diagnostics.DiagnosticsRecord` is produced at ``t = 0``
    and every ``sample_every`` steps (plus the last step).  ``callback(state,
    record)`` is invoked for every emitted record.
    """
    from .diagnostics import LedgerTracker

    sc.validate()
    if sample_every < 1:
        raise ValueError("sample_every must be >= 1")
    state = initial_state(disc, sc) if state is None else state
    tracker = LedgerTracker(disc, state, sc.sigma_mode)
    records = [tracker.record(state, picard_iterations=0)]
    if callback:
        callback(state, records[-1])
    n = sc.steps_from(state.t)
    log.info("integrating %d steps of %g from t = %g", n, sc.dt, state.t)
    for k in range(n):
        try:
            state, iters = advance(disc, state, sc)
        except (CFLError, PicardError, StepError):
            raise
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            raise StepError(state.step, exc) from exc
        tracker.update(state, sc.dt)
        if (k + 1) % sample_every == 0 or k + 1 == n:
            records.append(tracker.record(state, picard_iterations=iters))
            log.info("step %d  t = %.6g  |u| = %.3e  |psi| = %.3e", state.step, state.t,
                     records[-1].u_l2, records[-1].psi_l2m)
            if callback:
                callback(state, records[-1])
    return state, records
