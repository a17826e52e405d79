"""Energy functionals, identity residuals and the per-step diagnostics ledger.

Mixed norms over ``Omega x D`` use the flow grid's cell area for the ``x``
aggregation and the q-grid's M-weighted quadrature for the ``q`` part:

``||psi||^2_{L2_M} = sum_cells h1 h2 int (h - a)^2 M dq`` and
``||psi||^2_Hdot  = sum_cells h1 h2 int M |grad_q h|^2 dq``.

The H^1 seminorm of ``u`` is reported as a computable proxy for the
fractional-order smallness quantities; it is never labelled as an H^s norm.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import astuple, dataclass, fields

import numpy as np

from .coupled_solver import CoupledState, Discretization, stress_field
from .flow_domain import sigma_of_u, tensor_divergence


@dataclass(frozen=True)
class DiagnosticsRecord:
    t: float
    step: int
    u_l2: float
    grad_u_l2: float
    psi_l2m: float
    psi_hdot: float
    mass_dev_max: float
    f_min: float
    corot_residual: float
    energy_margin: float
    coupling_residual: float
    picard_iterations: int

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in astuple(self))


CSV_COLUMNS = tuple(f.name for f in fields(DiagnosticsRecord))


def psi_energy(disc: Discretization, h: np.ndarray) -> float:
    """``||psi||^2_{L2_M}`` aggregated over the cells."""
    g = h - disc.derived.a_eq
    return float(disc.flow.cell_area * np.sum(disc.qgrid.l2m_h(g, g)))


def psi_dissipation(disc: Discretization, h: np.ndarray) -> float:
    """``||psi||^2_Hdot`` aggregated over the cells."""
    return float(disc.flow.cell_area * np.sum(disc.qgrid.energy_h(h - disc.derived.a_eq)))


def mass_deviation(disc: Discretization, h: np.ndarray) -> float:
    return float(np.max(np.abs(disc.qgrid.mass_h(h) - disc.derived.eq_mass)))


def coupling_residual(disc: Discretization, state: CoupledState) -> float:
    """Signed defect of the stress/drift duality, scaled by ``alpha2``.

    ``<div tau(psi), u> + (1/2 delta) sum_x int M (grad u q) . grad_q(psi/M)``
    with ``sigma = grad u``.  Both terms equal ``-/+ int grad u : tau(psi)`` in
    the continuous problem without boundary contributions, so the sum vanishes
    there; here it measures how far the discrete operators are from that.
    """
    d, flow, q = disc.derived, disc.flow, disc.qgrid
    w = state.u.nodal
    if not np.any(w):
        return 0.0
    g = state.h - d.a_eq
    tau = stress_field(disc, state.h)
    momentum_side = flow.inner(tensor_divergence(flow, tau), w)
    sigma = sigma_of_u(flow, w, "general")
    drift_side = np.sum(q.wm * q.drift_form(sigma, g)) * flow.cell_area / (2.0 * d.delta)
    return float(d.alpha2 * (momentum_side + drift_side))


def energy_ledger(
    disc: Discretization,
    state: CoupledState,
    reference: float | None = None,
    dissipation_sum: float = 0.0,
    corot_residual: float = 0.0,
    picard_iterations: int = 0,
) -> DiagnosticsRecord:
    """Snapshot of all ledger quantities.

    ``reference`` is ``||u0||^2 + alpha4 ||psi0||^2`` (defaults to the value at
    ``state``, which makes the margin zero at the initial time) and
    ``dissipation_sum`` the running ``sum dt ||grad u||^2``.
    """
    d = disc.derived
    u2 = float(np.dot(state.u.coeffs, state.u.coeffs))
    e = psi_energy(disc, state.h)
    if reference is None:
        reference = u2 + d.alpha4 * e
    margin = reference - (u2 + d.alpha1 * dissipation_sum)
    return DiagnosticsRecord(
        t=float(state.t),
        step=int(state.step),
        u_l2=math.sqrt(u2),
        grad_u_l2=math.sqrt(state.u.grad_norm_sq()),
        psi_l2m=math.sqrt(e),
        psi_hdot=math.sqrt(psi_dissipation(disc, state.h)),
        mass_dev_max=mass_deviation(disc, state.h),
        f_min=float(np.min(state.h * disc.qgrid.M)),
        corot_residual=float(corot_residual),
        energy_margin=float(margin),
        coupling_residual=coupling_residual(disc, state),
        picard_iterations=int(picard_iterations),
    )


class LedgerTracker:
    """Running quantities that need every step, not only sampled ones.

    The Fokker-Planck energy residual at step ``n`` is
    ``(E_n - E_{n-1}) / dt + 2 alpha3 D_n`` with ``E = ||psi||^2_{L2_M}`` and
    ``D = ||psi||^2_Hdot``; it vanishes identically for the exact corotational
    flow.
    """

    def __init__(self, disc: Discretization, state0: CoupledState, sigma_mode: str = "corotational"):
        self.disc = disc
        self.sigma_mode = sigma_mode
        self.energy = psi_energy(disc, state0.h)
        self.reference = float(np.dot(state0.u.coeffs, state0.u.coeffs)) + disc.derived.alpha4 * self.energy
        self.dissipation_sum = 0.0
        self.residual = 0.0
        self.max_mass_dev = mass_deviation(disc, state0.h)
        self.min_f = float(np.min(state0.h * disc.qgrid.M))

    def update(self, state: CoupledState, dt: float) -> None:
        d = self.disc.derived
        e_new = psi_energy(self.disc, state.h)
        diss = psi_dissipation(self.disc, state.h)
        self.residual = (e_new - self.energy) / dt + 2.0 * d.alpha3 * diss
        self.energy = e_new
        self.dissipation_sum += dt * state.u.grad_norm_sq()
        self.max_mass_dev = max(self.max_mass_dev, mass_deviation(self.disc, state.h))
        self.min_f = min(self.min_f, float(np.min(state.h * self.disc.qgrid.M)))

    def record(self, state: CoupledState, picard_iterations: int = 0) -> DiagnosticsRecord:
        return energy_ledger(
            self.disc, state, self.reference, self.dissipation_sum, self.residual, picard_iterations
        )


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_ledger_csv(records, target) -> None:
    """Write records with the fixed column order; ``target`` is a path or text stream."""
    if isinstance(target, io.TextIOBase):
        _write(records, target)
        return
    with open(target, "w", newline="") as fh:
        _write(records, fh)


def _write(records, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([_fmt(v) for v in astuple(r)])


def read_ledger_csv(path) -> list[DiagnosticsRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for row in reader:
            vals = {}
            for f in fields(DiagnosticsRecord):
                vals[f.name] = int(row[f.name]) if f.type in (int, "int") else float(row[f.name])
            out.append(DiagnosticsRecord(**vals))
    return out
