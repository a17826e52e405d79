import io
import math

import numpy as np
import pytest

from fene2d.coupled_solver import CoupledState, Discretization, Scenario, initial_state, run
from fene2d.config_space import ConfigDensity
from fene2d.diagnostics import (
    CSV_COLUMNS,
    DiagnosticsRecord,
    coupling_residual,
    energy_ledger,
    read_ledger_csv,
    write_ledger_csv,
)
from fene2d.flow_domain import VelocityState
from fene2d.params import REFERENCE


def brute_force_norms(disc, state):
    """Straight loops over cells and nodes, f-form integrands, Cartesian q-gradient."""
    q, flow, a = disc.qgrid, disc.flow, disc.derived.a_eq
    w = q.weights
    psi2 = hd2 = 0.0
    for i in range(flow.n1):
        for j in range(flow.n2):
            f = state.h[i, j] * q.M
            psi = f - a * q.M
            psi2 += flow.h1 * flow.h2 * float(np.sum(w * psi * psi / q.M))
            g1, g2 = q.gradient(psi / q.M)
            hd2 += flow.h1 * flow.h2 * float(np.sum(w * q.M * (g1 * g1 + g2 * g2)))
    u = state.u.nodal
    return math.sqrt(psi2), math.sqrt(hd2), math.sqrt(flow.inner(u, u))


def test_ledger_matches_brute_force(small_disc):
    d = small_disc
    st = initial_state(d, Scenario(epsilon=0.05, u0="random", u0_amplitude=0.3, seed=2))
    rec = energy_ledger(d, st)
    psi, hd, u = brute_force_norms(d, st)
    assert rec.psi_l2m == pytest.approx(psi, rel=1e-12)
    assert rec.psi_hdot == pytest.approx(hd, rel=1e-12)
    assert rec.u_l2 == pytest.approx(u, rel=1e-12)
    from fene2d.flow_domain import gradient_norm_sq

    assert rec.grad_u_l2 == pytest.approx(math.sqrt(gradient_norm_sq(d.flow, d.stokes, st.u.nodal)), rel=1e-10)


def test_equilibrium_ledger(small_disc):
    st = initial_state(small_disc, Scenario(initial="equilibrium"))
    rec = energy_ledger(small_disc, st)
    assert rec.u_l2 == 0 and rec.psi_l2m <= 1e-10 and rec.psi_hdot <= 1e-10
    assert rec.energy_margin >= 0 and rec.mass_dev_max < 1e-15
    assert rec.coupling_residual == 0.0 and rec.is_finite()


def test_ledger_bit_identical(small_disc):
    st = initial_state(small_disc, Scenario(epsilon=0.1, u0="random", u0_amplitude=0.2, seed=9))
    assert energy_ledger(small_disc, st) == energy_ledger(small_disc, st)


def test_stokes_decay_ledger(small_disc):
    d = small_disc
    sc = Scenario(initial="equilibrium", u0="eigenmode", u0_amplitude=0.01, sigma_mode="corotational",
                  advection=False, dt=0.002, t_end=0.04)
    _, recs = run(d, sc)
    lam = d.basis.eigenvalues[0]
    for r in recs:
        assert r.u_l2 == pytest.approx(0.01 * math.exp(-d.derived.alpha1 * lam * r.t), rel=1e-6)


def test_coupling_residual_trivial_cases(small_disc):
    d = small_disc
    st = initial_state(d, Scenario(epsilon=0.1))  # u = 0
    assert coupling_residual(d, st) == 0.0
    st2 = initial_state(d, Scenario(initial="equilibrium", u0="random", u0_amplitude=1.0))  # psi = 0
    assert abs(coupling_residual(d, st2)) < 1e-14


def _interior_state(disc):
    """u from a compactly supported stream function, psi supported in the interior too."""
    flow, q, a = disc.flow, disc.qgrid, disc.derived.a_eq
    n1, n2 = flow.n1, flow.n2
    xn, yn = np.meshgrid(np.arange(1, n1) / n1, np.arange(1, n2) / n2, indexing="ij")
    bump = lambda x, y: np.where(
        (np.abs(x - 0.5) < 0.3) & (np.abs(y - 0.5) < 0.3),
        np.cos(np.pi * (x - 0.5) / 0.6) ** 4 * np.cos(np.pi * (y - 0.5) / 0.6) ** 4, 0.0)
    w = disc.stokes.curl @ (0.1 * bump(xn, yn) * (1 + 2 * xn - yn)).ravel()
    c = disc.basis.project(w)
    X, Y = flow.cell_centers()
    h = a * (1 + 0.1 * (bump(X, Y) * (1 + X * Y**2))[..., None, None] * (q.q1 * q.q2 + q.q1**2 - q.q2**2))
    return c, h


def _pairing_scale(disc, st):
    from fene2d.coupled_solver import stress_field
    from fene2d.flow_domain import tensor_divergence

    tau = stress_field(disc, st.h)
    return abs(disc.derived.alpha2 * disc.flow.inner(tensor_divergence(disc.flow, tau), st.u.nodal))


def test_coupling_residual_vanishes_for_interior_fields():
    for n in (16, 32):
        disc = Discretization.build(REFERENCE, n1=n, n2=n, n_modes=(n - 1) ** 2, n_r=6, n_theta=8)
        c, h = _interior_state(disc)
        st = CoupledState(VelocityState(disc.basis, c), ConfigDensity(disc.qgrid, h, disc.derived.a_eq))
        scale = _pairing_scale(disc, st)
        assert scale > 1e-8
        assert abs(coupling_residual(disc, st)) < 1e-12 * scale


def test_coupling_residual_refines_for_wall_touching_fields():
    vals = []
    for n in (8, 16, 32):
        disc = Discretization.build(REFERENCE, n1=n, n2=n, n_modes=40, n_r=6, n_theta=8)
        st = initial_state(disc, Scenario(epsilon=0.1, u0="eigenmode", u0_amplitude=0.1))
        q = disc.qgrid
        X, Y = disc.flow.cell_centers()
        st.density.h[...] = disc.derived.a_eq * (
            1 + 0.1 * (np.exp(X) * np.cos(2 * Y))[..., None, None] * (q.q1 * q.q2)
            + 0.1 * (X * Y**2)[..., None, None] * (q.q1**2 - q.q2**2)
        )
        vals.append(abs(coupling_residual(disc, st)))
    assert vals[0] > vals[1] > vals[2] > 0
    assert vals[1] / vals[2] > 3.0


def test_csv_roundtrip_and_schema(small_disc, tmp_path):
    sc = Scenario(epsilon=0.05, dt=0.01, t_end=0.05)
    _, recs = run(small_disc, sc)
    buf = io.StringIO()
    write_ledger_csv(recs, buf)
    header = buf.getvalue().splitlines()[0].split(",")
    assert tuple(header) == CSV_COLUMNS
    assert CSV_COLUMNS[0] == "t" and CSV_COLUMNS[-1] == "picard_iterations"
    path = tmp_path / "l.csv"
    write_ledger_csv(recs, path)
    assert read_ledger_csv(path) == recs
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_ledger_csv(tmp_path / "bad.csv")


def test_record_finiteness_flag():
    r = DiagnosticsRecord(0.0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0)
    assert r.is_finite()
    assert not DiagnosticsRecord(0.0, 0, math.nan, 0, 0, 0, 0, 0, 0, 0, 0, 0).is_finite()
