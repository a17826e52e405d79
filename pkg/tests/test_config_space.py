import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fene2d.config_space import (
    ConfigDensity,
    FokkerPlanckOperator,
    GridMismatchError,
    QGrid,
    apply_drift,
    check_trace_free,
    estimate_poincare_constant,
    fp_spectrum,
    hdot_m_seminorm,
    kramers_stress,
    maxwellian,
    q_mass,
    weighted_l2_inner,
)
from oracles import fp_mode_eigenvalues, fp_spectral_gap, maxwellian_moment

DELTAS = (1.5, 2.0, 4.0, 8.0)


@pytest.fixture(scope="module", params=DELTAS)
def grid(request):
    return QGrid(20, 32, request.param)


def random_sigma(rng, skew=False):
    a = rng.standard_normal((2, 2))
    if skew:
        return a - a.T
    a[1, 1] = -a[0, 0]
    return a


def test_grid_validation():
    with pytest.raises(ValueError):
        QGrid(1, 16, 4.0)
    with pytest.raises(ValueError):
        QGrid(8, 15, 4.0)
    with pytest.raises(ValueError):
        QGrid(8, 16, 0.0)
    g = QGrid(8, 16, 4.0)
    assert np.all(g.r > 0) and np.all(g.r < 1)
    with pytest.raises(GridMismatchError):
        g.integrate(np.ones((8, 17)))
    with pytest.raises(GridMismatchError):
        g.check_same(QGrid(8, 16, 4.5))


def test_maxwellian_domain():
    assert maxwellian([0.0, 0.0], 4.0) == 1.0
    assert maxwellian([0.6, 0.0], 2.0) == pytest.approx(0.64**2)
    with pytest.raises(ValueError):
        maxwellian([1.0, 0.0], 2.0)


@pytest.mark.parametrize("m", [0, 1, 2, 3])
def test_weighted_moments_exact(grid, m):
    got = grid.integrate(grid.M * (grid.q1**2 + grid.q2**2) ** m)
    assert got == pytest.approx(maxwellian_moment(grid.delta, m), rel=1e-12)


def test_lebesgue_quadrature_converges():
    errs = [QGrid(n, 16, 4.0).lebesgue_tolerance() for n in (8, 16, 32)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.15)


def test_equilibrium_stress_isotropic(grid):
    a = 1.0
    tau = kramers_stress(grid, a * grid.M)
    expect = a * math.pi / (2 * grid.delta * (grid.delta + 1))
    np.testing.assert_allclose(tau, expect * np.eye(2), rtol=1e-12, atol=1e-14)


def test_stress_needs_delta_above_one():
    g = QGrid(8, 16, 1.0)
    with pytest.raises(ValueError):
        kramers_stress(g, g.M)


def test_q_mass_of_maxwellian(grid):
    assert q_mass(grid, grid.M) == pytest.approx(math.pi / (grid.delta + 1), rel=1e-13)


def test_spectrum_matches_ritz_oracle(grid):
    lam = fp_spectrum(grid, 6)
    assert lam[0] == 0.0
    assert lam[1] == pytest.approx(fp_spectral_gap(grid.delta), rel=1e-9)
    # first mode is the k = 1 doublet
    assert lam[2] == pytest.approx(lam[1], rel=1e-12)
    mode2 = fp_mode_eigenvalues(grid.delta, 2)[0]
    assert np.min(np.abs(lam - mode2)) < 1e-8 * mode2


def test_poincare_constant_refinement_stable():
    for d in (2.0, 4.0, 8.0):
        c1 = estimate_poincare_constant(QGrid(16, 32, d))
        c2 = estimate_poincare_constant(QGrid(32, 64, d))
        assert 0 < c1 < np.inf
        assert abs(c1 - c2) < 1e-10 * c2


def test_seminorm_closed_form():
    # |M grad(q1)|^2 / M integrates to int M = pi/(delta+1); phi = q1 M
    g = QGrid(16, 32, 4.0)
    val = hdot_m_seminorm(g, g.q1 * g.M)
    assert val**2 == pytest.approx(math.pi / 5, rel=1e-12)


def test_fp_operator_kernel_and_symmetry():
    g = QGrid(12, 24, 4.0)
    op = FokkerPlanckOperator(g, 0.0625)
    assert np.max(np.abs(op(np.ones(g.shape)) * g.wm)) < 1e-12
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((2,) + g.shape)
    assert op.inner(op(x), y) == pytest.approx(op.inner(x, op(y)), rel=1e-10)
    assert op.inner(op(x), x) < 0


def test_implicit_solve_residual_and_mass():
    g = QGrid(12, 24, 4.0)
    op = FokkerPlanckOperator(g, 0.0625)
    rng = np.random.default_rng(2)
    h = 1.0 + 0.1 * rng.standard_normal((3,) + g.shape)
    dt = 0.05
    hn = op.solve_implicit(g.wm * h, dt)
    resid = g.wm * hn + dt * 0.0625 * g.stiffness(hn) - g.wm * h
    assert np.max(np.abs(resid)) < 1e-13
    np.testing.assert_allclose(g.mass_h(hn), g.mass_h(h), rtol=1e-13)
    # single-cell input keeps its shape
    assert op.solve_implicit(g.wm * h[0], dt).shape == g.shape


def test_diffusion_decays_to_equilibrium_monotonically():
    g = QGrid(12, 24, 4.0)
    op = FokkerPlanckOperator(g, 0.0625)
    rng = np.random.default_rng(3)
    a = 2.0
    h = a + 0.3 * rng.standard_normal(g.shape)
    h += a - g.mass_h(h) / g.wm.sum()
    lam1 = fp_spectrum(g, 2)[1]
    dt, norms = 0.1, []
    for _ in range(40):
        h = op.solve_implicit(g.wm * h, dt)
        norms.append(math.sqrt(g.l2m_h(h - a, h - a)))
    assert np.all(np.diff(norms) < 0)
    # backward Euler damps each mode by 1/(1 + dt alpha3 lambda) or faster
    assert norms[-1] / norms[-2] <= 1.0 / (1.0 + dt * 0.0625 * lam1) + 1e-12


def test_trace_free_guard():
    with pytest.raises(ValueError):
        check_trace_free(np.eye(2))
    check_trace_free(np.array([[1.0, 2.0], [3.0, -1.0]]))


def test_drift_rejects_trace():
    g = QGrid(8, 16, 4.0)
    with pytest.raises(ValueError):
        apply_drift(g, np.eye(2), g.M)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(DELTAS))
def test_drift_conserves_mass(seed, delta):
    g = QGrid(10, 16, delta)
    rng = np.random.default_rng(seed)
    phi = rng.standard_normal(g.shape) * g.M
    out = apply_drift(g, random_sigma(rng), phi)
    scale = np.sum(np.abs(out * g.weights)) + 1e-300
    assert abs(g.integrate(out)) < 1e-12 * scale


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(DELTAS))
def test_skew_drift_annihilates_maxwellian_and_conserves_energy(seed, delta):
    g = QGrid(10, 16, delta)
    rng = np.random.default_rng(seed)
    sig = random_sigma(rng, skew=True)
    assert np.max(np.abs(apply_drift(g, sig, g.M))) < 1e-12
    phi = rng.standard_normal(g.shape) * g.M
    # L2_M pairing of the drift with its argument vanishes for skew sigma
    pair = weighted_l2_inner(g, apply_drift(g, sig, phi), phi)
    assert abs(pair) < 1e-11 * weighted_l2_inner(g, phi, phi) * np.max(np.abs(sig))


def test_drift_matches_continuous_divergence():
    # -div(sigma q M) = 2 delta (sigma q . q) M / (1 - |q|^2) for trace-free sigma
    g = QGrid(24, 32, 4.0)
    sig = np.array([[0.3, 0.7], [-0.2, -0.3]])
    got = apply_drift(g, sig, g.M)
    q1, q2 = g.q1, g.q2
    sqq = sig[0, 0] * q1 * q1 + (sig[0, 1] + sig[1, 0]) * q1 * q2 + sig[1, 1] * q2 * q2
    expect = 2 * g.delta * sqq * g.M / (1 - q1**2 - q2**2)
    np.testing.assert_allclose(got, expect, atol=1e-10 * np.max(np.abs(expect)))


def test_config_density_views():
    g = QGrid(8, 16, 4.0)
    a = 5 / (4 * math.pi)
    cd = ConfigDensity.equilibrium(g, a, cells=(2, 3))
    assert cd.h.shape == (2, 3) + g.shape
    np.testing.assert_allclose(cd.mass(), 0.25, rtol=1e-13)
    assert np.all(cd.psi == 0)
    assert np.all(cd.positivity_min() > 0)
    c2 = cd.copy()
    c2.h[0, 0, 0, 0] = 0.0
    assert cd.h[0, 0, 0, 0] == a
