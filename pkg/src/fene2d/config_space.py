"""Configuration-space discretization on the unit disk.

The unknown is the ratio ``h = f / M`` with ``M(q) = (1 - |q|^2)^delta``.
Nodes form a polar tensor grid: Gauss-Jacobi in ``s = r^2`` with weight
``(1 - s)^(delta - 1)`` (every node strictly inside the disk) times a uniform
periodic grid in ``theta``.  With this weight the M-weighted mass and stiffness
forms and the Kramers stress are integrated exactly for polynomial ``h`` of the
grid's degree, which keeps the discrete Fokker-Planck operator free of spurious
boundary modes.

Radial derivatives use the doubled-grid trick: a field sampled on ``(r_j, theta)``
is also known at ``(-r_j, theta + pi)``, so each angular parity class is
interpolated by an even or odd polynomial on ``[-1, 1]``.  Angular derivatives
are spectral (FFT).

Quadrature tolerances: ``int (1-|q|^2)^(delta-1+k) |q|^{2m} dq`` with integers
``k, m >= 0`` and ``k + m < 2 n_r`` is exact to rounding for any ``delta``
(this covers ``int M``, ``int |q|^2 M`` and the equilibrium Kramers stress).
Plain Lebesgue integrals of smooth functions are not weight-adapted; ``int 1``
converges like ``n_r^-2`` (relative error about 2e-3 at ``n_r = 32``, see
:meth:`QGrid.lebesgue_tolerance`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.special


class GridMismatchError(ValueError):
    pass


class EigenSolveError(RuntimeError):
    pass


def maxwellian(q, delta: float):
    """Equilibrium weight ``(1 - |q|^2)^delta`` for points ``q`` of shape (..., 2)."""
    q = np.asarray(q, dtype=float)
    rr = np.sum(q * q, axis=-1)
    if np.any(rr >= 1.0):
        raise ValueError("maxwellian is only defined for |q| < 1")
    return (1.0 - rr) ** delta


def _diff_matrix(x: np.ndarray) -> np.ndarray:
    """Polynomial differentiation matrix on arbitrary distinct nodes."""
    dx = x[:, None] - x[None, :]
    np.fill_diagonal(dx, 1.0)
    # capacity scaling keeps the products representable for ~200 nodes on [-1, 1]
    c = np.prod(2.0 * dx, axis=1)
    d = (c[:, None] / c[None, :]) / dx
    np.fill_diagonal(d, 0.0)
    np.fill_diagonal(d, -d.sum(axis=1))
    return d


@dataclass(frozen=True, eq=False)
class QGrid:
    """Polar tensor grid on the unit disk carrying the Maxwellian weight.

    Arrays indexed ``[j, k]`` refer to radial node ``j`` and angular node ``k``.
    """

    n_r: int
    n_theta: int
    delta: float
    r: np.ndarray = field(init=False, repr=False)
    theta: np.ndarray = field(init=False, repr=False)
    w_radial: np.ndarray = field(init=False, repr=False)
    wm_radial: np.ndarray = field(init=False, repr=False)
    wk_radial: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_r < 2:
            raise ValueError(f"n_r must be >= 2, got {self.n_r}")
        if self.n_theta < 4 or self.n_theta % 2:
            raise ValueError(f"n_theta must be even and >= 4, got {self.n_theta}")
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        alpha = self.delta - 1.0
        x, wx = scipy.special.roots_jacobi(self.n_r, alpha, 0.0)
        s = 0.5 * (1.0 + x)
        # omega_j integrates (1-s)^alpha g(s) over (0, 1)
        omega = wx * 2.0 ** (-alpha - 1.0)
        dtheta = 2.0 * np.pi / self.n_theta
        # int_D F dq = int_0^{2pi} int_0^1 F(sqrt(s), theta) ds/2 dtheta
        object.__setattr__(self, "r", np.sqrt(s))
        object.__setattr__(self, "wk_radial", 0.5 * omega * dtheta)
        object.__setattr__(self, "wm_radial", 0.5 * omega * (1.0 - s) * dtheta)
        object.__setattr__(self, "w_radial", 0.5 * omega * (1.0 - s) ** (-alpha))
        object.__setattr__(
            self, "theta", 2.0 * np.pi * np.arange(self.n_theta) / self.n_theta
        )

    # ---- geometry and weights -------------------------------------------
    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_r, self.n_theta)

    @property
    def dtheta(self) -> float:
        return 2.0 * np.pi / self.n_theta

    @cached_property
    def s(self) -> np.ndarray:
        return self.r**2

    @cached_property
    def weights(self) -> np.ndarray:
        """Lebesgue quadrature weights, shape (n_r, n_theta)."""
        return np.repeat((self.w_radial * self.dtheta)[:, None], self.n_theta, axis=1)

    @cached_property
    def m_radial(self) -> np.ndarray:
        return (1.0 - self.s) ** self.delta

    @cached_property
    def M(self) -> np.ndarray:
        return np.repeat(self.m_radial[:, None], self.n_theta, axis=1)

    @cached_property
    def inv_M(self) -> np.ndarray:
        return 1.0 / self.M

    @cached_property
    def wm(self) -> np.ndarray:
        """M-weighted quadrature weights: ``sum wm * h`` approximates ``int h M dq``."""
        return np.repeat(self.wm_radial[:, None], self.n_theta, axis=1)

    def lebesgue_tolerance(self) -> float:
        """Relative error of the plain quadrature of the constant 1 on this grid."""
        return abs(float(self.weights.sum()) / np.pi - 1.0)

    @cached_property
    def q1(self) -> np.ndarray:
        return self.r[:, None] * np.cos(self.theta)[None, :]

    @cached_property
    def q2(self) -> np.ndarray:
        return self.r[:, None] * np.sin(self.theta)[None, :]

    @cached_property
    def kramers_weights(self) -> np.ndarray:
        """Weights turning ``h`` into (tau11, tau12, tau22); shape (3, n_r, n_theta).

        ``(q x q) / (1 - |q|^2) * M = (q x q) (1 - |q|^2)^(delta - 1)``.
        """
        base = np.repeat(self.wk_radial[:, None], self.n_theta, axis=1)
        return np.stack([base * self.q1**2, base * self.q1 * self.q2, base * self.q2**2])

    def fingerprint(self) -> tuple:
        return (self.n_r, self.n_theta, float(self.delta))

    def check_same(self, other: "QGrid") -> None:
        if self.fingerprint() != other.fingerprint():
            raise GridMismatchError(f"q-grid mismatch: {self.fingerprint()} vs {other.fingerprint()}")

    def check_field(self, a: np.ndarray) -> None:
        if a.shape[-2:] != self.shape:
            raise GridMismatchError(f"field trailing shape {a.shape[-2:]} != grid {self.shape}")

    # ---- spectral calculus ----------------------------------------------
    @cached_property
    def _radial_diff(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.n_r
        full = _diff_matrix(np.concatenate([self.r, -self.r]))
        a, b = full[:n, :n], full[:n, n:]
        return a + b, a - b

    @property
    def d_even(self) -> np.ndarray:
        return self._radial_diff[0]

    @property
    def d_odd(self) -> np.ndarray:
        return self._radial_diff[1]

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        return np.arange(self.n_theta // 2 + 1, dtype=float)

    @cached_property
    def mode_parity_odd(self) -> np.ndarray:
        return (np.arange(self.n_theta // 2 + 1) % 2).astype(bool)

    def _split_parity(self, h):
        shifted = np.roll(h, self.n_theta // 2, axis=-1)
        return 0.5 * (h + shifted), 0.5 * (h - shifted)

    def d_r(self, h: np.ndarray) -> np.ndarray:
        even, odd = self._split_parity(h)
        return np.matmul(self.d_even, even) + np.matmul(self.d_odd, odd)

    def d_r_adjoint(self, v: np.ndarray) -> np.ndarray:
        """Euclidean transpose of :meth:`d_r`."""
        even, odd = self._split_parity(v)
        return np.matmul(self.d_even.T, even) + np.matmul(self.d_odd.T, odd)

    def d_theta(self, h: np.ndarray) -> np.ndarray:
        k = 1j * self.wavenumbers
        k[-1] = 0.0  # Nyquist derivative dropped: keeps the operator real and skew
        return np.fft.irfft(np.fft.rfft(h, axis=-1) * k, n=self.n_theta, axis=-1)

    def neg_d_theta2(self, h: np.ndarray) -> np.ndarray:
        """Spectral ``-d^2/dtheta^2`` with the Nyquist mode kept, so only constants are annihilated."""
        return np.fft.irfft(
            np.fft.rfft(h, axis=-1) * self.wavenumbers**2, n=self.n_theta, axis=-1
        )

    def gradient(self, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cartesian gradient ``(d/dq1, d/dq2)`` of an h-field."""
        hr = self.d_r(h)
        ht = self.d_theta(h) / self.r[:, None]
        c, s = np.cos(self.theta), np.sin(self.theta)
        return c * hr - s * ht, s * hr + c * ht

    # ---- integrals and norms (f-like inputs) ------------------------------
    def integrate(self, g: np.ndarray) -> np.ndarray:
        """Plain quadrature ``int_D g dq`` over the trailing two axes."""
        self.check_field(g)
        return np.einsum("...jk,jk->...", g, self.weights)

    def h_of(self, phi: np.ndarray) -> np.ndarray:
        self.check_field(phi)
        return phi * self.inv_M

    def stiffness(self, h: np.ndarray) -> np.ndarray:
        """``K h`` where ``h^T K h`` approximates ``int M |grad h|^2``."""
        wm = self.wm_radial[:, None]
        radial = self.d_r_adjoint(wm * self.d_r(h))
        angular = (wm / self.s[:, None]) * self.neg_d_theta2(h)
        return radial + angular

    def energy_h(self, h: np.ndarray) -> np.ndarray:
        """``int M |grad h|^2`` over the trailing axes."""
        wm = self.wm_radial[:, None]
        hr = self.d_r(h)
        radial = np.einsum("...jk,jk->...", hr * hr, np.broadcast_to(wm, self.shape))
        ang = h * self.neg_d_theta2(h)
        angular = np.einsum(
            "...jk,jk->...", ang, np.broadcast_to(wm / self.s[:, None], self.shape)
        )
        return radial + angular

    def mass_h(self, h: np.ndarray) -> np.ndarray:
        """``int h M dq``."""
        return np.einsum("...jk,jk->...", h, self.wm)

    def l2m_h(self, h1: np.ndarray, h2: np.ndarray) -> np.ndarray:
        """``int h1 h2 M dq`` (the L2_M product of ``h1 M`` and ``h2 M``)."""
        return np.einsum("...jk,jk->...", h1 * h2, self.wm)

    # ---- operators of the Fokker-Planck equation --------------------------
    def _drift_coefficients(self, sigma: np.ndarray):
        sigma = np.asarray(sigma, dtype=float)
        s11 = sigma[..., 0, 0]
        sym = 0.5 * (sigma[..., 0, 1] + sigma[..., 1, 0])
        skew = 0.5 * (sigma[..., 1, 0] - sigma[..., 0, 1])
        c2, s2 = np.cos(2.0 * self.theta), np.sin(2.0 * self.theta)
        e = (...,) + (None,) * 2
        radial = s11[e] * c2 + sym[e] * s2
        angular = -s11[e] * s2 + sym[e] * c2 + skew[e]
        return radial, angular

    def drift_form(self, sigma: np.ndarray, g: np.ndarray) -> np.ndarray:
        """``(sigma q) . grad g`` at the nodes (the test-function side of the drift)."""
        radial, angular = self._drift_coefficients(sigma)
        return radial * self.r[:, None] * self.d_r(g) + angular * self.d_theta(g)

    def drift_adjoint(self, sigma: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`drift_form` in the Euclidean node product."""
        radial, angular = self._drift_coefficients(sigma)
        return self.d_r_adjoint(radial * self.r[:, None] * v) - self.d_theta(angular * v)


def check_trace_free(sigma: np.ndarray, tol: float = 1e-12) -> None:
    sigma = np.asarray(sigma, dtype=float)
    tr = sigma[..., 0, 0] + sigma[..., 1, 1]
    scale = max(1.0, float(np.max(np.abs(sigma), initial=0.0)))
    if np.any(np.abs(tr) > tol * scale):
        raise ValueError(f"sigma must be trace-free (max |tr| = {np.max(np.abs(tr)):.3e})")


def weighted_l2_inner(grid: QGrid, phi: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """``int phi psi / M dq``."""
    grid.check_field(phi)
    grid.check_field(psi)
    return grid.integrate(phi * psi * grid.inv_M)


def hdot_m_seminorm(grid: QGrid, phi: np.ndarray) -> np.ndarray:
    """``|| M grad(phi/M) ||_{L2_M}``, computed as ``sqrt(int M |grad h|^2)``."""
    h = grid.h_of(phi)
    val = grid.energy_h(h)
    if not np.all(np.isfinite(val)):
        raise FloatingPointError("non-finite gradient energy")
    return np.sqrt(np.maximum(val, 0.0))


def apply_drift(grid: QGrid, sigma: np.ndarray, phi: np.ndarray, check: bool = True) -> np.ndarray:
    """``-div_q(sigma q phi)`` in weak (divergence) form.

    The discrete result integrates to zero against constants for every
    ``sigma``, and vanishes on ``phi = M`` when ``sigma`` is skew.
    """
    if check:
        check_trace_free(sigma)
    grid.check_field(phi)
    return grid.drift_adjoint(sigma, grid.weights * phi) / grid.weights


def kramers_stress(grid: QGrid, phi: np.ndarray) -> np.ndarray:
    """Kramers stress ``int (q x q)/(1-|q|^2) phi dq`` for f-like input; shape (..., 2, 2)."""
    if grid.delta <= 1.0:
        raise ValueError(f"Kramers stress needs delta > 1, got {grid.delta}")
    return kramers_stress_h(grid, grid.h_of(phi))


def kramers_stress_h(grid: QGrid, h: np.ndarray) -> np.ndarray:
    grid.check_field(h)
    t = np.einsum("...jk,cjk->...c", h, grid.kramers_weights)
    out = np.empty(t.shape[:-1] + (2, 2))
    out[..., 0, 0] = t[..., 0]
    out[..., 0, 1] = out[..., 1, 0] = t[..., 1]
    out[..., 1, 1] = t[..., 2]
    return out


def q_mass(grid: QGrid, phi: np.ndarray) -> np.ndarray:
    return grid.integrate(phi)


def positivity_min(grid: QGrid, phi: np.ndarray):
    grid.check_field(phi)
    return np.min(phi, axis=(-2, -1))


class FokkerPlanckOperator:
    """``L h = alpha3 / M * div(M grad h)`` acting on h-fields.

    Symmetric and nonpositive in the ``int . . M dq`` product; the kernel is the
    constants.  Also owns the cached block solvers for ``(I - dt L)``.
    """

    def __init__(self, grid: QGrid, alpha3: float):
        if not alpha3 > 0:
            raise ValueError(f"alpha3 must be > 0, got {alpha3}")
        self.grid = grid
        self.alpha3 = float(alpha3)
        self._solvers: dict[float, np.ndarray] = {}

    def __call__(self, h: np.ndarray) -> np.ndarray:
        return -self.alpha3 * self.grid.stiffness(h) / self.grid.wm

    def inner(self, h1: np.ndarray, h2: np.ndarray) -> np.ndarray:
        return self.grid.l2m_h(h1, h2)

    def mode_blocks(self) -> list[np.ndarray]:
        """Scaled stiffness blocks ``S^-1 K_k S^-1`` per angular wavenumber, ``S = sqrt(wM)``."""
        g = self.grid
        sq = np.sqrt(g.wm_radial)
        blocks = []
        for k, odd in zip(g.wavenumbers, g.mode_parity_odd):
            d = g.d_odd if odd else g.d_even
            dt = sq[:, None] * d / sq[None, :]
            blocks.append(dt.T @ dt + np.diag(k**2 / g.s))
        return blocks

    def _inverse_blocks(self, dt: float) -> np.ndarray:
        key = float(dt)
        inv = self._solvers.get(key)
        if inv is None:
            eye = np.eye(self.grid.n_r)
            inv = np.stack(
                [
                    scipy.linalg.inv(eye + dt * self.alpha3 * blk, check_finite=True)
                    for blk in self.mode_blocks()
                ]
            )
            if len(self._solvers) > 8:
                self._solvers.clear()
            self._solvers[key] = inv
        return inv

    def solve_implicit(self, rhs_weighted: np.ndarray, dt: float) -> np.ndarray:
        """Solve ``(W_M + dt alpha3 K) h = rhs_weighted`` for h (backward Euler on diffusion).

        ``rhs_weighted`` is already multiplied by the M-weighted quadrature weights.
        """
        g = self.grid
        sq = np.sqrt(g.wm_radial)[:, None]
        inv = self._inverse_blocks(dt)
        rhs = np.asarray(rhs_weighted, dtype=float)
        lead = rhs.shape[:-2]
        spec = np.fft.rfft(rhs.reshape((-1,) + g.shape) / sq, axis=-1)
        # (nk, cells, n_r) stacks let matmul hit BLAS once per wavenumber
        stack = np.transpose(spec, (2, 0, 1))
        inv_t = np.swapaxes(inv, 1, 2)
        out = np.empty_like(stack)
        out.real = np.matmul(stack.real, inv_t)
        out.imag = np.matmul(stack.imag, inv_t)
        h = np.fft.irfft(np.transpose(out, (1, 2, 0)), n=g.n_theta, axis=-1) / sq
        return h.reshape(lead + g.shape)


def assemble_fp_operator(grid: QGrid, alpha3: float) -> FokkerPlanckOperator:
    return FokkerPlanckOperator(grid, alpha3)


def fp_spectrum(grid: QGrid, n_lowest: int = 6) -> np.ndarray:
    """Lowest eigenvalues of ``-div(M grad .)/M`` (the FP form without ``alpha3``), zero included."""
    op = FokkerPlanckOperator(grid, 1.0)
    vals = [0.0]
    try:
        for k, blk in zip(grid.wavenumbers, op.mode_blocks()):
            if k == 0:
                # the kernel is known exactly (sqrt(wM) in scaled variables); deflate it
                y0 = np.sqrt(grid.wm_radial)
                basis = scipy.linalg.null_space(y0[None, :] / np.linalg.norm(y0))
                blk = basis.T @ blk @ basis
            ev = scipy.linalg.eigh(blk, eigvals_only=True, check_finite=True)
            mult = 1 if k == 0 or k == grid.n_theta // 2 else 2
            vals.extend(np.repeat(ev[: max(n_lowest, 1)], mult))
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise EigenSolveError(f"FP eigensolve failed: {exc}") from exc
    vals = np.sort(np.asarray(vals))
    return vals[:n_lowest]


def estimate_poincare_constant(grid: QGrid) -> float:
    """Best constant ``C`` in ``|phi|_{L2_M} <= C |phi|_Hdot`` for ``int phi dq = 0``.

    The constraint is the M-weighted orthogonal complement of the constants, so
    ``C = 1/sqrt(lambda_1)`` with ``lambda_1`` the first nonzero eigenvalue.
    """
    lam1 = fp_spectrum(grid, n_lowest=2)[1]
    if not (np.isfinite(lam1) and lam1 > 0):
        raise EigenSolveError(f"spectral gap not positive: {lam1}")
    return 1.0 / math.sqrt(lam1)


class ConfigDensity:
    """Densities ``f = h M`` for a stack of spatial cells (leading axes)."""

    def __init__(self, grid: QGrid, h: np.ndarray, a_eq: float):
        grid.check_field(h)
        self.grid = grid
        self.h = np.asarray(h, dtype=float)
        self.a_eq = float(a_eq)

    @classmethod
    def equilibrium(cls, grid: QGrid, a_eq: float, cells: tuple[int, ...] = ()):
        return cls(grid, np.full(cells + grid.shape, a_eq), a_eq)

    @property
    def f(self) -> np.ndarray:
        return self.h * self.grid.M

    @property
    def psi(self) -> np.ndarray:
        return (self.h - self.a_eq) * self.grid.M

    @property
    def psi_h(self) -> np.ndarray:
        return self.h - self.a_eq

    def mass(self) -> np.ndarray:
        return self.grid.mass_h(self.h)

    def positivity_min(self) -> np.ndarray:
        return np.min(self.f, axis=(-2, -1))

    def copy(self) -> "ConfigDensity":
        return ConfigDensity(self.grid, self.h.copy(), self.a_eq)
