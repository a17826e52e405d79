"""Spatial discretization: MAC grid on a rectangle, Stokes operator and its eigenbasis.

Velocities live on cell faces (``U`` on vertical faces, ``V`` on horizontal
faces); wall-normal faces are omitted because they carry ``u.n = 0``.  No-slip
for the tangential component enters through mirror ghosts in the Laplacian.
Scalars (pressure, the polymer density of each cell) live at cell centres.

The discrete divergence-free subspace is exactly the image of the discrete
curl of node-based stream functions vanishing on the boundary, which is how
the Stokes eigenpairs are computed.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


class StokesSetupError(RuntimeError):
    pass


@dataclass(frozen=True)
class FlowGrid:
    n1: int
    n2: int
    length1: float = 1.0
    length2: float = 1.0

    def __post_init__(self):
        if self.n1 < 3 or self.n2 < 3:
            raise ValueError(f"need at least 3 cells per direction, got {self.n1}x{self.n2}")
        if not (self.length1 > 0 and self.length2 > 0):
            raise ValueError("domain lengths must be positive")

    @property
    def h1(self) -> float:
        return self.length1 / self.n1

    @property
    def h2(self) -> float:
        return self.length2 / self.n2

    @property
    def cell_area(self) -> float:
        return self.h1 * self.h2

    @property
    def cells(self) -> tuple[int, int]:
        return (self.n1, self.n2)

    @property
    def u_shape(self) -> tuple[int, int]:
        return (self.n1 - 1, self.n2)

    @property
    def v_shape(self) -> tuple[int, int]:
        return (self.n1, self.n2 - 1)

    @property
    def n_u(self) -> int:
        return (self.n1 - 1) * self.n2

    @property
    def n_vel(self) -> int:
        return self.n_u + self.n1 * (self.n2 - 1)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        x = (np.arange(self.n1) + 0.5) * self.h1
        y = (np.arange(self.n2) + 0.5) * self.h2
        return np.meshgrid(x, y, indexing="ij")

    def u_points(self) -> tuple[np.ndarray, np.ndarray]:
        x = np.arange(1, self.n1) * self.h1
        y = (np.arange(self.n2) + 0.5) * self.h2
        return np.meshgrid(x, y, indexing="ij")

    def v_points(self) -> tuple[np.ndarray, np.ndarray]:
        x = (np.arange(self.n1) + 0.5) * self.h1
        y = np.arange(1, self.n2) * self.h2
        return np.meshgrid(x, y, indexing="ij")

    def split(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Face vector -> (U, V) arrays; views when possible."""
        w = np.asarray(w)
        return w[: self.n_u].reshape(self.u_shape), w[self.n_u :].reshape(self.v_shape)

    def join(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.concatenate([np.ravel(u), np.ravel(v)])

    def sample(self, fx, fy) -> np.ndarray:
        """Face vector from callables ``fx(x, y)``, ``fy(x, y)``."""
        return self.join(fx(*self.u_points()), fy(*self.v_points()))

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        """Discrete L2(Omega) product of two face vectors."""
        return float(self.cell_area * np.dot(a, b))

    def norm(self, a: np.ndarray) -> float:
        return float(np.sqrt(self.inner(a, a)))

    def key(self) -> str:
        raw = f"mac:{self.n1}:{self.n2}:{self.length1!r}:{self.length2!r}"
        return hashlib.sha256(raw.encode()).hexdigest()[:16]


def _diff(n: int, h: float) -> sp.csr_matrix:
    """(n-1) x n forward difference."""
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n), format="csr") / h


def _lap_dirichlet(n: int, h: float) -> sp.csr_matrix:
    return sp.diags([np.ones(n - 1), -2.0 * np.ones(n), np.ones(n - 1)], [-1, 0, 1], format="csr") / h**2


def _lap_ghost(n: int, h: float) -> sp.csr_matrix:
    """Cell-centred second difference with a zero wall value half a cell outside."""
    main = -2.0 * np.ones(n)
    main[0] = main[-1] = -3.0
    return sp.diags([np.ones(n - 1), main, np.ones(n - 1)], [-1, 0, 1], format="csr") / h**2


class StokesOperator:
    """Discrete Leray projector ``P`` and Stokes operator ``A = -P Lap`` on a :class:`FlowGrid`."""

    def __init__(self, grid: FlowGrid):
        self.grid = grid
        g = grid
        n1, n2 = g.n1, g.n2
        dx, dy = _diff(n1, g.h1), _diff(n2, g.h2)
        ix, iy = sp.identity(n1, format="csr"), sp.identity(n2, format="csr")
        self.grad = sp.vstack([sp.kron(dx, iy), sp.kron(ix, dy)], format="csr")
        self.div = (-self.grad.T).tocsr()
        lap_u = sp.kron(_lap_dirichlet(n1 - 1, g.h1), iy) + sp.kron(
            sp.identity(n1 - 1), _lap_ghost(n2, g.h2)
        )
        lap_v = sp.kron(_lap_ghost(n1, g.h1), sp.identity(n2 - 1)) + sp.kron(
            ix, _lap_dirichlet(n2 - 1, g.h2)
        )
        self.lap = sp.block_diag([lap_u, lap_v], format="csr")
        # stream function on interior nodes -> face velocities (U = d psi/dy, V = -d psi/dx)
        self.curl = sp.vstack(
            [
                -sp.kron(sp.identity(n1 - 1), dy.T),
                sp.kron(dx.T, sp.identity(n2 - 1)),
            ],
            format="csr",
        )
        pois = (self.div @ self.grad).tolil()
        # pinning one cell removes the constant null space; compatible data keep phi[0] = 0
        pois[0, 0] -= 1.0
        try:
            self._pressure = spla.splu(pois.tocsc())
        except RuntimeError as exc:
            raise StokesSetupError(f"singular pressure system on {grid}: {exc}") from exc

    def divergence(self, w: np.ndarray) -> np.ndarray:
        return self.div @ w

    def gradient(self, p: np.ndarray) -> np.ndarray:
        return self.grad @ np.ravel(p)

    def pressure_solve(self, w: np.ndarray) -> np.ndarray:
        return self._pressure.solve(self.div @ w)

    def project(self, w: np.ndarray) -> np.ndarray:
        """Leray projection: remove the discrete gradient part of ``w``."""
        w = np.asarray(w, dtype=float)
        return w - self.grad @ self.pressure_solve(w)

    def laplacian(self, w: np.ndarray) -> np.ndarray:
        return self.lap @ w

    def apply_A(self, w: np.ndarray) -> np.ndarray:
        return self.project(-(self.lap @ self.project(w)))


def build_stokes(grid: FlowGrid) -> StokesOperator:
    return StokesOperator(grid)


@dataclass(frozen=True, eq=False)
class StokesBasis:
    """First ``n`` eigenpairs of the discrete Stokes operator, L2-orthonormal."""

    grid: FlowGrid
    eigenvalues: np.ndarray
    vectors: np.ndarray  # (n_vel, n)

    @property
    def n(self) -> int:
        return self.eigenvalues.size

    def project(self, w: np.ndarray) -> np.ndarray:
        """Coefficients of the orthogonal projection onto the span (``P_n``)."""
        return self.grid.cell_area * (self.vectors.T @ w)

    def reconstruct(self, c: np.ndarray) -> np.ndarray:
        return self.vectors @ c

    @cached_property
    def gradient_norms(self) -> np.ndarray:
        return np.sqrt(self.eigenvalues)


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs) > 0.5 * np.max(np.abs(vecs), axis=0), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def stokes_eigenbasis(
    stokes: StokesOperator,
    n: int,
    eig_tol: float = 1e-8,
    cache_dir: str | Path | None = None,
) -> StokesBasis:
    """Lowest ``n`` Stokes eigenpairs, sorted ascending.

    Solves ``C^T(-Lap)C phi = lambda C^T C phi`` for stream functions ``phi``;
    ``v = C phi`` is then discretely divergence-free with zero boundary flux.
    """
    grid = stokes.grid
    dim = (grid.n1 - 1) * (grid.n2 - 1)
    if not 1 <= n <= dim:
        raise ValueError(f"n must be in [1, {dim}] for grid {grid.n1}x{grid.n2}, got {n}")
    cache = None
    if cache_dir is not None:
        cache = Path(cache_dir) / f"stokes_{grid.key()}_{n}.npz"
        if cache.exists():
            log.info("loading Stokes basis from %s", cache)
            data = np.load(cache)
            return StokesBasis(grid, data["eigenvalues"], data["vectors"])
    c = stokes.curl
    stiff = (c.T @ (-stokes.lap) @ c).tocsc()
    mass = (c.T @ c).tocsc()
    try:
        if dim <= 1600 or n > dim // 4:
            vals, phis = scipy.linalg.eigh(
                stiff.toarray(), mass.toarray(), subset_by_index=[0, n - 1]
            )
        else:
            v0 = np.random.default_rng(12345).standard_normal(dim)
            vals, phis = spla.eigsh(stiff, k=n, M=mass, sigma=0.0, which="LM", v0=v0, tol=1e-13)
    except (np.linalg.LinAlgError, spla.ArpackError, spla.ArpackNoConvergence) as exc:
        raise StokesSetupError(f"Stokes eigensolve failed: {exc}") from exc
    order = np.argsort(vals, kind="stable")
    vals, phis = vals[order], phis[:, order]
    vecs = c @ phis
    # orthonormal in the discrete L2 product (eigh already returns C^T C-orthonormal phis)
    vecs, _ = np.linalg.qr(vecs)
    vecs = _fix_signs(vecs / np.sqrt(grid.cell_area))
    av = -(stokes.lap @ vecs)
    vals = np.einsum("ij,ij->j", vecs, av) * grid.cell_area
    resid = np.linalg.norm(stokes.project(av[:, 0]) - vals[0] * vecs[:, 0]) * np.sqrt(grid.cell_area)
    if not np.all(np.isfinite(vals)) or resid > eig_tol * max(1.0, vals[0]):
        raise StokesSetupError(f"Stokes eigensolve did not converge (residual {resid:.2e})")
    basis = StokesBasis(grid, vals, vecs)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        np.savez(cache, eigenvalues=vals, vectors=vecs)
        log.info("cached Stokes basis in %s", cache)
    return basis


def project_Pn(basis: StokesBasis, w: np.ndarray) -> np.ndarray:
    return basis.project(w)


def viscous_semigroup_step(basis: StokesBasis, c: np.ndarray, alpha1: float, dt: float) -> np.ndarray:
    """Exact viscous flow ``exp(-alpha1 dt A)`` in the eigenbasis."""
    if dt < 0:
        raise ValueError("dt must be >= 0")
    return c * np.exp(-alpha1 * basis.eigenvalues * dt)


# ---- velocity calculus -------------------------------------------------------

def _pad_faces_x(u: np.ndarray) -> np.ndarray:
    """U (n1-1, n2) -> (n1+1, n2) with the zero wall-normal faces included."""
    return np.pad(u, ((1, 1), (0, 0)))


def _pad_faces_y(v: np.ndarray) -> np.ndarray:
    return np.pad(v, ((0, 0), (1, 1)))


def velocity_gradient(grid: FlowGrid, w: np.ndarray) -> np.ndarray:
    """Cell-centred ``g[..., i, j] = d u_i / d x_j``; shape (n1, n2, 2, 2).

    The diagonal uses the face differences, so ``trace(g)`` is the discrete
    divergence exactly.  Off-diagonal entries use centred differences of
    cell-averaged velocities with odd reflection at the walls (no-slip).
    """
    u, v = grid.split(w)
    up, vp = _pad_faces_x(u), _pad_faces_y(v)
    out = np.empty(grid.cells + (2, 2))
    out[..., 0, 0] = (up[1:] - up[:-1]) / grid.h1
    out[..., 1, 1] = (vp[:, 1:] - vp[:, :-1]) / grid.h2
    uc = 0.5 * (up[1:] + up[:-1])
    vc = 0.5 * (vp[:, 1:] + vp[:, :-1])
    ucg = np.concatenate([-uc[:, :1], uc, -uc[:, -1:]], axis=1)
    vcg = np.concatenate([-vc[:1], vc, -vc[-1:]], axis=0)
    out[..., 0, 1] = (ucg[:, 2:] - ucg[:, :-2]) / (2.0 * grid.h2)
    out[..., 1, 0] = (vcg[2:] - vcg[:-2]) / (2.0 * grid.h1)
    return out


def sigma_of_u(grid: FlowGrid, w: np.ndarray, mode: str = "general") -> np.ndarray:
    """Per-cell ``sigma(u)``: ``grad u`` (general) or ``grad u - grad u^T`` (corotational)."""
    g = velocity_gradient(grid, w)
    if mode == "general":
        return g
    if mode == "corotational":
        return g - np.swapaxes(g, -1, -2)
    raise ValueError(f"unknown sigma mode {mode!r}")


def _extend_linear(a: np.ndarray) -> np.ndarray:
    """Add one ghost layer on each side by linear extrapolation."""
    a = np.concatenate([2 * a[:1] - a[1:2], a, 2 * a[-1:] - a[-2:-1]], axis=0)
    return np.concatenate([2 * a[:, :1] - a[:, 1:2], a, 2 * a[:, -1:] - a[:, -2:-1]], axis=1)


def tensor_divergence(grid: FlowGrid, tau: np.ndarray) -> np.ndarray:
    """Row-wise divergence ``(sum_j d_j tau_ij)_i`` of a cell-centred tensor, on the faces.

    Shear components are averaged to the nodes, with linear extrapolation across
    the walls, so constant fields give exactly zero and linear fields are
    differentiated exactly.
    """
    t11, t12, t21, t22 = tau[..., 0, 0], tau[..., 0, 1], tau[..., 1, 0], tau[..., 1, 1]

    def nodes(t):
        e = _extend_linear(t)
        return 0.25 * (e[1:, 1:] + e[:-1, 1:] + e[1:, :-1] + e[:-1, :-1])

    n12, n21 = nodes(t12), nodes(t21)  # (n1+1, n2+1) at all grid nodes
    fx = (t11[1:] - t11[:-1]) / grid.h1 + (n12[1:-1, 1:] - n12[1:-1, :-1]) / grid.h2
    fy = (t22[:, 1:] - t22[:, :-1]) / grid.h2 + (n21[1:, 1:-1] - n21[:-1, 1:-1]) / grid.h1
    return grid.join(fx, fy)


def advection_term(grid: FlowGrid, w: np.ndarray) -> np.ndarray:
    """``div(u x u)`` on the faces, energy-neutral for discretely divergence-free ``u``."""
    u, v = grid.split(w)
    up, vp = _pad_faces_x(u), _pad_faces_y(v)
    h1, h2 = grid.h1, grid.h2
    uc = 0.5 * (up[1:] + up[:-1])  # cells
    vc = 0.5 * (vp[:, 1:] + vp[:, :-1])
    # node values: (n1+1, n2+1); tangential velocity is zero on every wall node
    u_node = np.zeros((grid.n1 + 1, grid.n2 + 1))
    v_node = np.zeros_like(u_node)
    u_node[:, 1:-1] = 0.5 * (up[:, 1:] + up[:, :-1])
    v_node[1:-1, :] = 0.5 * (vp[1:] + vp[:-1])
    uv = u_node * v_node
    au = (uc[1:] ** 2 - uc[:-1] ** 2) / h1 + (uv[1:-1, 1:] - uv[1:-1, :-1]) / h2
    av = (vc[:, 1:] ** 2 - vc[:, :-1] ** 2) / h2 + (uv[1:, 1:-1] - uv[:-1, 1:-1]) / h1
    return grid.join(au, av)


def gradient_norm_sq(grid: FlowGrid, stokes: StokesOperator, w: np.ndarray) -> float:
    """``||grad u||^2`` from the face differences (equals ``<-Lap u, u>``)."""
    return grid.inner(w, -(stokes.lap @ w))


class VelocityState:
    """Velocity as coefficients on a :class:`StokesBasis`; the face field is derived."""

    def __init__(self, basis: StokesBasis, coeffs: np.ndarray | None = None):
        self.basis = basis
        self.coeffs = np.zeros(basis.n) if coeffs is None else np.asarray(coeffs, dtype=float).copy()
        if self.coeffs.shape != (basis.n,):
            raise ValueError(f"expected {basis.n} coefficients, got {self.coeffs.shape}")

    @property
    def nodal(self) -> np.ndarray:
        return self.basis.reconstruct(self.coeffs)

    def l2_norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))

    def grad_norm_sq(self) -> float:
        return float(np.sum(self.basis.eigenvalues * self.coeffs**2))

    def copy(self) -> "VelocityState":
        return VelocityState(self.basis, self.coeffs)
