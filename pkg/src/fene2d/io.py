"""File formats: h-field and velocity dumps, checkpoints.

Binary h-field layout (little endian)::

    8 bytes   magic b"FENEH001"
    4 x int32 n1, n2, n_r, n_theta
    float64   delta
    float64[n1 * n2 * n_r * n_theta]  h values, C order (cell i, cell j, radial, angular)

Binary velocity layout::

    8 bytes   magic b"FENEU001"
    2 x int32 n1, n2
    2 x float64 length1, length2
    float64[(n1 - 1) * n2]  U on vertical faces, C order
    float64[n1 * (n2 - 1)]  V on horizontal faces, C order
"""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

H_MAGIC = b"FENEH001"
U_MAGIC = b"FENEU001"


class DumpFormatError(ValueError):
    pass


def write_h_field(path, h: np.ndarray, delta: float) -> None:
    h = np.ascontiguousarray(h, dtype="<f8")
    if h.ndim != 4:
        raise ValueError(f"h must have shape (n1, n2, n_r, n_theta), got {h.shape}")
    with open(path, "wb") as fh:
        fh.write(H_MAGIC)
        fh.write(struct.pack("<4i", *h.shape))
        fh.write(struct.pack("<d", float(delta)))
        fh.write(h.tobytes())


def read_h_field(path) -> tuple[np.ndarray, float]:
    data = Path(path).read_bytes()
    if data[:8] != H_MAGIC:
        raise DumpFormatError(f"{path}: not an h-field dump")
    shape = struct.unpack_from("<4i", data, 8)
    (delta,) = struct.unpack_from("<d", data, 24)
    body = np.frombuffer(data, dtype="<f8", offset=32)
    if body.size != int(np.prod(shape)):
        raise DumpFormatError(f"{path}: expected {np.prod(shape)} values, found {body.size}")
    return body.reshape(shape).astype(float), float(delta)


def write_h_field_csv(path, h: np.ndarray, grid) -> None:
    """Long-format CSV: one row per (cell, q-node) with the node coordinates."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "k_r", "k_theta", "r", "theta", "h"])
        for idx in np.ndindex(h.shape):
            i, j, kr, kt = idx
            w.writerow([i, j, kr, kt, repr(float(grid.r[kr])), repr(float(grid.theta[kt])), repr(float(h[idx]))])


def write_velocity(path, flow, w: np.ndarray) -> None:
    u, v = flow.split(np.asarray(w, dtype=float))
    with open(path, "wb") as fh:
        fh.write(U_MAGIC)
        fh.write(struct.pack("<2i", flow.n1, flow.n2))
        fh.write(struct.pack("<2d", flow.length1, flow.length2))
        fh.write(np.ascontiguousarray(u, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_velocity(path):
    """Return ``(n1, n2, length1, length2, U, V)``."""
    data = Path(path).read_bytes()
    if data[:8] != U_MAGIC:
        raise DumpFormatError(f"{path}: not a velocity dump")
    n1, n2 = struct.unpack_from("<2i", data, 8)
    l1, l2 = struct.unpack_from("<2d", data, 16)
    body = np.frombuffer(data, dtype="<f8", offset=32)
    nu = (n1 - 1) * n2
    if body.size != nu + n1 * (n2 - 1):
        raise DumpFormatError(f"{path}: truncated velocity dump")
    return n1, n2, l1, l2, body[:nu].reshape(n1 - 1, n2).copy(), body[nu:].reshape(n1, n2 - 1).copy()


def write_velocity_csv(path, flow, w: np.ndarray) -> None:
    """One row per face: component, position and value."""
    u, v = flow.split(np.asarray(w, dtype=float))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["component", "x", "y", "value"])
        for name, arr, (xs, ys) in (("u", u, flow.u_points()), ("v", v, flow.v_points())):
            for val, x, y in zip(arr.ravel(), xs.ravel(), ys.ravel()):
                wr.writerow([name, repr(float(x)), repr(float(y)), repr(float(val))])


def save_checkpoint(path, disc, state) -> None:
    q, f = disc.qgrid, disc.flow
    np.savez(
        path,
        coeffs=state.u.coeffs,
        h=state.h,
        t=state.t,
        step=state.step,
        grid=np.array([f.n1, f.n2, disc.basis.n, q.n_r, q.n_theta]),
        lengths=np.array([f.length1, f.length2]),
        delta=q.delta,
    )


def load_checkpoint(path, disc):
    """Restore a :class:`~fene2d.coupled_solver.CoupledState` onto a matching discretization."""
    from .config_space import ConfigDensity
    from .coupled_solver import CoupledState
    from .flow_domain import VelocityState

    with np.load(path) as data:
        q, f = disc.qgrid, disc.flow
        expect = np.array([f.n1, f.n2, disc.basis.n, q.n_r, q.n_theta])
        if not np.array_equal(data["grid"], expect) or not np.isclose(float(data["delta"]), q.delta):
            raise DumpFormatError(
                f"{path}: checkpoint grid {data['grid'].tolist()} does not match {expect.tolist()}"
            )
        return CoupledState(
            VelocityState(disc.basis, data["coeffs"]),
            ConfigDensity(q, data["h"], disc.derived.a_eq),
            float(data["t"]),
            int(data["step"]),
        )
