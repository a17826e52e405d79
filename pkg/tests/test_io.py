import csv
import struct

import numpy as np
import pytest

from fene2d import io as fio
from fene2d.coupled_solver import Scenario, initial_state, run


def test_h_field_roundtrip(tmp_path, small_disc):
    st = initial_state(small_disc, Scenario(epsilon=0.1))
    p = tmp_path / "h.bin"
    fio.write_h_field(p, st.h, small_disc.qgrid.delta)
    raw = p.read_bytes()
    assert raw[:8] == b"FENEH001"
    assert struct.unpack_from("<4i", raw, 8) == st.h.shape
    h, delta = fio.read_h_field(p)
    assert delta == 4.0 and np.array_equal(h, st.h)
    (tmp_path / "junk.bin").write_bytes(b"nothing here")
    with pytest.raises(fio.DumpFormatError):
        fio.read_h_field(tmp_path / "junk.bin")
    with pytest.raises(fio.DumpFormatError):
        (tmp_path / "cut.bin").write_bytes(raw[:-8])
        fio.read_h_field(tmp_path / "cut.bin")


def test_h_field_csv(tmp_path):
    from fene2d.config_space import QGrid

    q = QGrid(2, 4, 3.0)
    h = np.arange(2 * 1 * 2 * 4, dtype=float).reshape(2, 1, 2, 4)
    fio.write_h_field_csv(tmp_path / "h.csv", h, q)
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows[0] == ["i", "j", "k_r", "k_theta", "r", "theta", "h"]
    assert len(rows) == 1 + h.size
    assert float(rows[-1][-1]) == h[-1, -1, -1, -1]


def test_velocity_dumps(tmp_path, small_disc):
    flow = small_disc.flow
    w = small_disc.basis.reconstruct(np.random.default_rng(0).standard_normal(small_disc.basis.n))
    fio.write_velocity(tmp_path / "u.bin", flow, w)
    n1, n2, l1, l2, u, v = fio.read_velocity(tmp_path / "u.bin")
    assert (n1, n2, l1, l2) == (flow.n1, flow.n2, 1.0, 1.0)
    assert np.array_equal(flow.join(u, v), w)
    fio.write_velocity_csv(tmp_path / "u.csv", flow, w)
    rows = list(csv.reader(open(tmp_path / "u.csv")))
    assert len(rows) == 1 + flow.n_vel
    with pytest.raises(fio.DumpFormatError):
        fio.read_velocity(tmp_path / "u.csv")


def test_checkpoint_restart_matches_straight_run(tmp_path, small_disc):
    sc = Scenario(epsilon=0.05, u0="random", u0_amplitude=0.1, dt=0.01, t_end=0.1)
    final, _ = run(small_disc, sc)
    half = Scenario(epsilon=0.05, u0="random", u0_amplitude=0.1, dt=0.01, t_end=0.05)
    mid, _ = run(small_disc, half)
    fio.save_checkpoint(tmp_path / "ck.npz", small_disc, mid)
    restored = fio.load_checkpoint(tmp_path / "ck.npz", small_disc)
    assert restored.step == 5 and restored.t == mid.t
    rest, _ = run(small_disc, sc, state=restored)
    np.testing.assert_allclose(rest.u.coeffs, final.u.coeffs, rtol=1e-13, atol=1e-18)
    np.testing.assert_allclose(rest.h, final.h, rtol=1e-13)


def test_checkpoint_grid_mismatch(tmp_path, small_disc, ref_disc):
    st = initial_state(small_disc, Scenario())
    fio.save_checkpoint(tmp_path / "ck.npz", small_disc, st)
    with pytest.raises(fio.DumpFormatError):
        fio.load_checkpoint(tmp_path / "ck.npz", ref_disc)


def test_initial_data_from_file(tmp_path, small_disc):
    st = initial_state(small_disc, Scenario(epsilon=0.1))
    fio.write_h_field(tmp_path / "h0.bin", st.h, small_disc.qgrid.delta)
    st2 = initial_state(small_disc, Scenario(initial="file", initial_file=str(tmp_path / "h0.bin")))
    np.testing.assert_allclose(st2.h, st.h, rtol=1e-14)
    fio.write_h_field(tmp_path / "bad.bin", st.h[:, :2], small_disc.qgrid.delta)
    with pytest.raises(ValueError, match="does not match"):
        initial_state(small_disc, Scenario(initial="file", initial_file=str(tmp_path / "bad.bin")))
