import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twcsim.engine import (
    MAP_COLUMNS, EngineMap, MapError, RollingFilter, interpolate_setpoint, load_map, rolling_average,
    save_map, suboptimal_controller, brake_power_kW, fuel_rate_g_per_s,
)
from twcsim.radialprofile import get_library
from twcsim.synthetic import synthetic_map

_MAP = synthetic_map()

ROW = dict(speed_rpm=1010, bmep_bar=6.9, sa_cabtdc=10, mdot_exh_g_per_s=13, bsfc_g_per_kwh=257, co_ppm=3580,
           nox_ppm=2500, thc_ppm=427, y_co2=0.125, t_exh_c=560, tt0_c=568, tt_r3_c=567, tt_2r3_c=566, tt_r_c=537)


def _write(path, rows, cols=MAP_COLUMNS):
    lines = [",".join(cols)] + [",".join(str(r[c]) for c in cols) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_load_measured_row(tmp_path):
    m = load_map(_write(tmp_path / "m.csv", [ROW]), library=get_library())
    p = m[0]
    assert (p.speed_rpm, p.bmep_bar, p.spark_angle_CAbTDC) == (1010, 6.9, 10)
    assert p.mdot_exh_kg_per_s == pytest.approx(0.013, rel=1e-15)
    assert p.bsfc_g_per_kWh == 257 and p.engine_out_ppm == (3580, 2500, 427)
    assert p.radial_temps_C == (568, 567, 566, 537)
    assert p.fitted_profile_time >= 0


def test_save_load_round_trip(tmp_path, engine_map):
    save_map(tmp_path / "m.csv", engine_map, header="# test\n")
    back = load_map(tmp_path / "m.csv")
    for a, b in zip(engine_map.points, back.points):
        assert a.key == b.key and a.bsfc_g_per_kWh == b.bsfc_g_per_kWh
        assert a.mdot_exh_kg_per_s == pytest.approx(b.mdot_exh_kg_per_s, rel=1e-15)


def test_empty_file(tmp_path):
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(MapError):
        load_map(tmp_path / "e.csv")


def test_negative_massflow(tmp_path):
    with pytest.raises(MapError, match="row 1, column mdot"):
        load_map(_write(tmp_path / "m.csv", [dict(ROW, mdot_exh_g_per_s=-1)]))


def test_bad_cell_named(tmp_path):
    with pytest.raises(MapError, match="row 2, column co_ppm"):
        load_map(_write(tmp_path / "m.csv", [ROW, dict(ROW, speed_rpm=2000, co_ppm="abc")]))


def test_missing_column(tmp_path):
    with pytest.raises(MapError, match="t_exh_c"):
        load_map(_write(tmp_path / "m.csv", [ROW], cols=[c for c in MAP_COLUMNS if c != "t_exh_c"]))


def test_duplicate_key(tmp_path):
    with pytest.raises(MapError, match="share key"):
        load_map(_write(tmp_path / "m.csv", [ROW, ROW]))


def test_min_bsfc_order_invariant(engine_map):
    best = engine_map[engine_map.min_bsfc_index].key
    rng = np.random.default_rng(0)
    for _ in range(5):
        perm = rng.permutation(len(engine_map))
        shuffled = EngineMap([engine_map[i] for i in perm])
        assert shuffled[shuffled.min_bsfc_index].key == best


def test_power_and_fuel():
    # 4-stroke: P = bmep * V * n / 2
    assert brake_power_kW(2000, 10) == pytest.approx(10e5 * 1.969e-3 * 2000 / 60 / 2 / 1e3, rel=1e-12)
    assert fuel_rate_g_per_s(250.0, 36.0) == pytest.approx(2.5)


def test_interpolate_exact_hit(engine_map):
    for i in (0, 17, 64):
        p = engine_map[i]
        q = interpolate_setpoint(engine_map, *p.key)
        assert q.bsfc_g_per_kWh == p.bsfc_g_per_kWh and q.T_exh_C == p.T_exh_C
        assert q.engine_out_ppm == p.engine_out_ppm and q.fitted_profile_time == p.fitted_profile_time


def test_interpolate_midpoint_symmetry(engine_map):
    pts = engine_map.subset([0, 1])
    a, b = pts[0], pts[1]
    mid = [(x + y) / 2 for x, y in zip(a.key, b.key)]
    q = interpolate_setpoint(pts, *mid, k=4)
    assert q.bsfc_g_per_kWh == pytest.approx((a.bsfc_g_per_kWh + b.bsfc_g_per_kWh) / 2, rel=1e-12)
    assert q.mdot_exh_kg_per_s == pytest.approx((a.mdot_exh_kg_per_s + b.mdot_exh_kg_per_s) / 2, rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(1000, 3000), st.floats(2, 14), st.floats(-4, 28))
def test_interpolate_within_neighbours(speed, bmep, sa):
    m = _MAP
    q = interpolate_setpoint(m, speed, bmep, sa)
    _, idx = m._tree.query([speed / 1000, bmep / 10, sa / 10], k=4)
    b = m.bsfc[idx]
    assert b.min() - 1e-9 <= q.bsfc_g_per_kWh <= b.max() + 1e-9


def test_interpolate_continuous(engine_map):
    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(200):
        s, b, a = rng.uniform(1000, 3000), rng.uniform(2, 14), rng.uniform(-4, 28)
        _, i0 = engine_map._tree.query([s / 1000, b / 10, a / 10], k=5)
        _, i1 = engine_map._tree.query([(s + 1e-3) / 1000, b / 10, a / 10], k=5)
        if list(i0) != list(i1):
            continue
        q0 = interpolate_setpoint(engine_map, s, b, a).bsfc_g_per_kWh
        q1 = interpolate_setpoint(engine_map, s + 1e-3, b, a).bsfc_g_per_kWh
        assert abs(q1 - q0) < 1e-2
        checked += 1
    assert checked > 150


def test_rolling_constant():
    assert np.all(rolling_average(np.full(100, 3.25), 0.1) == 3.25)


def test_rolling_step_count():
    t = np.round(np.arange(-50, 51) * 0.1, 10)
    step = (t >= 0).astype(float)
    out = rolling_average(step, 0.1, 5.0)
    assert out[np.flatnonzero(t == 2.5)[0]] == pytest.approx(26 / 51, rel=1e-14)


def test_rolling_short_start():
    out = rolling_average(np.arange(5.0), 0.1, 5.0)
    assert out.tolist() == [0.0, 0.5, 1.0, 1.5, 2.0]


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=200))
def test_rolling_bounded(values):
    out = rolling_average(values, 0.1)
    assert np.all(out >= min(values) - 1e-9) and np.all(out <= max(values) + 1e-9)


def test_streaming_filter_matches():
    v = np.random.default_rng(1).normal(size=(300, 3))
    f = RollingFilter(0.1, 5.0)
    stream = np.array([f(x) for x in v])
    assert np.allclose(stream, rolling_average(v, 0.1, 5.0), rtol=1e-12, atol=1e-12)


def test_suboptimal_schedule(engine_map):
    best = engine_map.min_bsfc_index
    c0 = suboptimal_controller(engine_map, 5, 0.0)
    assert set(c0.schedule(10, 0.1)) == {best}
    inf = suboptimal_controller(engine_map, 5)
    assert inf.t_prime == math.inf and set(inf.schedule(10, 0.1)) == {5}
    c = suboptimal_controller(engine_map, 5, 3.0)
    s = c.schedule(10, 0.1)
    assert np.all(s[:30] == 5) and np.all(s[30:] == best)
    with pytest.raises(ValueError):
        suboptimal_controller(engine_map, 5, -1.0)
