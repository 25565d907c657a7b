import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from twcsim.policy import (
    GRID_DIMS, REDUCED_T1, ColdStartController, LambdaWeights, PackingError, PolicyError, PolicyTable,
    StateGrid, TWCControlProblem, build_grid, compress_table, compressed_states, pack_codes, pack_policy,
    payload_bytes, query_packed, simulate_controller, simulate_policy, solve_policy, stage_cost,
    tune_switch_time, unpack_codes, unpack_policy,
)
from twcsim.thermal import TWCSystem

# twelve ops spanning the map with at most 16 distinct values per control
SUBSET_KEYS = [(2000, 14, 2), (1000, 2, 12), (1000, 2, 24), (1500, 5, 6), (1500, 5, 18), (2000, 5, 8),
               (2000, 8, 2), (2500, 8, 8), (3000, 8, 8), (3000, 8, 18), (1000, 8, -2), (2500, 2, 14)]


def subset_ops(engine_map):
    keys = {p.key: i for i, p in enumerate(engine_map.points)}
    return [keys[tuple(float(v) for v in k)] for k in SUBSET_KEYS]


class ToyHeating:
    """One temperature state 0..10, three ops, emissions only below 6."""

    heat = np.array([1, 3, 0])
    fuel = np.array([2.0, 4.0, 1.0])
    emis = np.array([1.0, 3.0, 2.0])
    dt = 1.0

    def step(self, T, u):
        return min(T + self.heat[u], 10)

    def cost(self, T, u):
        return self.fuel[u] + (3.0 * self.emis[u] if T < 6 else 0.0)

    def transitions(self, grid):
        T = grid.nodes()[:, 0].astype(int)
        succ = np.array([[[self.step(t, u)] for u in range(3)] for t in T], dtype=float)
        cost = np.array([[self.cost(t, u) for u in range(3)] for t in T])
        return succ, cost


def brute_force_first_action(toy, T0, stages):
    """Cheapest first op over all op sequences, pruning dominated partial paths."""
    best = []
    for a in range(3):
        frontier = {toy.step(T0, a): toy.cost(T0, a)}
        for _ in range(stages - 1):
            nxt = {}
            for T, c in frontier.items():
                for u in range(3):
                    T2, c2 = toy.step(T, u), c + toy.cost(T, u)
                    if c2 < nxt.get(T2, np.inf):
                        nxt[T2] = c2
            frontier = nxt
        best.append(min(frontier.values()))
    return int(np.argmin(best)), best


# -- grid -----------------------------------------------------------------------


def test_default_grid_size():
    g = build_grid()
    assert g.node_count == 148000
    assert g.shape == (37, 10, 10, 2, 10, 2)
    assert len(REDUCED_T1) == 19


def test_grid_from_dict_and_errors():
    g = build_grid({"twc1_t1_c": [0, 450, 900]})
    assert g.shape[0] == 3 and g.node_count == 3 * 4000
    assert build_grid([[0.0]] * 6).node_count == 1
    with pytest.raises(ValueError, match="strictly increasing"):
        build_grid({"twc2_t1_c": [0, 100, 50]})
    with pytest.raises(ValueError, match="unknown"):
        build_grid({"bogus": [1]})
    with pytest.raises(ValueError):
        build_grid([[0.0]] * 5)


def test_grid_nodes_row_major():
    g = build_grid([[0, 1], [0], [0], [0], [0], [5, 6, 7]])
    n = g.nodes()
    assert n.shape == (6, 6)
    assert n[:, 5].tolist() == [5, 6, 7, 5, 6, 7]
    assert n[:, 0].tolist() == [0, 0, 0, 1, 1, 1]


@given(st.lists(st.floats(-100, 1000), min_size=6, max_size=6))
def test_grid_interpolate_linear_exact(p):
    g = build_grid([[0, 300, 900], [0, 900], [0, 900], [-200, 100], [0, 900], [-200, 100]])
    coef = np.arange(1, 7, dtype=float)
    V = g.nodes() @ coef
    clamped = np.clip(p, [b[0] for b in g.breakpoints], [b[-1] for b in g.breakpoints])
    assert g.interpolate(V, p) == pytest.approx(clamped @ coef, rel=1e-9, abs=1e-6)


# -- cost -----------------------------------------------------------------------


def test_stage_cost_units():
    assert stage_cost(250.0, [0, 0, 0, 0], (1.0, 2.0, 3.0), 2.0) == 500.0
    # 1 g/s of NOx at weight 2 adds 2 to the bracket
    assert stage_cost(250.0, [0, 1e-3, 0, 0], (1.0, 2.0, 3.0), 1.0) == pytest.approx(252.0)
    with pytest.raises(ValueError):
        stage_cost(1.0, [0, 0, 0], (-1, 0, 0), 1.0)


def test_lambda_normalisation(engine_map):
    s = LambdaWeights.scale(engine_map)
    eo = engine_map.engine_out_array()[:, :3] * 1e3
    assert s == pytest.approx(engine_map.bsfc.min() / eo.min(axis=0))
    lam = LambdaWeights.from_normalized([10, 0, 1], engine_map)
    assert lam.array == pytest.approx([10 * s[0], 0, s[2]])
    assert lam.normalized == (10, 0, 1)
    with pytest.raises(ValueError):
        LambdaWeights.from_normalized([-1, 0, 0], engine_map)
    with pytest.raises(ValueError):
        LambdaWeights((1.0, 2.0))


def test_hot_node_cost_is_fuel(specs, engine_map):
    system = TWCSystem(*specs, n_channels=10)
    op = engine_map.min_bsfc_index
    prob = TWCControlProblem(system, engine_map, LambdaWeights.from_normalized([1, 1, 1], engine_map),
                             dt=1.0, substeps=4, op_indices=[op])
    g = build_grid([[900.0], [900.0], [900.0], [0.0], [900.0], [0.0]])
    _, cost = prob.transitions(g)
    assert cost[0, 0] == pytest.approx(engine_map.bsfc[op], rel=1e-2)


# -- value iteration -----------------------------------------------------------------


def test_toy_matches_brute_force():
    toy = ToyHeating()
    grid = StateGrid((np.arange(11.0),))
    pol = solve_policy(toy, grid)
    for T in range(11):
        first, _ = brute_force_first_action(toy, T, 50)
        assert pol.op_index[T] == first, T


def test_toy_value_nondecreasing():
    toy = ToyHeating()
    seen = []
    solve_policy(toy, StateGrid((np.arange(11.0),)), callback=lambda k, V, p: seen.append(V.copy()))
    for a, b in itertools.pairwise(seen):
        assert np.all(b >= a)


def test_toy_horizon():
    pol = solve_policy(ToyHeating(), StateGrid((np.arange(11.0),)), stabilization_window=5)
    # from T=0 the policy settles once 6 s of heating fit in the horizon
    assert 1 <= pol.detected_horizon_s <= 10
    assert pol.iterations == pol.detected_horizon_s + 5


def test_unstable_policy_raises():
    class Flip:
        dt = 1.0

        def transitions(self, grid):
            return np.zeros((1, 2, 1)), np.array([[1.0, 1.0]])

    # stable from the start, but the iteration cap is shorter than the window
    with pytest.raises(PolicyError):
        solve_policy(Flip(), StateGrid((np.zeros(1),)), stabilization_window=10, max_iter=5)
    with pytest.raises(ValueError):
        solve_policy(Flip(), StateGrid((np.zeros(1),)), stabilization_window=0)


@pytest.fixture(scope="module")
def small_problem(specs, engine_map):
    system = TWCSystem(*specs, n_channels=6)
    ops = subset_ops(engine_map)
    prob = TWCControlProblem(system, engine_map, (0, 0, 0), dt=5.0, substeps=5, op_indices=ops)
    grid = build_grid([[0, 300, 600], [0, 600], [0, 600], [-200, 100], [0, 600], [-200, 100]])
    prob.raw_transitions(grid)
    return prob, grid


def test_zero_lambda_is_min_bsfc(small_problem, engine_map):
    prob, grid = small_problem
    pol = solve_policy(prob, grid)
    assert np.all(pol.op_index == engine_map.min_bsfc_index)


def test_weights_shift_policy(small_problem, engine_map):
    prob, grid = small_problem
    heavy = solve_policy(prob.with_weights(LambdaWeights.from_normalized([100] * 3, engine_map)), grid)
    cold = grid.nearest_node(np.zeros(6))
    assert heavy.op_index[cold] != engine_map.min_bsfc_index
    assert prob.lam.values == (0.0, 0.0, 0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_query_at_nodes(small_problem, engine_map, seed):
    prob, grid = small_problem
    rng = np.random.default_rng(seed)
    table = PolicyTable(grid, rng.choice(prob.ops, grid.node_count), 10.0,
                        controls=prob.controls, op_indices=prob.ops)
    i = int(rng.integers(grid.node_count))
    x = grid.nodes()[i]
    op, sp = table.query(x[:4], x[4:])
    assert op == table.op_index[i]
    assert sp == pytest.approx(engine_map[op].key)


def test_policy_save_load_csv(tmp_path, small_problem, engine_map):
    prob, grid = small_problem
    pol = solve_policy(prob.with_weights((1.0, 1.0, 1.0)), grid)
    pol.save(tmp_path / "p.npz")
    back = PolicyTable.load(tmp_path / "p.npz")
    assert np.array_equal(back.op_index, pol.op_index)
    assert back.detected_horizon_s == pol.detected_horizon_s
    assert back.lam == (1.0, 1.0, 1.0)
    pol.to_csv(tmp_path / "p.csv", engine_map, header="# test\n")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "# test"
    assert lines[1].split(",")[:6] == list(GRID_DIMS)
    assert len(lines) == 2 + grid.node_count
    with pytest.raises(ValueError):
        PolicyTable(grid, [0, 1], 1.0)


def test_zero_lambda_closed_loop_fuel(specs, small_problem, engine_map):
    prob, grid = small_problem
    pol = solve_policy(prob, grid)
    system = TWCSystem(*specs, n_channels=6)
    run = simulate_policy(pol, system, engine_map, duration=20, dt=0.5)
    ref = simulate_controller(system, engine_map, lambda *a: engine_map.min_bsfc_index,
                              *system.initial_state(), duration=20, dt=0.5)
    assert run.fuel_g == pytest.approx(ref.fuel_g, rel=1e-12)
    assert run.mean_bsfc == pytest.approx(engine_map.bsfc[engine_map.min_bsfc_index])
    assert len(run.t) == 40


def test_tune_switch_time(engine_map):
    heat = subset_ops(engine_map)[1]
    lo, hi = engine_map.bsfc.min(), engine_map.bsfc[heat]
    target = 0.5 * (lo + hi)
    tp = tune_switch_time(engine_map, heat, target, duration=100.0, dt=0.1, tol=0.5)
    assert 0 < tp < 100
    with pytest.raises(ValueError):
        tune_switch_time(engine_map, heat, hi + 50, duration=100.0)


def test_controller_estimator(specs, engine_map):
    g = {"twc1_t1_c": [0, 900], "twc1_t2_c": [0, 900], "twc1_t3_c": [0, 900], "twc2_t1_c": [0, 900]}
    ctl = ColdStartController(lam_n=(0, 0, 0), grid=g, dt=5.0, substeps=2, n_channels=4,
                              op_indices=subset_ops(engine_map)[:3]).fit(engine_map)
    assert ctl.get_params()["dt"] == 5.0
    assert np.all(ctl.predict(np.zeros((3, 6))) == engine_map.min_bsfc_index)
    run = ctl.simulate(duration=1.0, dt=0.5)
    assert len(run.t) == 2


# -- compression and packing ----------------------------------------------------------


def test_compressed_count():
    g = build_grid()
    states = compressed_states(REDUCED_T1, g)
    # oracle: count by direct enumeration of the ordering constraints
    t2 = g.breakpoints[1]
    n = 0
    for v in REDUCED_T1:
        cap = t2[t2 >= v - 1e-9][0]
        n += sum(1 for a in t2 for b in g.breakpoints[2] if b <= a <= cap)
    n *= 2 * 10 * 2
    assert len(states) == n == 12520
    assert len(REDUCED_T1) * 10 * 10 * 2 * 10 * 2 == 76000
    rows = [tuple(r) for r in states]
    assert rows == sorted(rows)
    assert np.all(states[:, 2] <= states[:, 1])


def test_compress_matches_full_table(engine_map, rng):
    g = build_grid()
    ops = subset_ops(engine_map)
    pol = PolicyTable(g, rng.choice(ops, g.node_count), 100.0)
    comp = compress_table(pol)
    assert comp.count == 12520
    assert comp.packed_payload_bytes == 18780
    on_grid = np.isin(comp.states[:, 0], g.breakpoints[0])
    idx = g.nearest_node(comp.states[on_grid])
    assert np.array_equal(comp.op_index[on_grid], pol.op_index[idx])


def test_pack_codes_layout():
    assert pack_codes([0xABC]) == b"\xbc\x0a"
    assert pack_codes([0xABC, 0x123]) == b"\xbc\x3a\x12"
    assert payload_bytes(9500) == 14250
    assert payload_bytes(1) == 2
    with pytest.raises(PackingError):
        pack_codes([0x1000])


@given(st.lists(st.integers(0, 0xFFF), max_size=300))
def test_pack_codes_round_trip(codes):
    data = pack_codes(codes)
    assert len(data) == payload_bytes(len(codes))
    assert unpack_codes(data, len(codes)).tolist() == codes


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_packed_query_round_trip(engine_map, seed):
    rng = np.random.default_rng(seed)
    g = build_grid()
    pol = PolicyTable(g, rng.choice(subset_ops(engine_map), g.node_count), 100.0)
    comp = compress_table(pol)
    data = pack_policy(comp, engine_map, provenance="twcsim test")
    packed = unpack_policy(data)
    assert packed.count == comp.count and packed.provenance == "twcsim test"
    assert len(data) == packed.header_bytes + payload_bytes(comp.count)
    for r in rng.integers(comp.count, size=50):
        s = comp.states[r]
        assert packed.rank(s) == r
        assert query_packed(data, s) == engine_map[comp.op_index[r]].key


def test_packing_errors(engine_map):
    g = build_grid()
    pol = PolicyTable(g, np.arange(g.node_count) % len(engine_map), 1.0)
    with pytest.raises(PackingError, match="exceed"):
        pack_policy(compress_table(pol), engine_map)
    with pytest.raises(PackingError, match="magic"):
        unpack_policy(b"XXXX" + bytes(20))
    ok = pack_policy(compress_table(PolicyTable(g, np.full(g.node_count, 3), 1.0)), engine_map)
    with pytest.raises(PackingError):
        unpack_policy(ok[:-1])
