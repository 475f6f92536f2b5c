import numpy as np
import pytest

from waamctl import geometry
from waamctl.errors import DataFormatError, InvalidArgumentError

from conftest import constant_trace, make_trace


# -- advance_position --------------------------------------------------------

def test_advance_nominal_step():
    assert geometry.advance_position(0.0, 7.5, 0.1) == pytest.approx(0.75)


def test_advance_zero_speed():
    assert geometry.advance_position(10.0, 0.0, 0.1) == 10.0


def test_advance_sum_terminates_layer():
    # arithmetic oracle: 147 constant steps of 0.75 mm overshoot a 110 mm wall
    s = 0.0
    for _ in range(147):
        s = geometry.advance_position(s, 7.5, 0.1)
    assert s == pytest.approx(110.25)
    assert s >= 110.0


def test_advance_rejects_nonfinite():
    with pytest.raises(InvalidArgumentError):
        geometry.advance_position(np.nan, 1.0, 0.1)
    with pytest.raises(InvalidArgumentError):
        geometry.advance_position(0.0, -1.0, 0.1)


def test_advance_is_linear():
    rng = np.random.default_rng(0)
    for _ in range(50):
        s, v, t = rng.uniform(0, 100), rng.uniform(0, 15), rng.uniform(0.01, 1)
        a = rng.uniform(0.1, 3)
        base = geometry.advance_position(s, v, t) - s
        assert geometry.advance_position(s, a * v, t) - s == pytest.approx(a * base, rel=1e-12)
        assert geometry.advance_position(s, v, a * t) - s == pytest.approx(a * base, rel=1e-12)


# -- accumulate_layer ---------------------------------------------------------

def test_accumulate_constant_field():
    prev = geometry.make_substrate(110.0)
    state = geometry.accumulate_layer(prev, constant_trace(n=147))
    assert np.allclose(state.heights, 1.8)
    assert state.layer_index == 1


def test_accumulate_two_layers_additive():
    prof = geometry.make_substrate(110.0)
    prof = geometry.accumulate_layer(prof, constant_trace(n=147, layer_index=1))
    prof = geometry.accumulate_layer(prof, constant_trace(n=147, layer_index=2,
                                                          direction=geometry.REVERSE))
    assert np.allclose(prof.heights, 3.6)


def test_accumulate_linear_ramp_midpoint():
    prev = geometry.make_substrate(110.0)
    n = 147
    s = np.linspace(0, 110, n)
    dh = 1.0 + s / 110.0  # 1.0 at s=0 to 2.0 at s=110
    trace = make_trace(s, np.tile([7.5, 63.5], (n, 1)),
                       np.column_stack([dh, np.full(n, 5.2)]))
    prof = geometry.accumulate_layer(prev, trace)
    assert geometry.interpolate_height(prof, 55.0) == pytest.approx(1.5, abs=1e-9)


def test_accumulate_empty_trace_rejected():
    prev = geometry.make_substrate(110.0)
    empty = make_trace(np.zeros(0), np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(InvalidArgumentError):
        geometry.accumulate_layer(prev, empty)


def test_accumulate_layer_index_must_follow():
    prev = geometry.make_substrate(110.0)
    with pytest.raises(InvalidArgumentError):
        geometry.accumulate_layer(prev, constant_trace(layer_index=2))


def test_accumulation_additivity_property():
    # N traces applied sequentially equal substrate plus the sum of the
    # individually resampled increment fields
    rng = np.random.default_rng(3)
    prof = geometry.make_substrate(110.0)
    total = np.zeros_like(prof.heights)
    for i in range(1, 6):
        n = rng.integers(80, 160)
        s = np.sort(rng.uniform(0, 110, n))
        dh = rng.uniform(0.5, 2.5, n)
        direction = geometry.FORWARD if i % 2 == 1 else geometry.REVERSE
        trace = make_trace(s, np.tile([7.5, 63.5], (n, 1)),
                           np.column_stack([dh, np.full(n, 5.0)]),
                           layer_index=i, direction=direction)
        s_abs, dh_abs = geometry.trace_positions_absolute(trace, 110.0)
        total += np.interp(prof.grid, s_abs, dh_abs)
        prof = geometry.accumulate_layer(prof, trace)
    assert np.max(np.abs(prof.heights - total)) < 1e-9


def test_reverse_trace_accumulates_in_absolute_frame():
    prev = geometry.make_substrate(110.0)
    n = 111
    s = np.linspace(0, 110, n)
    dh = np.linspace(1.0, 2.0, n)  # rises along the traversal
    trace = make_trace(s, np.tile([7.5, 63.5], (n, 1)),
                       np.column_stack([dh, np.full(n, 5.2)]),
                       direction=geometry.REVERSE)
    prof = geometry.accumulate_layer(prev, trace)
    # traversal start (s=0) is the absolute far end for a reverse layer
    assert geometry.interpolate_height(prof, 110.0) == pytest.approx(1.0, abs=1e-9)
    assert geometry.interpolate_height(prof, 0.0) == pytest.approx(2.0, abs=1e-9)


# -- flip_trace ----------------------------------------------------------------

def test_flip_reflects_positions():
    trace = make_trace([10.0, 20.0], [[7.5, 63.5]] * 2, [[1.8, 5.2]] * 2)
    flipped = geometry.flip_trace(trace, 110.0)
    assert flipped.s[-1] == pytest.approx(100.0)
    assert flipped.direction == geometry.REVERSE


def test_flip_is_involution():
    rng = np.random.default_rng(0)
    n = 40
    s = geometry.quantize_position(np.sort(rng.uniform(0, 110, n)))
    trace = make_trace(s, rng.uniform(2, 15, (n, 2)), rng.uniform(1, 6, (n, 2)))
    back = geometry.flip_trace(geometry.flip_trace(trace, 110.0), 110.0)
    assert np.array_equal(back.s, trace.s)
    assert np.array_equal(back.u, trace.u)
    assert np.array_equal(back.y, trace.y)
    assert back.direction == trace.direction


def test_flip_reverses_order_and_preserves_pairs():
    trace = make_trace([0.0, 50.0, 100.0], [[3, 30], [5, 50], [7, 70]],
                       [[1, 4], [2, 5], [3, 6]])
    flipped = geometry.flip_trace(trace, 110.0)
    assert np.all(np.diff(flipped.s) > 0)
    # first flipped sample corresponds to the last deposited point
    assert flipped.u[0, 0] == 7 and flipped.y[0, 0] == 3
    assert sorted(map(tuple, flipped.u)) == sorted(map(tuple, trace.u))
    assert sorted(map(tuple, flipped.y)) == sorted(map(tuple, trace.y))


# -- interpolate_height ----------------------------------------------------------

def test_interpolate_midpoint():
    prof = geometry.HeightProfile(grid=np.array([0.0, 1.0]), heights=np.array([0.0, 2.0]),
                                  layer_index=1)
    assert geometry.interpolate_height(prof, 0.5) == pytest.approx(1.0)


def test_interpolate_exact_at_grid_points():
    rng = np.random.default_rng(1)
    prof = geometry.HeightProfile(grid=np.linspace(0, 110, 221),
                                  heights=rng.uniform(0, 5, 221), layer_index=1)
    for idx in (0, 57, 220):
        assert geometry.interpolate_height(prof, prof.grid[idx]) == prof.heights[idx]


def test_interpolate_matches_oracle():
    # independent piecewise-linear oracle via manual bracketing
    rng = np.random.default_rng(2)
    grid = np.linspace(0, 110, 221)
    heights = rng.uniform(0, 5, 221)
    prof = geometry.HeightProfile(grid=grid, heights=heights, layer_index=1)

    def oracle(s):
        j = int(np.searchsorted(grid, s, side="right")) - 1
        j = min(max(j, 0), len(grid) - 2)
        t = (s - grid[j]) / (grid[j + 1] - grid[j])
        return (1 - t) * heights[j] + t * heights[j + 1]

    for s in rng.uniform(0, 110, 300):
        assert geometry.interpolate_height(prof, s) == pytest.approx(oracle(s), abs=1e-12)


def test_interpolate_monotone_between_grid_points():
    prof = geometry.HeightProfile(grid=np.linspace(0, 10, 11),
                                  heights=np.linspace(0, 5, 11), layer_index=1)
    samples = [geometry.interpolate_height(prof, s) for s in np.linspace(0, 10, 101)]
    assert np.all(np.diff(samples) >= -1e-15)


def test_interpolate_out_of_range_rejected():
    prof = geometry.make_substrate(110.0)
    with pytest.raises(InvalidArgumentError):
        geometry.interpolate_height(prof, -1.0)
    with pytest.raises(InvalidArgumentError):
        geometry.interpolate_height(prof, 111.0)


# -- edge_mask --------------------------------------------------------------------

def test_edge_mask_examples():
    mask = geometry.edge_mask([2.0, 55.0, 107.0], 110.0, 5.0)
    assert mask.tolist() == [True, False, True]


def test_edge_mask_boundary_is_interior():
    mask = geometry.edge_mask([5.0, 105.0], 110.0, 5.0)
    assert mask.tolist() == [False, False]


def test_edge_mask_invalid_margin():
    with pytest.raises(InvalidArgumentError):
        geometry.edge_mask([1.0], 110.0, 60.0)


# -- trace CSV --------------------------------------------------------------------

def test_csv_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    traces = []
    for i in range(1, 4):
        n = int(rng.integers(5, 30))
        direction = geometry.FORWARD if i % 2 else geometry.REVERSE
        traces.append(make_trace(np.sort(rng.uniform(0, 110, n)),
                                 rng.uniform(2, 106, (n, 2)), rng.uniform(0.1, 6, (n, 2)),
                                 layer_index=i, direction=direction))
    path = tmp_path / "build.csv"
    geometry.write_traces(path, traces)
    loaded = geometry.read_traces(path)
    assert len(loaded) == len(traces)
    for a, b in zip(traces, loaded):
        assert a.layer_index == b.layer_index
        assert a.direction == b.direction
        assert a.t_s == b.t_s
        assert np.array_equal(a.s, b.s)
        assert np.array_equal(a.u, b.u)
        assert np.array_equal(a.y, b.y)


def test_csv_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("layer,k\n1,0\n")
    with pytest.raises(DataFormatError):
        geometry.read_traces(path)


def test_csv_reports_line_number(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text(",".join(geometry.TRACE_CSV_HEADER) + "\n"
                    "1,0,0.0,0.0,7.5,63.5,not_a_number,5.2,forward\n")
    with pytest.raises(DataFormatError, match=":2"):
        geometry.read_traces(path)


def test_validate_trace_accepts_plant_spacing():
    trace = constant_trace(n=10)
    geometry.validate_trace(trace, 110.0)


def test_validate_trace_rejects_wrong_spacing():
    trace = make_trace([0.0, 1.0], [[7.5, 63.5]] * 2, [[1.8, 5.2]] * 2)
    with pytest.raises(InvalidArgumentError):
        geometry.validate_trace(trace, 110.0)
