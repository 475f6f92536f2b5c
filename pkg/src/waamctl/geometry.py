"""Spatial bookkeeping for thin-wall builds.

Positions are millimeters along the wall path. A trace stores positions in
the layer's own traversal frame (s = 0 at arc-on, increasing toward arc-off);
its direction flag says which physical end of the wall the traversal started
from, so height profiles can live in one absolute frame:

    absolute position = s            for a forward layer
    absolute position = L - s        for a reverse layer

Height profiles accumulate additively, layer by layer, on a fixed uniform
grid over [0, L].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, InvalidArgumentError

FORWARD = "forward"
REVERSE = "reverse"

#: Default wall length (mm) and profile grid spacing (mm). 0.5 mm is finer
#: than the coarsest spatial sample (1.5 mm at max torch speed), so resampling
#: onto the grid loses no controller-relevant detail.
DEFAULT_WALL_LENGTH = 110.0
DEFAULT_GRID_SPACING = 0.5

#: Recorded positions snap to this dyadic grid (~9.3e-10 mm, below the 1e-9 mm
#: position tolerance). On the grid, reflection s -> L - s is closed and
#: exactly involutive in floating point, which plain reflection of arbitrary
#: doubles is not (positions below 1 mm carry finer ulps than L - s can hold).
POSITION_GRID = 2.0 ** -30


def quantize_position(s):
    return np.multiply(np.round(np.asarray(s, dtype=float) / POSITION_GRID),
                       POSITION_GRID)

TRACE_CSV_HEADER = ["layer", "k", "t", "s_mm", "v_t_mm_s", "v_w_mm_s", "dh_mm", "w_mm", "direction"]

_POSITION_TOL = 1e-9


def _readonly(a, dtype=float):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class HeightProfile:
    """Accumulated wall height on a uniform grid over [0, L], absolute frame."""

    grid: np.ndarray      # (m,) mm, strictly increasing, constant spacing
    heights: np.ndarray   # (m,) mm
    layer_index: int      # number of accumulated layers; 0 = bare substrate

    def __post_init__(self):
        object.__setattr__(self, "grid", _readonly(self.grid))
        object.__setattr__(self, "heights", _readonly(self.heights))
        if self.grid.ndim != 1 or self.grid.size < 2:
            raise InvalidArgumentError("profile grid needs at least two points")
        if self.grid.shape != self.heights.shape:
            raise InvalidArgumentError("grid and heights length mismatch")
        steps = np.diff(self.grid)
        if not np.all(steps > 0) or np.ptp(steps) > _POSITION_TOL:
            raise InvalidArgumentError("grid must be strictly increasing with constant spacing")
        if not np.all(np.isfinite(self.heights)):
            raise InvalidArgumentError("heights must be finite")
        if self.layer_index < 0:
            raise InvalidArgumentError("layer_index must be >= 0")

    @property
    def length(self) -> float:
        return float(self.grid[-1])


def make_substrate(length: float = DEFAULT_WALL_LENGTH,
                   spacing: float = DEFAULT_GRID_SPACING) -> HeightProfile:
    """All-zero layer-0 profile over [0, length]."""
    n = int(round(length / spacing)) + 1
    grid = np.linspace(0.0, length, n)
    return HeightProfile(grid=grid, heights=np.zeros(n), layer_index=0)


@dataclass(frozen=True)
class LayerTrace:
    """Synchronized per-step record of one deposited layer.

    s is in the traversal frame and strictly increasing; u columns are
    (torch speed, wire feed rate) in mm/s, y columns are (height increment,
    bead width) in mm.
    """

    layer_index: int
    t_s: float
    direction: str
    s: np.ndarray   # (k,)
    u: np.ndarray   # (k, 2)
    y: np.ndarray   # (k, 2)

    def __post_init__(self):
        object.__setattr__(self, "s", _readonly(self.s))
        object.__setattr__(self, "u", _readonly(self.u))
        object.__setattr__(self, "y", _readonly(self.y))
        if self.direction not in (FORWARD, REVERSE):
            raise InvalidArgumentError(f"unknown direction {self.direction!r}")
        if self.layer_index < 1:
            raise InvalidArgumentError("layer_index must be >= 1")
        if self.t_s <= 0:
            raise InvalidArgumentError("t_s must be positive")
        k = self.s.shape[0]
        if self.u.shape != (k, 2) or self.y.shape != (k, 2):
            raise InvalidArgumentError("u and y must be (k, 2) arrays matching s")

    @property
    def n_samples(self) -> int:
        return int(self.s.shape[0])


def validate_trace(trace: LayerTrace, length: float) -> None:
    """Check the positional invariants of a plant-recorded trace.

    Flipped traces intentionally do not satisfy the per-step increment
    relation (the torch speed of sample k no longer generated the spacing
    between samples k and k+1), so this is a separate check rather than a
    constructor invariant.
    """
    s = trace.s
    if s.size and (s[0] < -_POSITION_TOL or s[-1] > length + _POSITION_TOL):
        raise InvalidArgumentError("trace positions outside [0, L]")
    if s.size > 1:
        if not np.all(np.diff(s) > 0):
            raise InvalidArgumentError("trace positions must be strictly increasing")
        expected = trace.u[:-1, 0] * trace.t_s
        if np.max(np.abs(np.diff(s) - expected)) > _POSITION_TOL:
            raise InvalidArgumentError("position increments do not match v_T * t_s")


def advance_position(s: float, v_t: float, t_s: float) -> float:
    """Next path position after one sampling period; the caller clamps at L."""
    if not (np.isfinite(s) and np.isfinite(v_t) and np.isfinite(t_s)):
        raise InvalidArgumentError("advance_position requires finite arguments")
    if s < 0 or v_t < 0 or t_s <= 0:
        raise InvalidArgumentError("advance_position requires s >= 0, v_t >= 0, t_s > 0")
    return s + v_t * t_s


def trace_positions_absolute(trace: LayerTrace, length: float):
    """Trace positions and height increments mapped to the absolute frame,
    sorted by ascending absolute position."""
    if trace.direction == FORWARD:
        return trace.s, trace.y[:, 0]
    return (length - trace.s)[::-1], trace.y[::-1, 0]


def accumulate_layer(prev: HeightProfile, trace: LayerTrace) -> HeightProfile:
    """Add a layer's height increments onto the accumulated profile.

    The trace's increments are linearly resampled onto the profile grid;
    grid points outside the sampled span take the nearest sampled value.
    """
    if trace.n_samples == 0:
        raise InvalidArgumentError("cannot accumulate an empty trace")
    if trace.layer_index != prev.layer_index + 1:
        raise InvalidArgumentError(
            f"trace layer {trace.layer_index} does not follow profile layer {prev.layer_index}")
    s_abs, dh = trace_positions_absolute(trace, prev.length)
    resampled = np.interp(prev.grid, s_abs, dh)
    return HeightProfile(grid=prev.grid, heights=prev.heights + resampled,
                         layer_index=trace.layer_index)


def flip_trace(trace: LayerTrace, length: float) -> LayerTrace:
    """Re-index a trace into the opposite traversal frame (s -> L - s,
    order reversed, direction toggled)."""
    if trace.s.size and (trace.s.min() < -_POSITION_TOL or trace.s.max() > length + _POSITION_TOL):
        raise InvalidArgumentError("trace positions outside [0, L]")
    direction = REVERSE if trace.direction == FORWARD else FORWARD
    return LayerTrace(layer_index=trace.layer_index, t_s=trace.t_s, direction=direction,
                      s=quantize_position(length - trace.s)[::-1],
                      u=trace.u[::-1], y=trace.y[::-1])


def interpolate_height(profile: HeightProfile, s: float) -> float:
    """Linearly interpolated profile height at position s in [0, L]."""
    if not np.isfinite(s) or s < profile.grid[0] - _POSITION_TOL or s > profile.length + _POSITION_TOL:
        raise InvalidArgumentError(f"position {s} outside profile span [0, {profile.length}]")
    return float(np.interp(s, profile.grid, profile.heights))


def mirror_profile(profile: HeightProfile) -> HeightProfile:
    """The same physical profile indexed from the opposite end of the wall."""
    return HeightProfile(grid=profile.grid, heights=profile.heights[::-1],
                         layer_index=profile.layer_index)


def edge_mask(positions, length: float, margin: float) -> np.ndarray:
    """True where a position lies within `margin` of either arc on/off point."""
    if margin < 0 or margin >= length / 2:
        raise InvalidArgumentError("margin must satisfy 0 <= margin < L/2")
    s = np.asarray(positions, dtype=float)
    return (s < margin) | (s > length - margin)


# -- trace CSV interchange ---------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_traces(path, traces) -> None:
    """Write layer traces (one build, layers concatenated) as CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_CSV_HEADER)
        for trace in traces:
            for k in range(trace.n_samples):
                writer.writerow([
                    trace.layer_index, k, _fmt(k * trace.t_s), _fmt(trace.s[k]),
                    _fmt(trace.u[k, 0]), _fmt(trace.u[k, 1]),
                    _fmt(trace.y[k, 0]), _fmt(trace.y[k, 1]),
                    trace.direction,
                ])


def read_traces(path) -> list[LayerTrace]:
    """Read a build CSV written by write_traces; fails fast with line numbers."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACE_CSV_HEADER:
            raise DataFormatError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(TRACE_CSV_HEADER):
                raise DataFormatError(f"{path}:{lineno}: expected {len(TRACE_CSV_HEADER)} fields")
            try:
                rows.append((int(row[0]), int(row[1]), float(row[2]), float(row[3]),
                             float(row[4]), float(row[5]), float(row[6]), float(row[7]), row[8]))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc

    traces = []
    i = 0
    while i < len(rows):
        layer = rows[i][0]
        j = i
        while j < len(rows) and rows[j][0] == layer and rows[j][1] == j - i:
            j += 1
        block = rows[i:j]
        t_s = block[1][2] - block[0][2] if len(block) > 1 else 0.1
        direction = block[0][8]
        traces.append(LayerTrace(
            layer_index=layer, t_s=t_s, direction=direction,
            s=np.array([r[3] for r in block]),
            u=np.array([[r[4], r[5]] for r in block]),
            y=np.array([[r[6], r[7]] for r in block]),
        ))
        i = j
    return traces
