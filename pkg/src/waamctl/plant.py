"""Synthetic thin-wall deposition plant.

Stands in for a physical testbed when generating datasets and evaluating
controllers in closed loop. Per step (sampling period t_s, layer i):

    T+      = T + t_s * (k_q * v_w - k_cool(i) * (T - T_env))
    k_cool(i) = k_c0 / (1 + k_layer * i)            # slower cooling up high
    A       = k_a * (v_w / v_t)                     # conserved wire volume
    w_raw   = w0 + k_w * sqrt(A) * (1 + k_t * (T - T_ref) / T_ref)
    dh_raw  = A / (k_shape * w_raw)
    ramp    = 1 + r0 * exp(-t / tau_on)             # arc-on over-deposit
    droop   = 1 - d0 * exp(-(L - s) / sigma_end)    # arc-off under-deposit
    output  = (dh_raw * ramp * droop + eps_h,  w_raw + eps_w)

eps are zero-mean Gaussian per channel from the seeded generator. The plant
deliberately shares no structural form with the learned model families, so
fitting it is a genuine approximation task.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import geometry
from .configfile import load_dataclass
from .errors import InvalidArgumentError

PLANT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ProcessInput:
    """One step of command input: torch speed and wire feed rate, mm/s."""
    v_t: float
    v_w: float


@dataclass(frozen=True)
class ProcessOutput:
    """One step of measured output: height increment and bead width, mm."""
    delta_h: float
    w: float


@dataclass(frozen=True)
class PlantConfig:
    t_s: float = 0.1            # s
    length: float = 110.0       # mm, wall length
    k_q: float = 2.0            # K per (mm/s) * s, arc heat input per wire feed
    k_c0: float = 0.30          # 1/s, base cooling rate
    k_layer: float = 0.05       # cooling slowdown per accumulated layer
    t_env: float = 300.0        # ambient, K-like
    t_ref: float = 900.0        # width-response reference temperature
    k_a: float = 0.717956       # mm, bead area per unit VPD (calibrated)
    w0: float = 2.994420        # mm, width intercept (calibrated)
    k_w: float = 1.0405         # width gain on sqrt(area)
    k_t: float = 0.65           # width sensitivity to (T - t_ref)/t_ref
    k_shape: float = 0.66       # bead fill factor: A = k_shape * w * dh
    r0: float = 0.25            # arc-on over-deposit amplitude
    tau_on: float = 1.5         # s, arc-on transient time constant
    d0: float = 0.2             # arc-off droop amplitude
    sigma_end: float = 6.0      # mm, droop length scale
    sigma_h: float = 0.02       # mm, height measurement noise SD
    sigma_w: float = 0.04       # mm, width measurement noise SD
    lag_steps: int = 0          # optional measurement delay, samples
    seed: int = 0

    def __post_init__(self):
        if self.k_c0 <= 0 or self.k_layer < 0:
            raise InvalidArgumentError("require k_c0 > 0 and k_layer >= 0")
        if self.sigma_h < 0 or self.sigma_w < 0:
            raise InvalidArgumentError("noise SDs must be >= 0")
        if self.t_s <= 0 or self.length <= 0:
            raise InvalidArgumentError("t_s and length must be positive")

    def k_cool(self, layer_index: int) -> float:
        return self.k_c0 / (1.0 + self.k_layer * layer_index)

    @classmethod
    def from_file(cls, path) -> "PlantConfig":
        return load_dataclass(cls, path, PLANT_SCHEMA_VERSION)


@dataclass(frozen=True)
class PlantState:
    """Value-type plant state; operations return updated copies."""
    temperature: float
    s: float                        # traversal-frame position, mm
    t_layer: float                  # seconds since arc-on of current layer
    layer_index: int                # 1-based index of the layer being deposited
    profile: geometry.HeightProfile  # accumulated build, absolute frame
    pending: tuple = ()             # queued outputs when lag_steps > 0


def initial_state(cfg: PlantConfig) -> PlantState:
    return PlantState(temperature=cfg.t_env, s=0.0, t_layer=0.0, layer_index=1,
                      profile=geometry.make_substrate(cfg.length))


def layer_direction(layer_index: int) -> str:
    """Back-and-forth printing: odd layers run forward, even layers reverse."""
    return geometry.FORWARD if layer_index % 2 == 1 else geometry.REVERSE


def bead_geometry(temperature: float, v_t: float, v_w: float, cfg: PlantConfig):
    """Noise-free bead cross-section terms (A, w_raw, dh_raw) at temperature T."""
    if v_t <= 0:
        raise InvalidArgumentError("v_t must be > 0 (VPD undefined)")
    if not (np.isfinite(v_t) and np.isfinite(v_w)) or v_w < 0:
        raise InvalidArgumentError("inputs must be finite with v_w >= 0")
    area = cfg.k_a * (v_w / v_t)
    w_raw = cfg.w0 + cfg.k_w * np.sqrt(area) * (1.0 + cfg.k_t * (temperature - cfg.t_ref) / cfg.t_ref)
    dh_raw = area / (cfg.k_shape * w_raw)
    return area, float(w_raw), float(dh_raw)


def plant_step(state: PlantState, u: ProcessInput, cfg: PlantConfig,
               rng: np.random.Generator):
    """Apply one input sample: measure the bead, advance position and thermal state.

    Outputs are evaluated at the pre-step position/temperature; then the
    position advances by v_t * t_s (caller clamps/terminates at L) and the
    thermal proxy integrates one explicit Euler step.
    """
    _, w_raw, dh_raw = bead_geometry(state.temperature, u.v_t, u.v_w, cfg)
    ramp = 1.0 + cfg.r0 * np.exp(-state.t_layer / cfg.tau_on)
    droop = 1.0 - cfg.d0 * np.exp(-(cfg.length - state.s) / cfg.sigma_end)
    droop = max(droop, 0.0)  # cannot un-deposit past the droop zone
    eps = rng.standard_normal(2)
    delta_h = max(dh_raw * ramp * droop + cfg.sigma_h * eps[0], 0.0)
    width = w_raw + cfg.sigma_w * eps[1]
    out = ProcessOutput(delta_h=float(delta_h), w=float(width))

    k_cool = cfg.k_cool(state.layer_index)
    temp = state.temperature + cfg.t_s * (cfg.k_q * u.v_w - k_cool * (state.temperature - cfg.t_env))
    new_state = replace(state, temperature=float(temp),
                        s=geometry.advance_position(state.s, u.v_t, cfg.t_s),
                        t_layer=state.t_layer + cfg.t_s)

    if cfg.lag_steps > 0:
        queue = state.pending + (out,)
        if len(queue) > cfg.lag_steps:
            emitted, queue = queue[0], queue[1:]
        else:
            emitted = queue[0]  # before the pipeline fills, repeat the oldest
        return replace(new_state, pending=queue), emitted
    return new_state, out


def _resolve_input(input_source, k: int, state: PlantState) -> ProcessInput:
    if callable(input_source):
        u = input_source(k, state)
    elif isinstance(input_source, ProcessInput):
        u = input_source
    else:
        seq = np.asarray(input_source, dtype=float)
        if seq.ndim == 1:
            u = seq
        else:
            if k >= seq.shape[0]:
                raise InvalidArgumentError(f"recorded input sequence exhausted at step {k}")
            u = seq[k]
    if isinstance(u, ProcessInput):
        return u
    return ProcessInput(v_t=float(u[0]), v_w=float(u[1]))


def run_layer(state: PlantState, cfg: PlantConfig, input_source,
              rng: np.random.Generator):
    """Deposit one full layer from s = 0 to s = L.

    input_source is a constant (ProcessInput or 2-sequence), a recorded
    (k, 2) array, or a callable (k, state) -> input invoked once per step.
    Samples are recorded at every position strictly below L; the final
    partial advance lands the state exactly at L. The measured increments
    are accumulated onto the build profile.
    """
    if state.s != 0.0 or state.t_layer != 0.0:
        raise InvalidArgumentError("run_layer requires a layer-start state (s = 0)")
    s_list, u_list, y_list = [], [], []
    k = 0
    while state.s < cfg.length - 1e-12:
        u = _resolve_input(input_source, k, state)
        s_list.append(float(geometry.quantize_position(state.s)))
        state, out = plant_step(state, u, cfg, rng)
        u_list.append([u.v_t, u.v_w])
        y_list.append([out.delta_h, out.w])
        k += 1
    if not s_list:
        raise InvalidArgumentError("layer produced no samples")
    state = replace(state, s=cfg.length)
    trace = geometry.LayerTrace(
        layer_index=state.layer_index, t_s=cfg.t_s,
        direction=layer_direction(state.layer_index),
        s=np.array(s_list), u=np.array(u_list), y=np.array(y_list))
    state = replace(state, profile=geometry.accumulate_layer(state.profile, trace))
    return state, trace


def interlayer_wait(state: PlantState, cfg: PlantConfig, wait_s: float) -> PlantState:
    """Cool with no heat input for wait_s seconds, then rewind for the next layer.

    Cooling uses the just-deposited layer's coefficient; integration is
    explicit Euler at t_s with a final fractional step.
    """
    if wait_s < 0:
        raise InvalidArgumentError("wait_s must be >= 0")
    k_cool = cfg.k_cool(state.layer_index)
    temp = state.temperature
    remaining = wait_s
    while remaining > 0:
        dt = min(cfg.t_s, remaining)
        temp += dt * (-k_cool * (temp - cfg.t_env))
        remaining -= dt
    return replace(state, temperature=float(temp), s=0.0, t_layer=0.0,
                   layer_index=state.layer_index + 1, pending=())


# -- dataset coverage -----------------------------------------------------------

@dataclass(frozen=True)
class CoverageSpec:
    """Input-space coverage for data collection: one thin-wall build per wire
    feed level; within each layer the torch speed is piecewise constant over
    equal-distance bands."""
    builds: tuple  # of (v_w, layer_schedules) where layer_schedules is a
                   # tuple of per-layer speed tuples

    def validate(self, vt_bounds=(2.0, 15.0), vw_bounds=(21.2, 105.8)) -> None:
        if not self.builds:
            raise InvalidArgumentError("coverage spec lists no builds")
        for v_w, layers in self.builds:
            if not (vw_bounds[0] <= v_w <= vw_bounds[1]):
                raise InvalidArgumentError(f"wire feed {v_w} outside {vw_bounds}")
            if not layers:
                raise InvalidArgumentError("build with no layer schedules")
            for speeds in layers:
                if not speeds:
                    raise InvalidArgumentError("empty torch speed schedule")
                for v_t in speeds:
                    if not (vt_bounds[0] <= v_t <= vt_bounds[1]):
                        raise InvalidArgumentError(f"torch speed {v_t} outside {vt_bounds}")


def default_coverage(n_feeds: int = 21, feed_min: float = 21.2, feed_max: float = 105.8,
                     layers_per_build: int = 6, speed_min: float = 2.0,
                     speed_max: float = 15.0, segments_per_layer: int = 5,
                     seed: int = 0) -> CoverageSpec:
    """Evenly spaced wire feed levels; per build, a seeded shuffle of an even
    torch-speed sweep chunked into per-layer segment schedules."""
    rng = np.random.default_rng(seed)
    feeds = np.linspace(feed_min, feed_max, n_feeds)
    builds = []
    n_speeds = layers_per_build * segments_per_layer
    for v_w in feeds:
        sweep = np.linspace(speed_min, speed_max, n_speeds)
        rng.shuffle(sweep)
        layers = tuple(tuple(float(v) for v in sweep[i * segments_per_layer:(i + 1) * segments_per_layer])
                       for i in range(layers_per_build))
        builds.append((float(v_w), layers))
    return CoverageSpec(builds=tuple(builds))


def _schedule_input(v_w: float, speeds, length: float):
    band = length / len(speeds)

    def source(k, state):
        idx = min(int(state.s / band), len(speeds) - 1)
        return ProcessInput(v_t=speeds[idx], v_w=v_w)
    return source


def generate_build(cfg: PlantConfig, v_w: float, layer_schedules,
                   rng: np.random.Generator, wait_s: float = 45.0):
    """Deposit one data-collection wall; returns its layer traces."""
    state = initial_state(cfg)
    traces = []
    for i, speeds in enumerate(layer_schedules):
        state, trace = run_layer(state, cfg, _schedule_input(v_w, speeds, cfg.length), rng)
        traces.append(trace)
        if i + 1 < len(layer_schedules):
            state = interlayer_wait(state, cfg, wait_s)
    return traces


def generate_dataset(cfg: PlantConfig, coverage: CoverageSpec,
                     vt_bounds=(2.0, 15.0), vw_bounds=(21.2, 105.8)):
    """All builds of a coverage spec, each from a fresh wall with its own
    seeded noise stream; returns a list of per-build trace lists."""
    coverage.validate(vt_bounds, vw_bounds)
    out = []
    for idx, (v_w, layers) in enumerate(coverage.builds):
        rng = np.random.default_rng(cfg.seed + 7919 * idx)
        out.append(generate_build(cfg, v_w, layers, rng))
    return out
