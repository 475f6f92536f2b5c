"""Target generation and constrained one-step-ahead predictive control.

Each control step linearizes the model's one-step prediction around the
previous input and solves the 2-variable box-constrained weighted least
squares

    min  || W (J du + ybar - y*) ||^2  +  du' Lam du
    s.t. du within the rate box intersected with the shifted input box

exactly, by enumerating the 3^2 per-coordinate activity patterns (each
candidate solved in closed form). The applied input is u = u_prev + alpha*du.
Within a layer the model state is driven open loop by the applied inputs;
measurements enter between layers, through the accumulated height profile
and (in the adaptive mode) through fine-tuning on the previous layer.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass

import numpy as np

from . import geometry, models, plant, training
from .configfile import load_dataclass, snapshot
from .errors import DataFormatError, InvalidArgumentError, NumericFaultError

CONTROL_SCHEMA_VERSION = 1
MODES = ("baseline-constant", "loglog-inverse", "rnn-onestep", "rnn-adaptive")


@dataclass(frozen=True)
class ControllerConfig:
    target_dh: float = 1.8          # mm per layer
    target_w: float = 5.2           # mm bead width
    weight_dh: float = 1.0          # output weight, height channel
    weight_w: float = 0.35          # output weight, width channel (height-leaning)
    lam_vt: float = 0.01            # increment regularization, torch speed
    lam_vw: float = 0.1             # increment regularization, wire feed
    du_max_vt: float = 2.0          # mm/s per step
    du_max_vw: float = 4.23         # mm/s per step
    vt_min: float = 2.0
    vt_max: float = 15.0
    vw_min: float = 21.2
    vw_max: float = 105.8
    alpha: float = 0.3              # applied step size on du
    nominal_vt: float = 7.5         # layer-start warm start / baseline input
    nominal_vw: float = 63.5
    interlayer_wait_s: float = 45.0
    edge_margin: float = 5.0        # mm excluded at arc on/off in reports
    v_w_quantum: float = 0.0        # optional wire-feed command quantizer; 0 = off
    loglog_dh_floor: float = 0.05   # mm, inversion floor for non-positive targets

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise InvalidArgumentError("alpha must lie in (0, 1]")
        if self.vt_min >= self.vt_max or self.vw_min >= self.vw_max:
            raise InvalidArgumentError("input bounds must satisfy min < max")
        if min(self.weight_dh, self.weight_w, self.lam_vt, self.lam_vw) < 0:
            raise InvalidArgumentError("weights and regularization must be >= 0")

    @property
    def y_star(self):
        return np.array([self.target_dh, self.target_w])

    @property
    def w_diag(self):
        return np.array([self.weight_dh, self.weight_w])

    @property
    def lam_diag(self):
        return np.array([self.lam_vt, self.lam_vw])

    @property
    def du_max(self):
        return np.array([self.du_max_vt, self.du_max_vw])

    @property
    def u_min(self):
        return np.array([self.vt_min, self.vw_min])

    @property
    def u_max(self):
        return np.array([self.vt_max, self.vw_max])

    @property
    def u_nominal(self):
        return np.array([self.nominal_vt, self.nominal_vw])

    @classmethod
    def from_file(cls, path) -> "ControllerConfig":
        return load_dataclass(cls, path, CONTROL_SCHEMA_VERSION)


@dataclass(frozen=True)
class TargetProfile:
    """Uniformly sliced wall: target height of layer i is i * dh_star."""
    dh_star: float
    w_star: float

    def height(self, layer_index: int, s: float) -> float:
        return layer_index * self.dh_star


def compute_target(layer_index: int, s: float, target: TargetProfile,
                   prev_profile: geometry.HeightProfile, w_star: float) -> np.ndarray:
    """Per-step output target: remaining height to the slice plane at s, and w*.

    prev_profile must already be aligned with the current layer's traversal
    frame (mirror it for reverse layers)."""
    deficit = target.height(layer_index, s) - geometry.interpolate_height(prev_profile, s)
    return np.array([deficit, w_star])


# -- box-constrained weighted least squares (2 variables) ----------------------

_PATTERNS = tuple(itertools.product((-1, 0, 1), repeat=2))


def solve_one_step_qp(jac, resid, w_diag, lam_diag, lo, hi):
    """Exact minimizer of ||W(J du + resid)||^2 + du' Lam du over [lo, hi].

    Enumerates per-coordinate activity patterns (-1 lower, 0 free, +1 upper),
    solves each candidate in closed form, and returns the feasible candidate
    with the lowest objective. Ties break on smaller ||du||, then pattern
    order. Returns (du, info) with the KKT-relevant pieces in info.
    """
    jac = np.asarray(jac, dtype=float)
    resid = np.asarray(resid, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi + 1e-12):
        raise InvalidArgumentError("empty constraint box")
    w2 = np.asarray(w_diag, dtype=float) ** 2
    q = jac.T @ (w2[:, None] * jac) + np.diag(np.asarray(lam_diag, dtype=float))
    c = jac.T @ (w2 * resid)

    scale = max(float(np.abs(q).max()), 1e-30)
    det = q[0, 0] * q[1, 1] - q[0, 1] * q[1, 0]
    if abs(det) < 1e-14 * scale ** 2:
        # W J rank-deficient with Lam = 0: no unique minimizer; hold the input.
        return np.zeros(2), {"q": q, "c": c, "singular": True, "pattern": (0, 0),
                             "objective": 0.0}

    span = float(np.max(hi - lo))
    feas_tol = 1e-9 * max(1.0, span)
    best = None
    for idx, pattern in enumerate(_PATTERNS):
        du = np.empty(2)
        free = []
        for i, p_i in enumerate(pattern):
            if p_i == -1:
                du[i] = lo[i]
            elif p_i == 1:
                du[i] = hi[i]
            else:
                free.append(i)
        if free:
            fixed = [i for i in range(2) if i not in free]
            rhs = -(c[free] + (q[np.ix_(free, fixed)] @ du[fixed] if fixed else 0.0))
            qff = q[np.ix_(free, free)]
            try:
                sol = np.linalg.solve(qff, np.atleast_1d(rhs))
            except np.linalg.LinAlgError:
                continue
            if np.any(sol < lo[free] - feas_tol) or np.any(sol > hi[free] + feas_tol):
                continue
            du[free] = np.clip(sol, lo[free], hi[free])
        obj = float(du @ q @ du + 2.0 * c @ du)
        key = (obj, float(du @ du), idx)
        if best is None or key < best[0]:
            best = (key, du.copy(), pattern)
    _, du, pattern = best
    return du, {"q": q, "c": c, "singular": False, "pattern": pattern,
                "objective": best[0][0]}


def kkt_residual(jac, resid, w_diag, lam_diag, lo, hi, du) -> float:
    """Largest violation of the box-QP stationarity conditions at du."""
    w2 = np.asarray(w_diag, dtype=float) ** 2
    jac = np.asarray(jac, dtype=float)
    q = jac.T @ (w2[:, None] * jac) + np.diag(np.asarray(lam_diag, dtype=float))
    c = jac.T @ (w2 * np.asarray(resid, dtype=float))
    g = 2.0 * (q @ du + c)
    span = max(float(np.max(np.asarray(hi) - np.asarray(lo))), 1.0)
    tol_active = 1e-9 * span
    worst = 0.0
    for i in range(2):
        at_lo = du[i] <= lo[i] + tol_active
        at_hi = du[i] >= hi[i] - tol_active
        if at_lo and at_hi:
            continue  # pinched box, any gradient is consistent
        if at_lo:
            worst = max(worst, -g[i])
        elif at_hi:
            worst = max(worst, g[i])
        else:
            worst = max(worst, abs(g[i]))
    return max(worst, 0.0)


def one_step_control(p: models.ModelParams, st: models.ModelState, u_prev,
                     y_star, cfg: ControllerConfig):
    """One control update: returns (du, applied input, predicted output).

    The prediction ybar and the Jacobian are evaluated at the previous input;
    the applied input is u_prev + alpha * du, re-clamped to the input box.
    """
    u_prev = np.asarray(u_prev, dtype=float)
    y_star = np.asarray(y_star, dtype=float)
    _, ybar_n = models.model_step(p, st, p.norm.normalize_u(u_prev))
    ybar = p.norm.denormalize_y(ybar_n)
    jac = models.input_jacobian(p, st, u_prev)
    lo = np.maximum(-cfg.du_max, cfg.u_min - u_prev)
    hi = np.minimum(cfg.du_max, cfg.u_max - u_prev)
    du, _ = solve_one_step_qp(jac, ybar - y_star, cfg.w_diag, cfg.lam_diag, lo, hi)
    u_k = np.clip(u_prev + cfg.alpha * du, cfg.u_min, cfg.u_max)
    if cfg.v_w_quantum > 0:
        u_k[1] = np.clip(round(u_k[1] / cfg.v_w_quantum) * cfg.v_w_quantum,
                         cfg.vw_min, cfg.vw_max)
    _, y_next_n = models.model_step(p, st, p.norm.normalize_u(u_k))
    y_hat = p.norm.denormalize_y(y_next_n)
    if not np.all(np.isfinite(y_hat)):
        raise NumericFaultError("non-finite controller prediction")
    return du, u_k, y_hat


# -- closed-loop builds ---------------------------------------------------------

@dataclass
class LayerRecord:
    trace: geometry.LayerTrace
    y_hat: np.ndarray       # (k, 2); NaN when the mode carries no model
    y_star: np.ndarray      # (k, 2)
    x_norm: np.ndarray      # (k,);  NaN when the mode carries no state
    fine_tune_loss: float   # NaN when the layer was not fine-tuned

    @property
    def vpd(self) -> np.ndarray:
        return self.trace.u[:, 1] / self.trace.u[:, 0]


@dataclass
class BuildRecord:
    mode: str
    plant_seed: int
    length: float
    t_s: float
    layers: list
    plant_config: dict
    controller_config: dict
    failure: str | None = None

    @property
    def config_hash(self) -> str:
        blob = json.dumps({"plant": self.plant_config, "controller": self.controller_config},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def traces(self) -> list[geometry.LayerTrace]:
        return [rec.trace for rec in self.layers]

    def save(self, csv_path, sidecar_path) -> None:
        geometry.write_traces(csv_path, self.traces())
        doc = {
            "format_version": 1,
            "mode": self.mode,
            "plant_seed": self.plant_seed,
            "length": self.length,
            "t_s": self.t_s,
            "config_hash": self.config_hash,
            "plant_config": self.plant_config,
            "controller_config": self.controller_config,
            "failure": self.failure,
            "layers": [{
                "layer": rec.trace.layer_index,
                "fine_tune_loss": rec.fine_tune_loss,
                "y_hat_h": rec.y_hat[:, 0].tolist(),
                "y_hat_w": rec.y_hat[:, 1].tolist(),
                "y_star_h": rec.y_star[:, 0].tolist(),
                "y_star_w": rec.y_star[:, 1].tolist(),
                "vpd": rec.vpd.tolist(),
                "x_norm": rec.x_norm.tolist(),
            } for rec in self.layers],
        }
        with open(sidecar_path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, csv_path, sidecar_path) -> "BuildRecord":
        traces = geometry.read_traces(csv_path)
        with open(sidecar_path) as fh:
            doc = json.load(fh)
        if doc.get("format_version") != 1:
            raise DataFormatError(f"{sidecar_path}: unsupported sidecar format")
        if len(traces) != len(doc["layers"]):
            raise DataFormatError("trace CSV and sidecar disagree on layer count")
        layers = []
        for trace, meta in zip(traces, doc["layers"]):
            layers.append(LayerRecord(
                trace=trace,
                y_hat=np.column_stack([meta["y_hat_h"], meta["y_hat_w"]]),
                y_star=np.column_stack([meta["y_star_h"], meta["y_star_w"]]),
                x_norm=np.array(meta["x_norm"], dtype=float),
                fine_tune_loss=float(meta["fine_tune_loss"]),
            ))
        return cls(mode=doc["mode"], plant_seed=doc["plant_seed"], length=doc["length"],
                   t_s=doc["t_s"], layers=layers, plant_config=doc["plant_config"],
                   controller_config=doc["controller_config"], failure=doc.get("failure"))


def run_control_layer(state: plant.PlantState, rng, params, prev_profile_aligned,
                      target: TargetProfile, ctrl_cfg: ControllerConfig,
                      plant_cfg: plant.PlantConfig, mode: str):
    """Deposit one layer under the given mode; returns (new state, LayerRecord).

    The model state starts at zero and is advanced open loop by the applied
    inputs; prev_profile_aligned must be indexed in this layer's traversal
    frame."""
    layer_index = state.layer_index
    y_hat_list, y_star_list, x_norm_list = [], [], []
    model_state = models.zero_state(params) if mode in ("rnn-onestep", "rnn-adaptive") else None
    u_prev = ctrl_cfg.u_nominal.copy()

    def controller(k, st):
        nonlocal model_state, u_prev
        y_star = compute_target(layer_index, st.s, target, prev_profile_aligned,
                                ctrl_cfg.target_w)
        if mode == "baseline-constant":
            u_k = ctrl_cfg.u_nominal
            y_hat = np.full(2, np.nan)
            x_norm = np.nan
        elif mode == "loglog-inverse":
            y_pos = np.maximum(y_star, [ctrl_cfg.loglog_dh_floor, ctrl_cfg.loglog_dh_floor])
            u_k = models.loglog_invert(params, y_pos, ctrl_cfg.u_min, ctrl_cfg.u_max)
            y_hat = models.loglog_predict(params, u_k)
            x_norm = np.nan
        else:
            _, u_k, y_hat = one_step_control(params, model_state, u_prev, y_star, ctrl_cfg)
            model_state, _ = models.model_step(params, model_state,
                                               params.norm.normalize_u(u_k))
            x_norm = float(np.linalg.norm(model_state.x if model_state.x is not None
                                          else model_state.y_hist))
            u_prev = u_k
        y_star_list.append(y_star)
        y_hat_list.append(np.asarray(y_hat, dtype=float))
        x_norm_list.append(x_norm)
        return plant.ProcessInput(float(u_k[0]), float(u_k[1]))

    state, trace = plant.run_layer(state, plant_cfg, controller, rng)
    record = LayerRecord(trace=trace,
                         y_hat=np.array(y_hat_list), y_star=np.array(y_star_list),
                         x_norm=np.array(x_norm_list), fine_tune_loss=np.nan)
    return state, record


def run_closed_loop(plant_cfg: plant.PlantConfig, model_params, ctrl_cfg: ControllerConfig,
                    n_layers: int, mode: str,
                    ft_cfg: training.FineTuneConfig | None = None) -> BuildRecord:
    """Simulate a full multi-layer build under one of the four control modes."""
    if mode not in MODES:
        raise InvalidArgumentError(f"unknown mode {mode!r}; expected one of {MODES}")
    if n_layers < 1:
        raise InvalidArgumentError("n_layers must be >= 1")
    if mode == "loglog-inverse" and (model_params is None or model_params.arch != "loglog"):
        raise InvalidArgumentError("loglog-inverse mode needs a fitted power-law model")
    if mode in ("rnn-onestep", "rnn-adaptive"):
        if model_params is None or model_params.arch not in models.TRAINABLE_ARCHS:
            raise InvalidArgumentError(f"mode {mode} needs a trained sequence model")
    ft_cfg = ft_cfg or training.FineTuneConfig()

    rng = np.random.default_rng(plant_cfg.seed)
    state = plant.initial_state(plant_cfg)
    target = TargetProfile(dh_star=ctrl_cfg.target_dh, w_star=ctrl_cfg.target_w)
    params = model_params.copy() if model_params is not None else None

    record = BuildRecord(mode=mode, plant_seed=plant_cfg.seed, length=plant_cfg.length,
                         t_s=plant_cfg.t_s, layers=[],
                         plant_config=snapshot(plant_cfg),
                         controller_config=snapshot(ctrl_cfg))
    prev_traces: list[geometry.LayerTrace] = []
    try:
        for layer in range(1, n_layers + 1):
            ft_loss = np.nan
            if mode == "rnn-adaptive" and prev_traces:
                # Tune on the raw traces in their natural temporal order: the
                # model is causal, so reversing a sequence to match the next
                # layer's spatial direction would teach backwards dynamics.
                tune_data = list(prev_traces[-ft_cfg.window_layers:])
                params = training.fine_tune(params, tune_data, ft_cfg)
                ft_loss = training.batch_loss(params, tune_data)
            aligned = (state.profile if plant.layer_direction(layer) == geometry.FORWARD
                       else geometry.mirror_profile(state.profile))
            state, layer_rec = run_control_layer(state, rng, params, aligned, target,
                                                 ctrl_cfg, plant_cfg, mode)
            layer_rec.fine_tune_loss = float(ft_loss)
            record.layers.append(layer_rec)
            prev_traces.append(layer_rec.trace)
            if layer < n_layers:
                state = plant.interlayer_wait(state, plant_cfg, ctrl_cfg.interlayer_wait_s)
    except (NumericFaultError, InvalidArgumentError) as exc:
        record.failure = f"layer {len(record.layers) + 1}: {exc}"
    return record
