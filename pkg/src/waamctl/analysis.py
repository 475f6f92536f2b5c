"""Quality metrics and model-characterization diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import geometry, models
from .errors import InvalidArgumentError

REPORT_CSV_HEADER = ["mode", "height_sd", "width_sd", "height_sd_ex", "width_sd_ex"]


def layer_sd(trace: geometry.LayerTrace, length: float, margin: float = 5.0,
             exclude_edges: bool = False):
    """Population SD of the layer's height increments and widths, optionally
    ignoring samples within `margin` of the arc on/off points."""
    if exclude_edges:
        keep = ~geometry.edge_mask(trace.s, length, margin)
    else:
        keep = np.ones(trace.n_samples, dtype=bool)
    if not np.any(keep):
        raise InvalidArgumentError("no samples left after edge masking")
    y = trace.y[keep]
    return float(y[:, 0].std()), float(y[:, 1].std())


@dataclass
class BuildReport:
    """Per-layer and build-average smoothness figures for one build."""
    mode: str
    layers: list            # rows (layer, h_sd, w_sd, h_sd_ex, w_sd_ex)
    height_sd: float
    width_sd: float
    height_sd_ex: float
    width_sd_ex: float


def build_report(record, margin: float = 5.0) -> BuildReport:
    if not record.layers:
        raise InvalidArgumentError("build has no completed layers")
    rows = []
    for rec in record.layers:
        h_sd, w_sd = layer_sd(rec.trace, record.length, margin, exclude_edges=False)
        h_ex, w_ex = layer_sd(rec.trace, record.length, margin, exclude_edges=True)
        rows.append((rec.trace.layer_index, h_sd, w_sd, h_ex, w_ex))
    arr = np.array([r[1:] for r in rows])
    means = arr.mean(axis=0)
    return BuildReport(mode=record.mode, layers=rows, height_sd=float(means[0]),
                       width_sd=float(means[1]), height_sd_ex=float(means[2]),
                       width_sd_ex=float(means[3]))


def write_report_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_CSV_HEADER)
        for rep in reports:
            writer.writerow([rep.mode, repr(rep.height_sd), repr(rep.width_sd),
                             repr(rep.height_sd_ex), repr(rep.width_sd_ex)])


def write_layer_csv(reports, path) -> None:
    """Long-format per-layer SDs for plotting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "layer", "height_sd", "width_sd",
                         "height_sd_ex", "width_sd_ex"])
        for rep in reports:
            for layer, h_sd, w_sd, h_ex, w_ex in rep.layers:
                writer.writerow([rep.mode, layer, repr(h_sd), repr(w_sd),
                                 repr(h_ex), repr(w_ex)])


# -- spectral diagnostics --------------------------------------------------------

def spectral_radius(a: np.ndarray, tol: float = 1e-12, max_iter: int = 20_000,
                    block: int = 4, seed: int = 0) -> float:
    """Largest eigenvalue magnitude by subspace (block power) iteration.

    A block of 4 orthonormal vectors tracks the dominant invariant subspace,
    which keeps complex-conjugate dominant pairs convergent; the radius is
    read off the small projected matrix.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n):
        raise InvalidArgumentError("square matrix required")
    if n == 0:
        return 0.0
    p = min(block, n)
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((n, p)))
    rho = 0.0
    for _ in range(max_iter):
        z = a @ q
        norms = np.linalg.norm(z, axis=0)
        if norms.max() < 1e-300:
            return 0.0
        q_new, _ = np.linalg.qr(z)
        proj = q_new.T @ a @ q_new
        rho_new = float(np.max(np.abs(np.linalg.eigvals(proj))))
        if abs(rho_new - rho) <= tol * max(1.0, rho_new):
            return rho_new
        rho = rho_new
        q = q_new
    return rho


def spectral_radius_trace(p: models.ModelParams, states, inputs) -> list[float]:
    """rho of the linearized state update along a (state, input) trajectory."""
    return [spectral_radius(models.state_matrix(p, st, u))
            for st, u in zip(states, inputs)]


def model_states_along(p: models.ModelParams, inputs) -> list[models.ModelState]:
    """States visited while consuming a raw input sequence from zero state.

    Entry k is the state *before* consuming input k, matching the
    linearization point used by the controller."""
    st = models.zero_state(p)
    out = []
    for u in np.asarray(inputs, dtype=float).reshape(-1, models.IN_DIM):
        out.append(st)
        st, _ = models.model_step(p, st, p.norm.normalize_u(u))
    return out


def state_norm_trace(record) -> list[np.ndarray]:
    """Recorded per-layer model state norms of a closed-loop build."""
    return [rec.x_norm.copy() for rec in record.layers]


def steady_state_check(p: models.ModelParams, u_star, horizon: int = 600,
                       tol: float = 1e-3):
    """Constant-input rollout: (final output, converged flag, settle step).

    Converged means every step-to-step output change in the final 10% of the
    horizon is below tol; settle step is the first index after which all
    changes stay below tol."""
    if horizon < 100:
        raise InvalidArgumentError("horizon must be >= 100 steps")
    u_seq = np.tile(np.asarray(u_star, dtype=float), (horizon, 1))
    y = models.rollout(p, u_seq)
    diffs = np.linalg.norm(np.diff(y, axis=0), axis=1)
    tail = diffs[int(np.floor(0.9 * horizon)) - 1:]
    converged = bool(np.all(tail < tol))
    above = np.nonzero(diffs >= tol)[0]
    settle_step = int(above[-1] + 2) if above.size else 1
    return y[-1], converged, settle_step
