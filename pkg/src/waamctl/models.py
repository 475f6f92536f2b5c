"""Sequence models of the deposition dynamics.

Four trainable architectures (simple RNN, LSTM, GRU, NN-NARX) plus a static
log-log power-law baseline. All trainable models map a 2-channel input
(torch speed, wire feed rate) to a 2-channel output (height increment,
bead width) and run on z-scored channels internally.

Time convention, fixed once for every architecture: a step consumes
(state_k, u_k), produces state_{k+1}, and emits the output of the *updated*
state. The emission after consuming u_k is the model's prediction of the
measurement taken at sample k, which is exactly the one-step-ahead quantity
the controller linearizes.

The NARX model keeps a ring buffer of its own past predictions and the past
inputs; its regressor is [y_{k-1}..y_{k-n}, u_k..u_{k-n+1}], so the current
input is part of the regressor and is the differentiation target for the
controller Jacobian.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (DataFormatError, DegenerateModelError, InvalidArgumentError,
                     NumericFaultError)

IN_DIM = 2
OUT_DIM = 2
NARX_HIDDEN = 32
TRAINABLE_ARCHS = ("rnn", "lstm", "gru", "narx")
MODEL_FORMAT_VERSION = 1


def _sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


@dataclass(frozen=True)
class NormStats:
    """Per-channel z-score statistics, computed once over a training split."""
    u_mean: np.ndarray
    u_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    @classmethod
    def identity(cls) -> "NormStats":
        return cls(np.zeros(IN_DIM), np.ones(IN_DIM), np.zeros(OUT_DIM), np.ones(OUT_DIM))

    @classmethod
    def from_data(cls, u: np.ndarray, y: np.ndarray) -> "NormStats":
        u = np.asarray(u, dtype=float).reshape(-1, IN_DIM)
        y = np.asarray(y, dtype=float).reshape(-1, OUT_DIM)
        u_std = u.std(axis=0)
        y_std = y.std(axis=0)
        if np.any(u_std <= 0) or np.any(y_std <= 0):
            raise InvalidArgumentError("constant channel: cannot z-score")
        return cls(u.mean(axis=0), u_std, y.mean(axis=0), y_std)

    def normalize_u(self, u):
        return (np.asarray(u, dtype=float) - self.u_mean) / self.u_std

    def normalize_y(self, y):
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_std

    def denormalize_y(self, y_n):
        return np.asarray(y_n, dtype=float) * self.y_std + self.y_mean


def _arch_shapes(arch: str, n: int) -> dict[str, tuple]:
    """Canonical (ordered) weight shapes; order fixes the init draw sequence."""
    if arch == "rnn":
        return {"w_ih": (n, IN_DIM), "w_hh": (n, n), "b_h": (n,),
                "w_out": (OUT_DIM, n), "b_out": (OUT_DIM,)}
    if arch == "lstm":
        shapes = {}
        for gate in ("i", "f", "g", "o"):
            shapes[f"w_i{gate}"] = (n, IN_DIM)
            shapes[f"w_h{gate}"] = (n, n)
            shapes[f"b_{gate}"] = (n,)
        shapes["w_out"] = (OUT_DIM, n)
        shapes["b_out"] = (OUT_DIM,)
        return shapes
    if arch == "gru":
        shapes = {}
        for gate in ("z", "r", "h"):
            shapes[f"w_i{gate}"] = (n, IN_DIM)
            shapes[f"w_h{gate}"] = (n, n)
            shapes[f"b_{gate}"] = (n,)
        shapes["w_out"] = (OUT_DIM, n)
        shapes["b_out"] = (OUT_DIM,)
        return shapes
    if arch == "narx":
        reg = n * (IN_DIM + OUT_DIM)
        return {"w_1": (NARX_HIDDEN, reg), "b_1": (NARX_HIDDEN,),
                "w_2": (NARX_HIDDEN, NARX_HIDDEN), "b_2": (NARX_HIDDEN,),
                "w_3": (OUT_DIM, NARX_HIDDEN), "b_3": (OUT_DIM,)}
    raise InvalidArgumentError(f"unsupported architecture {arch!r}")


@dataclass
class ModelParams:
    arch: str
    n: int
    weights: dict[str, np.ndarray]
    norm: NormStats = field(default_factory=NormStats.identity)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, self.n,
                           {k: v.copy() for k, v in self.weights.items()}, self.norm)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.weights.values())


def model_init(arch: str, n: int, seed: int) -> ModelParams:
    """Fresh parameters: matrices uniform in +-1/sqrt(fan_in), biases zero."""
    if arch not in TRAINABLE_ARCHS:
        raise InvalidArgumentError(f"unsupported architecture {arch!r}")
    if n < 1:
        raise InvalidArgumentError("hidden size / history length must be >= 1")
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in _arch_shapes(arch, n).items():
        if len(shape) == 1:
            weights[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[1])
            weights[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(arch=arch, n=n, weights=weights)


# -- model state --------------------------------------------------------------

@dataclass
class ModelState:
    """Per-loop model state. rnn/gru: x; lstm: x and c; narx: ring buffers
    (most recent entry first) of past predictions and past inputs."""
    x: np.ndarray | None = None
    c: np.ndarray | None = None
    y_hist: np.ndarray | None = None
    u_hist: np.ndarray | None = None

    def copy(self) -> "ModelState":
        cp = lambda a: None if a is None else a.copy()
        return ModelState(cp(self.x), cp(self.c), cp(self.y_hist), cp(self.u_hist))


def zero_state(p: ModelParams) -> ModelState:
    if p.arch in ("rnn", "gru"):
        return ModelState(x=np.zeros(p.n))
    if p.arch == "lstm":
        return ModelState(x=np.zeros(p.n), c=np.zeros(p.n))
    if p.arch == "narx":
        return ModelState(y_hist=np.zeros((p.n, OUT_DIM)), u_hist=np.zeros((p.n, IN_DIM)))
    raise InvalidArgumentError(f"no state for architecture {p.arch!r}")


def _zero_state_batch(p: ModelParams, b: int) -> dict[str, np.ndarray]:
    if p.arch in ("rnn", "gru"):
        return {"x": np.zeros((b, p.n))}
    if p.arch == "lstm":
        return {"x": np.zeros((b, p.n)), "c": np.zeros((b, p.n))}
    if p.arch == "narx":
        return {"yb": np.zeros((b, p.n, OUT_DIM)), "ub": np.zeros((b, p.n, IN_DIM))}
    raise InvalidArgumentError(f"no state for architecture {p.arch!r}")


def _state_to_batch(p: ModelParams, st: ModelState) -> dict[str, np.ndarray]:
    if p.arch in ("rnn", "gru"):
        return {"x": st.x[None, :].copy()}
    if p.arch == "lstm":
        return {"x": st.x[None, :].copy(), "c": st.c[None, :].copy()}
    return {"yb": st.y_hist[None].copy(), "ub": st.u_hist[None].copy()}


def _batch_to_state(p: ModelParams, sa: dict[str, np.ndarray]) -> ModelState:
    if p.arch in ("rnn", "gru"):
        return ModelState(x=sa["x"][0].copy())
    if p.arch == "lstm":
        return ModelState(x=sa["x"][0].copy(), c=sa["c"][0].copy())
    return ModelState(y_hist=sa["yb"][0].copy(), u_hist=sa["ub"][0].copy())


# -- batched step kernels (shared by single-step API, rollout, and training) --

def _step_batch(p: ModelParams, sa: dict, u: np.ndarray, want_cache: bool = False):
    w = p.weights
    if p.arch == "rnn":
        z = u @ w["w_ih"].T + sa["x"] @ w["w_hh"].T + w["b_h"]
        x1 = np.tanh(z)
        y = x1 @ w["w_out"].T + w["b_out"]
        cache = (u, sa["x"], x1) if want_cache else None
        return {"x": x1}, y, cache

    if p.arch == "lstm":
        x0, c0 = sa["x"], sa["c"]
        gi = _sigmoid(u @ w["w_ii"].T + x0 @ w["w_hi"].T + w["b_i"])
        gf = _sigmoid(u @ w["w_if"].T + x0 @ w["w_hf"].T + w["b_f"])
        gg = np.tanh(u @ w["w_ig"].T + x0 @ w["w_hg"].T + w["b_g"])
        go = _sigmoid(u @ w["w_io"].T + x0 @ w["w_ho"].T + w["b_o"])
        c1 = gf * c0 + gi * gg
        tc = np.tanh(c1)
        x1 = go * tc
        y = x1 @ w["w_out"].T + w["b_out"]
        cache = (u, x0, c0, gi, gf, gg, go, tc, x1) if want_cache else None
        return {"x": x1, "c": c1}, y, cache

    if p.arch == "gru":
        x0 = sa["x"]
        gz = _sigmoid(u @ w["w_iz"].T + x0 @ w["w_hz"].T + w["b_z"])
        gr = _sigmoid(u @ w["w_ir"].T + x0 @ w["w_hr"].T + w["b_r"])
        rx = gr * x0
        gh = np.tanh(u @ w["w_ih"].T + rx @ w["w_hh"].T + w["b_h"])
        x1 = (1.0 - gz) * x0 + gz * gh
        y = x1 @ w["w_out"].T + w["b_out"]
        cache = (u, x0, gz, gr, gh, rx, x1) if want_cache else None
        return {"x": x1}, y, cache

    if p.arch == "narx":
        b = u.shape[0]
        ub1 = np.concatenate([u[:, None, :], sa["ub"][:, :-1]], axis=1)
        reg = np.concatenate([sa["yb"].reshape(b, -1), ub1.reshape(b, -1)], axis=1)
        h1 = np.tanh(reg @ w["w_1"].T + w["b_1"])
        h2 = np.tanh(h1 @ w["w_2"].T + w["b_2"])
        y = h2 @ w["w_3"].T + w["b_3"]
        yb1 = np.concatenate([y[:, None, :], sa["yb"][:, :-1]], axis=1)
        cache = (reg, h1, h2) if want_cache else None
        return {"yb": yb1, "ub": ub1}, y, cache

    raise InvalidArgumentError(f"unsupported architecture {p.arch!r}")


def model_step(p: ModelParams, st: ModelState, u_normalized):
    """One step in normalized units: (state_k, u_k) -> (state_{k+1}, y-hat)."""
    u = np.asarray(u_normalized, dtype=float)
    if not np.all(np.isfinite(u)):
        raise InvalidArgumentError("non-finite model input")
    sa = _state_to_batch(p, st)
    for arr in sa.values():
        if not np.all(np.isfinite(arr)):
            raise NumericFaultError("non-finite model state")
    sa1, y, _ = _step_batch(p, sa, u[None, :])
    return _batch_to_state(p, sa1), y[0]


def forward_batch(p: ModelParams, u_norm: np.ndarray, state: dict | None = None,
                  want_cache: bool = False):
    """Roll a (B, T, 2) normalized input batch; returns (B, T, 2) outputs,
    the per-step caches (when requested) and the final state arrays."""
    b, t = u_norm.shape[0], u_norm.shape[1]
    sa = _zero_state_batch(p, b) if state is None else state
    out = np.empty((b, t, OUT_DIM))
    caches = [] if want_cache else None
    for k in range(t):
        sa, y, cache = _step_batch(p, sa, u_norm[:, k], want_cache)
        out[:, k] = y
        if want_cache:
            caches.append(cache)
    return out, caches, sa


def rollout(p: ModelParams, inputs, x0: ModelState | None = None) -> np.ndarray:
    """Denormalized free-run prediction for a (T, 2) raw input sequence."""
    u = np.asarray(inputs, dtype=float).reshape(-1, IN_DIM)
    if u.shape[0] == 0:
        return np.zeros((0, OUT_DIM))
    if not np.all(np.isfinite(u)):
        raise InvalidArgumentError("non-finite inputs")
    if p.arch == "loglog":
        return loglog_predict(p, u)
    u_n = p.norm.normalize_u(u)
    state = None if x0 is None else _state_to_batch(p, x0)
    y_n, _, _ = forward_batch(p, u_n[None], state=state)
    return p.norm.denormalize_y(y_n[0])


# -- analytic derivatives ------------------------------------------------------

def input_jacobian(p: ModelParams, st: ModelState, u) -> np.ndarray:
    """d(emitted output)/d(input) at (state, u), in denormalized units
    (mm per mm/s), state held fixed."""
    if p.arch == "loglog":
        raise InvalidArgumentError("the static power-law model has its own inversion path")
    u_n = p.norm.normalize_u(np.asarray(u, dtype=float))
    w = p.weights
    if p.arch == "rnn":
        z = w["w_ih"] @ u_n + w["w_hh"] @ st.x + w["b_h"]
        d = 1.0 - np.tanh(z) ** 2
        j_n = w["w_out"] @ (d[:, None] * w["w_ih"])
    elif p.arch == "lstm":
        x0, c0 = st.x, st.c
        gi = _sigmoid(w["w_ii"] @ u_n + w["w_hi"] @ x0 + w["b_i"])
        gf = _sigmoid(w["w_if"] @ u_n + w["w_hf"] @ x0 + w["b_f"])
        gg = np.tanh(w["w_ig"] @ u_n + w["w_hg"] @ x0 + w["b_g"])
        go = _sigmoid(w["w_io"] @ u_n + w["w_ho"] @ x0 + w["b_o"])
        c1 = gf * c0 + gi * gg
        tc = np.tanh(c1)
        dc1 = (c0 * gf * (1 - gf))[:, None] * w["w_if"] \
            + (gg * gi * (1 - gi))[:, None] * w["w_ii"] \
            + (gi * (1 - gg ** 2))[:, None] * w["w_ig"]
        dx1 = (tc * go * (1 - go))[:, None] * w["w_io"] \
            + (go * (1 - tc ** 2))[:, None] * dc1
        j_n = w["w_out"] @ dx1
    elif p.arch == "gru":
        x0 = st.x
        gz = _sigmoid(w["w_iz"] @ u_n + w["w_hz"] @ x0 + w["b_z"])
        gr = _sigmoid(w["w_ir"] @ u_n + w["w_hr"] @ x0 + w["b_r"])
        gh = np.tanh(w["w_ih"] @ u_n + w["w_hh"] @ (gr * x0) + w["b_h"])
        dgz = (gz * (1 - gz))[:, None] * w["w_iz"]
        dgr = (gr * (1 - gr))[:, None] * w["w_ir"]
        dgh = (1 - gh ** 2)[:, None] * (w["w_ih"] + w["w_hh"] @ (x0[:, None] * dgr))
        dx1 = (gh - x0)[:, None] * dgz + gz[:, None] * dgh
        j_n = w["w_out"] @ dx1
    elif p.arch == "narx":
        reg = np.concatenate([st.y_hist.ravel(),
                              np.concatenate([u_n[None], st.u_hist[:-1]]).ravel()])
        h1 = np.tanh(w["w_1"] @ reg + w["b_1"])
        h2 = np.tanh(w["w_2"] @ h1 + w["b_2"])
        slot = OUT_DIM * p.n  # regressor columns holding the current input
        w1_u = w["w_1"][:, slot:slot + IN_DIM]
        j_n = w["w_3"] @ ((1 - h2 ** 2)[:, None] * (w["w_2"] @ ((1 - h1 ** 2)[:, None] * w1_u)))
    else:
        raise InvalidArgumentError(f"unsupported architecture {p.arch!r}")
    if not np.all(np.isfinite(j_n)):
        raise NumericFaultError("non-finite Jacobian")
    return p.norm.y_std[:, None] * j_n / p.norm.u_std[None, :]


def state_matrix(p: ModelParams, st: ModelState, u) -> np.ndarray:
    """Jacobian of the state update with respect to the state, normalized
    coordinates. For the LSTM the state is the stacked (x, c), so the matrix
    is 2n x 2n."""
    if p.arch in ("narx", "loglog"):
        raise InvalidArgumentError(f"no state Jacobian for architecture {p.arch!r}")
    u_n = p.norm.normalize_u(np.asarray(u, dtype=float))
    w = p.weights
    if p.arch == "rnn":
        z = w["w_ih"] @ u_n + w["w_hh"] @ st.x + w["b_h"]
        return (1.0 - np.tanh(z) ** 2)[:, None] * w["w_hh"]
    if p.arch == "gru":
        x0 = st.x
        gz = _sigmoid(w["w_iz"] @ u_n + w["w_hz"] @ x0 + w["b_z"])
        gr = _sigmoid(w["w_ir"] @ u_n + w["w_hr"] @ x0 + w["b_r"])
        gh = np.tanh(w["w_ih"] @ u_n + w["w_hh"] @ (gr * x0) + w["b_h"])
        dgz = (gz * (1 - gz))[:, None] * w["w_hz"]
        dgr = (gr * (1 - gr))[:, None] * w["w_hr"]
        drx = np.diag(gr) + x0[:, None] * dgr
        dgh = (1 - gh ** 2)[:, None] * (w["w_hh"] @ drx)
        return np.diag(1.0 - gz) + (gh - x0)[:, None] * dgz + gz[:, None] * dgh
    # lstm: blocks over (x, c)
    x0, c0 = st.x, st.c
    gi = _sigmoid(w["w_ii"] @ u_n + w["w_hi"] @ x0 + w["b_i"])
    gf = _sigmoid(w["w_if"] @ u_n + w["w_hf"] @ x0 + w["b_f"])
    gg = np.tanh(w["w_ig"] @ u_n + w["w_hg"] @ x0 + w["b_g"])
    go = _sigmoid(w["w_io"] @ u_n + w["w_ho"] @ x0 + w["b_o"])
    c1 = gf * c0 + gi * gg
    tc = np.tanh(c1)
    dc1_dx = (c0 * gf * (1 - gf))[:, None] * w["w_hf"] \
        + (gg * gi * (1 - gi))[:, None] * w["w_hi"] \
        + (gi * (1 - gg ** 2))[:, None] * w["w_hg"]
    dx1_dx = (tc * go * (1 - go))[:, None] * w["w_ho"] + (go * (1 - tc ** 2))[:, None] * dc1_dx
    dx1_dc = np.diag(go * (1 - tc ** 2) * gf)
    dc1_dc = np.diag(gf)
    return np.block([[dx1_dx, dx1_dc], [dc1_dx, dc1_dc]])


# -- static log-log baseline ---------------------------------------------------

def loglog_fit(u, y) -> ModelParams:
    """Least-squares power-law fit ln(dh) and ln(w) against (ln v_t, ln v_w, 1).

    Returns a ModelParams with arch 'loglog' carrying the two coefficient
    triples (exponent on v_t, exponent on v_w, log offset).
    """
    u = np.asarray(u, dtype=float).reshape(-1, IN_DIM)
    y = np.asarray(y, dtype=float).reshape(-1, OUT_DIM)
    if u.shape[0] != y.shape[0]:
        raise InvalidArgumentError("input/output sample count mismatch")
    if u.shape[0] < 3:
        raise InvalidArgumentError("need at least 3 samples")
    if np.any(u <= 0) or np.any(y <= 0):
        raise InvalidArgumentError("power-law fit requires strictly positive data")
    design = np.column_stack([np.log(u[:, 0]), np.log(u[:, 1]), np.ones(u.shape[0])])
    if np.linalg.matrix_rank(design) < 3:
        raise DegenerateModelError("log-space design is rank-deficient")
    coeffs, *_ = np.linalg.lstsq(design, np.log(y), rcond=None)
    return ModelParams(arch="loglog", n=0,
                       weights={"alpha": coeffs[:, 0].copy(), "beta": coeffs[:, 1].copy()})


def loglog_predict(p: ModelParams, u) -> np.ndarray:
    a, b = p.weights["alpha"], p.weights["beta"]
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    uu = u.reshape(-1, IN_DIM)
    if np.any(uu <= 0):
        raise InvalidArgumentError("power-law model requires positive inputs")
    lvt, lvw = np.log(uu[:, 0]), np.log(uu[:, 1])
    out = np.column_stack([np.exp(a[0] * lvt + a[1] * lvw + a[2]),
                           np.exp(b[0] * lvt + b[1] * lvw + b[2])])
    return out[0] if single else out


def loglog_invert(p: ModelParams, y_star, u_min=None, u_max=None) -> np.ndarray:
    """Solve the 2x2 log-linear system for the input hitting y_star, then clamp."""
    a, b = p.weights["alpha"], p.weights["beta"]
    y_star = np.asarray(y_star, dtype=float)
    if np.any(y_star <= 0):
        raise InvalidArgumentError("targets must be strictly positive")
    m = np.array([[a[0], a[1]], [b[0], b[1]]])
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    if abs(det) < 1e-12 * max(1.0, float(np.abs(m).max()) ** 2):
        raise DegenerateModelError("exponent matrix is singular; cannot invert")
    rhs = np.array([np.log(y_star[0]) - a[2], np.log(y_star[1]) - b[2]])
    log_u = np.linalg.solve(m, rhs)
    u = np.exp(log_u)
    if u_min is not None:
        u = np.maximum(u, u_min)
    if u_max is not None:
        u = np.minimum(u, u_max)
    return u


# -- persistence and timing ----------------------------------------------------

def save_model(p: ModelParams, path) -> None:
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "arch": p.arch,
        "n": p.n,
        "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                    for k, v in p.weights.items()},
        "norm": {k: getattr(p.norm, k).tolist()
                 for k in ("u_mean", "u_std", "y_mean", "y_std")},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path) -> ModelParams:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported model format {doc.get('format_version')}")
    weights = {k: np.array(v["data"], dtype=float).reshape(v["shape"])
               for k, v in doc["weights"].items()}
    norm = NormStats(*(np.array(doc["norm"][k], dtype=float)
                       for k in ("u_mean", "u_std", "y_mean", "y_std")))
    return ModelParams(arch=doc["arch"], n=int(doc["n"]), weights=weights, norm=norm)


def measure_step_latency(p: ModelParams, n_calls: int = 10_000) -> float:
    """Mean wall-clock seconds per single model step, after warmup."""
    st = zero_state(p)
    u = np.zeros(IN_DIM)
    for _ in range(100):
        st_w, _ = model_step(p, st, u)
    start = time.perf_counter()
    cur = st
    for _ in range(n_calls):
        cur, _ = model_step(p, cur, u)
    return (time.perf_counter() - start) / n_calls
