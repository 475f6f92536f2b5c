"""Dataset handling, sequence loss/gradients, Adam, training, fine-tuning.

Gradients are computed by reverse-mode accumulation through the full
unrolled sequence (optionally truncated). Traces of different lengths are
padded into one batch; padded steps are masked out of the loss, so their
state updates contribute nothing to any gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import models
from .configfile import load_dataclass
from .errors import InvalidArgumentError, NumericFaultError, TrainingDivergedError
from .geometry import LayerTrace

TRAIN_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Dataset:
    traces: tuple
    train_idx: np.ndarray
    val_idx: np.ndarray

    @property
    def train_traces(self) -> list[LayerTrace]:
        return [self.traces[i] for i in self.train_idx]

    @property
    def val_traces(self) -> list[LayerTrace]:
        return [self.traces[i] for i in self.val_idx]


def split_dataset(traces, ratio: float = 0.8, seed: int = 0) -> Dataset:
    """Seeded random split by trace count; first ceil(ratio*N) to train."""
    traces = tuple(traces)
    n = len(traces)
    if n < 2:
        raise InvalidArgumentError("need at least 2 traces to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(np.ceil(ratio * n))
    return Dataset(traces=traces, train_idx=perm[:n_train], val_idx=perm[n_train:])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5000
    lr: float = 1e-3
    lr_end: float = 0.0     # > 0 enables geometric decay from lr to lr_end
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    bptt_trunc: int = 0     # 0 = backprop through the whole sequence
    batch_traces: int = 0   # 0 = full batch
    eval_every: int = 10

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidArgumentError("epochs must be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InvalidArgumentError("Adam betas must lie in (0, 1)")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch under the geometric schedule."""
        if self.lr_end <= 0 or self.epochs == 1:
            return self.lr
        frac = (epoch - 1) / (self.epochs - 1)
        return self.lr * (self.lr_end / self.lr) ** frac

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return load_dataclass(cls, path, TRAIN_SCHEMA_VERSION)


@dataclass(frozen=True)
class FineTuneConfig:
    lam: float = 1e-3       # drift penalty on parameters
    epochs: int = 200
    lr: float = 1e-4
    window_layers: int = 1  # how many preceding layers to tune on

    def __post_init__(self):
        if self.lam < 0 or not np.isfinite(self.lam):
            raise InvalidArgumentError("lam must be finite and >= 0")


# -- batching ------------------------------------------------------------------

def pack_traces(traces):
    """Stack traces into padded (B, T, 2) input/target arrays plus a mask."""
    traces = list(traces)
    if not traces:
        raise InvalidArgumentError("no traces to pack")
    lengths = [t.n_samples for t in traces]
    t_max = max(lengths)
    b = len(traces)
    u = np.zeros((b, t_max, models.IN_DIM))
    y = np.zeros((b, t_max, models.OUT_DIM))
    mask = np.zeros((b, t_max))
    for i, trace in enumerate(traces):
        u[i, :lengths[i]] = trace.u
        y[i, :lengths[i]] = trace.y
        mask[i, :lengths[i]] = 1.0
    return u, y, mask


def _batch_loss_grads(p, u_n, y_n, mask, trunc=0, want_grads=True):
    """Masked mean-squared error over normalized channels, with gradients."""
    n_elems = mask.sum() * models.OUT_DIM
    total_sse = 0.0
    grads = {k: np.zeros_like(v) for k, v in p.weights.items()} if want_grads else None
    t_total = u_n.shape[1]
    chunk = trunc if trunc and trunc > 0 else t_total
    state = None
    for start in range(0, t_total, chunk):
        sl = slice(start, min(start + chunk, t_total))
        y_hat, caches, state = models.forward_batch(p, u_n[:, sl], state=state,
                                                    want_cache=want_grads)
        err = (y_hat - y_n[:, sl]) * mask[:, sl, None]
        total_sse += float(np.sum(err ** 2))
        if want_grads:
            d_y = 2.0 * err / n_elems
            _accumulate_backward(p, caches, d_y, grads)
    return total_sse / n_elems, grads


def _accumulate_backward(p, caches, d_y, grads):
    w = p.weights
    b = d_y.shape[0]
    t = d_y.shape[1]
    arch = p.arch

    if arch == "rnn":
        dx_next = np.zeros((b, p.n))
        for k in range(t - 1, -1, -1):
            u, x0, x1 = caches[k]
            dy = d_y[:, k]
            grads["w_out"] += dy.T @ x1
            grads["b_out"] += dy.sum(axis=0)
            dx1 = dy @ w["w_out"] + dx_next
            dz = dx1 * (1.0 - x1 ** 2)
            grads["w_ih"] += dz.T @ u
            grads["w_hh"] += dz.T @ x0
            grads["b_h"] += dz.sum(axis=0)
            dx_next = dz @ w["w_hh"]
        return

    if arch == "lstm":
        dx_next = np.zeros((b, p.n))
        dc_next = np.zeros((b, p.n))
        for k in range(t - 1, -1, -1):
            u, x0, c0, gi, gf, gg, go, tc, x1 = caches[k]
            dy = d_y[:, k]
            grads["w_out"] += dy.T @ x1
            grads["b_out"] += dy.sum(axis=0)
            dx1 = dy @ w["w_out"] + dx_next
            do = dx1 * tc
            dc1 = dx1 * go * (1.0 - tc ** 2) + dc_next
            di, df, dg = dc1 * gg, dc1 * c0, dc1 * gi
            dc_next = dc1 * gf
            dai = di * gi * (1.0 - gi)
            daf = df * gf * (1.0 - gf)
            dag = dg * (1.0 - gg ** 2)
            dao = do * go * (1.0 - go)
            for da, gate in ((dai, "i"), (daf, "f"), (dag, "g"), (dao, "o")):
                grads[f"w_i{gate}"] += da.T @ u
                grads[f"w_h{gate}"] += da.T @ x0
                grads[f"b_{gate}"] += da.sum(axis=0)
            dx_next = dai @ w["w_hi"] + daf @ w["w_hf"] + dag @ w["w_hg"] + dao @ w["w_ho"]
        return

    if arch == "gru":
        dx_next = np.zeros((b, p.n))
        for k in range(t - 1, -1, -1):
            u, x0, gz, gr, gh, rx, x1 = caches[k]
            dy = d_y[:, k]
            grads["w_out"] += dy.T @ x1
            grads["b_out"] += dy.sum(axis=0)
            dx1 = dy @ w["w_out"] + dx_next
            dz = dx1 * (gh - x0)
            dh = dx1 * gz
            dx0 = dx1 * (1.0 - gz)
            dah = dh * (1.0 - gh ** 2)
            grads["w_ih"] += dah.T @ u
            grads["w_hh"] += dah.T @ rx
            grads["b_h"] += dah.sum(axis=0)
            drx = dah @ w["w_hh"]
            dr = drx * x0
            dx0 = dx0 + drx * gr
            dar = dr * gr * (1.0 - gr)
            daz = dz * gz * (1.0 - gz)
            grads["w_ir"] += dar.T @ u
            grads["w_hr"] += dar.T @ x0
            grads["b_r"] += dar.sum(axis=0)
            grads["w_iz"] += daz.T @ u
            grads["w_hz"] += daz.T @ x0
            grads["b_z"] += daz.sum(axis=0)
            dx_next = dx0 + dar @ w["w_hr"] + daz @ w["w_hz"]
        return

    if arch == "narx":
        # Predictions feed back into later regressors; collect those
        # contributions per originating step while walking backwards.
        d_feedback = np.zeros_like(d_y)
        n_hist = p.n
        for k in range(t - 1, -1, -1):
            reg, h1, h2 = caches[k]
            dy = d_y[:, k] + d_feedback[:, k]
            grads["w_3"] += dy.T @ h2
            grads["b_3"] += dy.sum(axis=0)
            dh2 = dy @ w["w_3"]
            da2 = dh2 * (1.0 - h2 ** 2)
            grads["w_2"] += da2.T @ h1
            grads["b_2"] += da2.sum(axis=0)
            dh1 = da2 @ w["w_2"]
            da1 = dh1 * (1.0 - h1 ** 2)
            grads["w_1"] += da1.T @ reg
            grads["b_1"] += da1.sum(axis=0)
            dreg_y = (da1 @ w["w_1"])[:, :models.OUT_DIM * n_hist].reshape(b, n_hist, models.OUT_DIM)
            for j in range(n_hist):
                src = k - 1 - j
                if src < 0:
                    break
                d_feedback[:, src] += dreg_y[:, j]
        return

    raise InvalidArgumentError(f"unsupported architecture {arch!r}")


def loss_and_gradients(p: models.ModelParams, traces, trunc: int = 0):
    """Normalized MSE over all samples of all traces (each rolled from zero
    state) and the matching parameter gradients."""
    traces = list(traces)
    if not traces:
        raise InvalidArgumentError("no traces")
    for i, trace in enumerate(traces):
        if not (np.all(np.isfinite(trace.u)) and np.all(np.isfinite(trace.y))):
            raise NumericFaultError(f"non-finite data in trace {i} (layer {trace.layer_index})")
    u, y, mask = pack_traces(traces)
    u_n = p.norm.normalize_u(u)
    y_n = p.norm.normalize_y(y)
    mse, grads = _batch_loss_grads(p, u_n, y_n, mask, trunc=trunc)
    if not np.isfinite(mse):
        bad = _first_bad_trace(p, traces)
        raise NumericFaultError(f"non-finite loss (first offending trace {bad})")
    return mse, grads


def _first_bad_trace(p, traces):
    for i, trace in enumerate(traces):
        u_n = p.norm.normalize_u(trace.u)[None]
        y_hat, _, _ = models.forward_batch(p, u_n)
        if not np.all(np.isfinite(y_hat)):
            return i
    return "unknown"


def batch_loss(p: models.ModelParams, traces) -> float:
    """Loss only (no gradients); used for evaluation and finite differencing."""
    u, y, mask = pack_traces(traces)
    u_n = p.norm.normalize_u(u)
    y_n = p.norm.normalize_y(y)
    mse, _ = _batch_loss_grads(p, u_n, y_n, mask, want_grads=False)
    return mse


# -- optimizer -----------------------------------------------------------------

def adam_init(p: models.ModelParams):
    zeros = lambda: {k: np.zeros_like(v) for k, v in p.weights.items()}
    return zeros(), zeros()


def adam_step(p, grads, moment_state, t, cfg: TrainConfig, lr: float | None = None):
    """One bias-corrected Adam update; returns updated params and moments."""
    if t < 1:
        raise InvalidArgumentError("Adam step index starts at 1")
    m, v = moment_state
    step_lr = cfg.lr if lr is None else lr
    new_w, new_m, new_v = {}, {}, {}
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for key, w in p.weights.items():
        g = grads[key]
        new_m[key] = cfg.beta1 * m[key] + (1.0 - cfg.beta1) * g
        new_v[key] = cfg.beta2 * v[key] + (1.0 - cfg.beta2) * g * g
        new_w[key] = w - step_lr * (new_m[key] / c1) / (np.sqrt(new_v[key] / c2) + cfg.eps)
    return replace_weights(p, new_w), (new_m, new_v)


def replace_weights(p: models.ModelParams, weights) -> models.ModelParams:
    return models.ModelParams(arch=p.arch, n=p.n, weights=weights, norm=p.norm)


# -- training loops ------------------------------------------------------------

def train(arch: str, n: int, dataset: Dataset, cfg: TrainConfig):
    """Adam over the training split; returns the best-validation parameters
    and a history of (epoch, train_mse, val_mse) rows."""
    train_traces = dataset.train_traces
    val_traces = dataset.val_traces
    if not train_traces or not val_traces:
        raise InvalidArgumentError("dataset must have both train and validation traces")

    u_all = np.concatenate([t.u for t in train_traces])
    y_all = np.concatenate([t.y for t in train_traces])
    norm = models.NormStats.from_data(u_all, y_all)
    p = models.model_init(arch, n, cfg.seed)
    p = models.ModelParams(arch=p.arch, n=p.n, weights=p.weights, norm=norm)

    moments = adam_init(p)
    rng = np.random.default_rng(cfg.seed + 1)
    history = []
    best_val = np.inf
    best_params = p.copy()
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            lr = cfg.lr_at(epoch)
            if cfg.batch_traces and cfg.batch_traces < len(train_traces):
                order = rng.permutation(len(train_traces))
                for lo in range(0, len(order), cfg.batch_traces):
                    subset = [train_traces[i] for i in order[lo:lo + cfg.batch_traces]]
                    _, grads = loss_and_gradients(p, subset, trunc=cfg.bptt_trunc)
                    step += 1
                    p, moments = adam_step(p, grads, moments, step, cfg, lr=lr)
            else:
                _, grads = loss_and_gradients(p, train_traces, trunc=cfg.bptt_trunc)
                step += 1
                p, moments = adam_step(p, grads, moments, step, cfg, lr=lr)

            if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
                train_mse = batch_loss(p, train_traces)
                val_mse = batch_loss(p, val_traces)
                if not np.isfinite(train_mse):
                    raise NumericFaultError("training loss diverged")
                history.append((epoch, train_mse, val_mse))
                if val_mse < best_val:
                    best_val = val_mse
                    best_params = p.copy()
    except NumericFaultError as exc:
        raise TrainingDivergedError(str(exc), history=history) from exc
    return best_params, history


def fine_tune(p_i: models.ModelParams, prev_layer, cfg: FineTuneConfig) -> models.ModelParams:
    """Adapt parameters to the previous layer's data with a quadratic penalty
    on drift from the pre-update parameters. Normalization stays frozen."""
    traces = [prev_layer] if isinstance(prev_layer, LayerTrace) else list(prev_layer)
    if not traces or any(t.n_samples == 0 for t in traces):
        raise InvalidArgumentError("fine-tuning requires non-empty layer data")
    theta0 = {k: v.copy() for k, v in p_i.weights.items()}
    p = p_i.copy()
    moments = adam_init(p)
    adam_cfg = TrainConfig(epochs=max(cfg.epochs, 1), lr=cfg.lr)
    for step in range(1, cfg.epochs + 1):
        _, grads = loss_and_gradients(p, traces)
        if cfg.lam > 0:
            for key in grads:
                grads[key] = grads[key] + 2.0 * cfg.lam * (p.weights[key] - theta0[key])
        p, moments = adam_step(p, grads, moments, step, adam_cfg)
    return p


# -- error metrics --------------------------------------------------------------

def prediction_errors(p: models.ModelParams, traces) -> np.ndarray:
    """Stacked per-sample absolute errors (N, 2) in mm, free-run per trace."""
    errs = []
    for trace in traces:
        y_hat = models.rollout(p, trace.u)
        errs.append(np.abs(y_hat - trace.y))
    return np.concatenate(errs) if errs else np.zeros((0, models.OUT_DIM))


def nearest_rank_p95(values: np.ndarray) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise InvalidArgumentError("no values")
    idx = int(np.ceil(0.95 * v.size)) - 1
    return float(v[max(idx, 0)])


def evaluate_errors(p: models.ModelParams, traces) -> dict[str, float]:
    """Per-channel MAE and 95th-percentile absolute error, denormalized mm."""
    traces = list(traces)
    if not traces:
        raise InvalidArgumentError("no traces to evaluate")
    errs = prediction_errors(p, traces)
    return {
        "mae_h": float(errs[:, 0].mean()),
        "mae_w": float(errs[:, 1].mean()),
        "p95_h": nearest_rank_p95(errs[:, 0]),
        "p95_w": nearest_rank_p95(errs[:, 1]),
    }
