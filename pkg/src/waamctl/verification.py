"""Central finite-difference oracles for derivatives.

These deliberately use nothing from the analytic derivative paths: they
perturb inputs/states/parameters and difference the forward maps only.
Shared by the test suite and the check-grad command.
"""

from __future__ import annotations

import numpy as np

from . import models, training


def agree(analytic, numeric, rtol: float = 1e-4, atol: float = 1e-6) -> bool:
    a = np.asarray(analytic, dtype=float)
    b = np.asarray(numeric, dtype=float)
    return bool(np.all(np.abs(a - b) <= atol + rtol * np.maximum(np.abs(a), np.abs(b))))


def worst_rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    a = np.asarray(analytic, dtype=float)
    b = np.asarray(numeric, dtype=float)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def _denorm_output(p, st, u_raw):
    _, y_n = models.model_step(p, st, p.norm.normalize_u(u_raw))
    return p.norm.denormalize_y(y_n)


def fd_input_jacobian(p, st, u_raw, h_norm: float = 1e-4) -> np.ndarray:
    """d(output)/d(input) by central differences, denormalized units.

    Steps are h_norm in normalized input units (scaled per channel)."""
    u_raw = np.asarray(u_raw, dtype=float)
    jac = np.empty((models.OUT_DIM, models.IN_DIM))
    for i in range(models.IN_DIM):
        h = h_norm * p.norm.u_std[i]
        up = u_raw.copy()
        um = u_raw.copy()
        up[i] += h
        um[i] -= h
        jac[:, i] = (_denorm_output(p, st, up) - _denorm_output(p, st, um)) / (2 * h)
    return jac


def _stack_state(p, st):
    if p.arch == "lstm":
        return np.concatenate([st.x, st.c])
    return st.x.copy()


def _unstack_state(p, vec):
    if p.arch == "lstm":
        return models.ModelState(x=vec[:p.n].copy(), c=vec[p.n:].copy())
    return models.ModelState(x=vec.copy())


def fd_state_matrix(p, st, u_raw, h: float = 1e-5) -> np.ndarray:
    """d(state update)/d(state) by central differences, normalized coordinates."""
    u_n = p.norm.normalize_u(np.asarray(u_raw, dtype=float))
    base = _stack_state(p, st)
    dim = base.size
    mat = np.empty((dim, dim))
    for j in range(dim):
        vp = base.copy()
        vm = base.copy()
        vp[j] += h
        vm[j] -= h
        sp, _ = models.model_step(p, _unstack_state(p, vp), u_n)
        sm, _ = models.model_step(p, _unstack_state(p, vm), u_n)
        mat[:, j] = (_stack_state(p, sp) - _stack_state(p, sm)) / (2 * h)
    return mat


def fd_param_gradients(p, traces, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Loss gradient for every parameter entry by central differences."""
    grads = {}
    for key, w in p.weights.items():
        g = np.empty_like(w)
        flat = w.ravel()
        gflat = g.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = training.batch_loss(p, traces)
            flat[j] = orig - h
            dn = training.batch_loss(p, traces)
            flat[j] = orig
            gflat[j] = (up - dn) / (2 * h)
        grads[key] = g
    return grads


def random_state(p, rng) -> models.ModelState:
    if p.arch in ("rnn", "gru"):
        return models.ModelState(x=rng.uniform(-0.9, 0.9, p.n))
    if p.arch == "lstm":
        return models.ModelState(x=rng.uniform(-0.9, 0.9, p.n),
                                 c=rng.uniform(-1.5, 1.5, p.n))
    return models.ModelState(y_hist=rng.uniform(-1.0, 1.0, (p.n, models.OUT_DIM)),
                             u_hist=rng.uniform(-1.0, 1.0, (p.n, models.IN_DIM)))


def check_architecture(arch: str, n: int, seed: int = 0, n_jacobian: int = 100,
                       n_grad_instances: int = 2) -> dict[str, float]:
    """Worst relative derivative errors for one (arch, size) cell.

    Covers the input Jacobian on random (state, input) pairs, the state
    Jacobian where defined, and every parameter's sequence-loss gradient on
    small random trace sets."""
    rng = np.random.default_rng(seed)
    worst = {"input_jacobian": 0.0, "state_matrix": 0.0, "param_gradients": 0.0}

    for trial in range(n_jacobian):
        p = models.model_init(arch, n, seed=seed * 1000 + trial)
        st = random_state(p, rng)
        u = rng.uniform(-1.5, 1.5, models.IN_DIM)
        worst["input_jacobian"] = max(
            worst["input_jacobian"],
            worst_rel_error(models.input_jacobian(p, st, u), fd_input_jacobian(p, st, u)))
        if arch in ("rnn", "gru", "lstm"):
            worst["state_matrix"] = max(
                worst["state_matrix"],
                worst_rel_error(models.state_matrix(p, st, u), fd_state_matrix(p, st, u)))

    from .geometry import LayerTrace
    for trial in range(n_grad_instances):
        p = models.model_init(arch, n, seed=seed * 77 + trial)
        traces = []
        for b in range(2):
            t_len = 20
            u = rng.uniform(-1.2, 1.2, (t_len, models.IN_DIM))
            y = rng.uniform(-1.2, 1.2, (t_len, models.OUT_DIM))
            traces.append(LayerTrace(layer_index=1, t_s=0.1, direction="forward",
                                     s=np.arange(t_len) * 0.75, u=u, y=y))
        _, analytic = training.loss_and_gradients(p, traces)
        numeric = fd_param_gradients(p, traces)
        for key in analytic:
            worst["param_gradients"] = max(
                worst["param_gradients"], worst_rel_error(analytic[key], numeric[key]))
    return worst
