import numpy as np
import pytest

from waamctl import geometry, plant


def make_trace(s, u, y, layer_index=1, t_s=0.1, direction=geometry.FORWARD):
    return geometry.LayerTrace(layer_index=layer_index, t_s=t_s, direction=direction,
                               s=np.asarray(s, dtype=float),
                               u=np.asarray(u, dtype=float),
                               y=np.asarray(y, dtype=float))


def constant_trace(n=20, dh=1.8, w=5.2, v_t=7.5, v_w=63.5, **kw):
    s = np.arange(n) * v_t * 0.1
    u = np.tile([v_t, v_w], (n, 1))
    y = np.tile([dh, w], (n, 1))
    return make_trace(s, u, y, **kw)


def random_traces(n_traces, t_len, seed=0, layer_index=1):
    """Small synthetic (u, y) sequences in normalized-ish units for gradient
    and training tests; positions are consistent with a constant torch speed
    but carry no physical meaning here."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_traces):
        u = rng.uniform(-1.2, 1.2, (t_len, 2))
        y = rng.uniform(-1.2, 1.2, (t_len, 2))
        out.append(make_trace(np.arange(t_len) * 0.75, u, y, layer_index=layer_index))
    return out


@pytest.fixture(scope="session")
def noise_free_plant():
    import dataclasses
    return dataclasses.replace(plant.PlantConfig(), sigma_h=0.0, sigma_w=0.0)
