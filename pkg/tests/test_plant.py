import dataclasses

import numpy as np
import pytest

from waamctl import geometry, plant
from waamctl.errors import InvalidArgumentError

U_NOMINAL = plant.ProcessInput(7.5, 63.5)


def settled_layer(cfg, n_layers=6, u=U_NOMINAL):
    rng = np.random.default_rng(cfg.seed)
    state = plant.initial_state(cfg)
    trace = None
    for _ in range(n_layers):
        state, trace = plant.run_layer(state, cfg, u, rng)
        state = plant.interlayer_wait(state, cfg, 45.0)
    return state, trace


# -- plant_step -------------------------------------------------------------------

def test_calibrated_steady_state_hits_target(noise_free_plant):
    # settled edge-excluded layer output within 2% of (1.8, 5.2) at u*
    _, trace = settled_layer(noise_free_plant)
    keep = ~geometry.edge_mask(trace.s, noise_free_plant.length, 5.0)
    mean = trace.y[keep].mean(axis=0)
    assert mean[0] == pytest.approx(1.8, rel=0.02)
    assert mean[1] == pytest.approx(5.2, rel=0.02)


def test_zero_wire_feed_deposits_nothing(noise_free_plant):
    state = plant.initial_state(noise_free_plant)
    _, out = plant.plant_step(state, plant.ProcessInput(7.5, 0.0), noise_free_plant,
                              np.random.default_rng(0))
    assert out.delta_h == 0.0


def test_area_linear_in_wire_feed(noise_free_plant):
    # at fixed temperature and torch speed, area = dh * w * k_shape doubles with v_w
    a1, w1, dh1 = plant.bead_geometry(700.0, 7.5, 40.0, noise_free_plant)
    a2, w2, dh2 = plant.bead_geometry(700.0, 7.5, 80.0, noise_free_plant)
    assert a2 == pytest.approx(2 * a1, rel=1e-12)
    assert dh2 * w2 == pytest.approx(2 * dh1 * w1, rel=1e-12)


def test_zero_torch_speed_rejected(noise_free_plant):
    state = plant.initial_state(noise_free_plant)
    with pytest.raises(InvalidArgumentError):
        plant.plant_step(state, plant.ProcessInput(0.0, 63.5), noise_free_plant,
                         np.random.default_rng(0))


def test_monotone_thermal_coupling(noise_free_plant):
    # hotter bead: wider and flatter at fixed VPD
    _, w_cold, dh_cold = plant.bead_geometry(500.0, 7.5, 63.5, noise_free_plant)
    _, w_hot, dh_hot = plant.bead_geometry(1200.0, 7.5, 63.5, noise_free_plant)
    assert w_hot > w_cold
    assert dh_hot < dh_cold


# -- run_layer ----------------------------------------------------------------------

def test_constant_layer_sample_count(noise_free_plant):
    state = plant.initial_state(noise_free_plant)
    state, trace = plant.run_layer(state, noise_free_plant, U_NOMINAL,
                                   np.random.default_rng(0))
    assert trace.n_samples == int(np.ceil(110.0 / (7.5 * 0.1)))  # 147
    assert state.s == noise_free_plant.length
    geometry.validate_trace(trace, noise_free_plant.length)


def test_callback_equals_constant_input(noise_free_plant):
    rng1 = np.random.default_rng(9)
    rng2 = np.random.default_rng(9)
    s1, t1 = plant.run_layer(plant.initial_state(noise_free_plant), noise_free_plant,
                             U_NOMINAL, rng1)
    s2, t2 = plant.run_layer(plant.initial_state(noise_free_plant), noise_free_plant,
                             lambda k, st: U_NOMINAL, rng2)
    assert np.array_equal(t1.y, t2.y)
    assert np.array_equal(t1.u, t2.u)
    assert s1.temperature == s2.temperature


def test_consecutive_layers_alternate_direction():
    cfg = plant.PlantConfig()
    rng = np.random.default_rng(0)
    state = plant.initial_state(cfg)
    state, t1 = plant.run_layer(state, cfg, U_NOMINAL, rng)
    state = plant.interlayer_wait(state, cfg, 45.0)
    state, t2 = plant.run_layer(state, cfg, U_NOMINAL, rng)
    assert t1.direction == geometry.FORWARD
    assert t2.direction == geometry.REVERSE


def test_profile_accumulates_measured_outputs():
    cfg = plant.PlantConfig()
    rng = np.random.default_rng(1)
    state = plant.initial_state(cfg)
    state, trace = plant.run_layer(state, cfg, U_NOMINAL, rng)
    mid = geometry.interpolate_height(state.profile, 55.0)
    keep = ~geometry.edge_mask(trace.s, cfg.length, 10.0)
    assert mid == pytest.approx(trace.y[keep, 0].mean(), rel=0.1)


# -- interlayer_wait ------------------------------------------------------------------

def test_wait_zero_keeps_temperature():
    cfg = plant.PlantConfig()
    state = dataclasses.replace(plant.initial_state(cfg), temperature=900.0)
    after = plant.interlayer_wait(state, cfg, 0.0)
    assert after.temperature == 900.0
    assert after.layer_index == state.layer_index + 1
    assert after.s == 0.0


def test_wait_long_reaches_ambient():
    cfg = plant.PlantConfig()
    state = dataclasses.replace(plant.initial_state(cfg), temperature=1500.0)
    after = plant.interlayer_wait(state, cfg, 10_000.0)
    assert after.temperature == pytest.approx(cfg.t_env, abs=1e-6)


def test_wait_matches_exponential_oracle():
    # closed-form e^{-k t} vs the discrete Euler integration, k_cool = 0.05/s
    cfg = dataclasses.replace(plant.PlantConfig(), k_c0=0.05, k_layer=0.0)
    t0 = 1300.0
    state = dataclasses.replace(plant.initial_state(cfg), temperature=t0)
    after = plant.interlayer_wait(state, cfg, 45.0)
    expected = cfg.t_env + (t0 - cfg.t_env) * np.exp(-0.05 * 45.0)
    assert after.temperature == pytest.approx(expected, rel=0.01)


# -- invariants -----------------------------------------------------------------------

def test_bibo_bound_random_inputs():
    cfg = plant.PlantConfig()
    rng = np.random.default_rng(7)
    input_rng = np.random.default_rng(8)

    def random_input(k, st):
        return plant.ProcessInput(float(input_rng.uniform(2, 15)),
                                  float(input_rng.uniform(21.2, 105.8)))

    state = plant.initial_state(cfg)
    steps = 0
    temps = []
    while steps < 10_000:
        state, trace = plant.run_layer(state, cfg, random_input, rng)
        steps += trace.n_samples
        temps.append(state.temperature)
        assert np.all(np.isfinite(trace.y))
        assert np.all(trace.y[:, 0] >= 0)
        assert np.all(trace.y[:, 1] > 0)
        state = plant.interlayer_wait(state, cfg, 45.0)
    k_min = cfg.k_cool(state.layer_index)
    t_max = cfg.t_env + cfg.k_q * 105.8 / k_min
    assert all(cfg.t_env <= t <= t_max for t in temps)


def test_volume_conservation(noise_free_plant):
    # noise off, edge factors off: deposited volume equals wire volume fed
    cfg = dataclasses.replace(noise_free_plant, r0=0.0, d0=0.0)
    rng = np.random.default_rng(2)
    state = plant.initial_state(cfg)
    state, trace = plant.run_layer(state, cfg, U_NOMINAL, rng)
    deposited = np.sum(trace.y[:, 0] * trace.y[:, 1] * cfg.k_shape
                       * trace.u[:, 0] * cfg.t_s)
    wire = cfg.k_a * np.sum(trace.u[:, 1] * cfg.t_s)
    assert deposited == pytest.approx(wire, rel=0.01)


def test_determinism_same_seed():
    cfg = plant.PlantConfig()
    runs = []
    for _ in range(2):
        rng = np.random.default_rng(cfg.seed)
        state = plant.initial_state(cfg)
        state, trace = plant.run_layer(state, cfg, U_NOMINAL, rng)
        runs.append(trace)
    assert np.array_equal(runs[0].y, runs[1].y)
    assert np.array_equal(runs[0].s, runs[1].s)


def test_measurement_lag_delays_outputs(noise_free_plant):
    cfg = dataclasses.replace(noise_free_plant, lag_steps=3)
    rng0 = np.random.default_rng(0)
    rng1 = np.random.default_rng(0)
    _, lagged = plant.run_layer(plant.initial_state(cfg), cfg, U_NOMINAL, rng0)
    _, direct = plant.run_layer(plant.initial_state(noise_free_plant),
                                noise_free_plant, U_NOMINAL, rng1)
    assert np.allclose(lagged.y[3:], direct.y[:-3])
    assert np.allclose(lagged.y[:3], direct.y[:1])


def test_dataset_coverage_validation():
    with pytest.raises(InvalidArgumentError):
        plant.CoverageSpec(builds=()).validate()
    bad = plant.CoverageSpec(builds=(((200.0), ((7.5,),)),))
    with pytest.raises(InvalidArgumentError):
        bad.validate()


def test_generate_dataset_in_bounds():
    cov = plant.default_coverage(n_feeds=4, layers_per_build=2)
    builds = plant.generate_dataset(plant.PlantConfig(), cov)
    assert len(builds) == 4
    for traces in builds:
        assert len(traces) == 2
        for t in traces:
            assert np.all(t.u[:, 0] >= 2.0) and np.all(t.u[:, 0] <= 15.0)
            assert np.all(t.u[:, 1] >= 21.2) and np.all(t.u[:, 1] <= 105.8)
