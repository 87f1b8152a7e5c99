import json
import math

import numpy as np
import pytest
from scipy.linalg import svdvals

from dynamics import (DegenerateDirectionError, DimensionMismatchError, DivergenceError, EventType,
                      LinearResidual, NoiseModel, PiecewiseSwitched, RandomTanhNet, StateVector, SystemSpec,
                      Trajectory, build_map, derive_seed, jacobian_fd, lyapunov_estimate, simulate_ensemble,
                      simulate_open_loop, spectral_norm, step)


def test_identity_map_without_noise_keeps_state():
    out = step(LinearResidual(np.zeros((2, 2))), [1.0, 2.0], NoiseModel(0.0))
    assert out.tolist() == [1.0, 2.0]


def test_scalar_step_is_linear(expansive_scalar, quiet_noise):
    assert step(expansive_scalar, [1.0], quiet_noise).tolist() == pytest.approx([1.1])


def test_seeded_step_matches_independent_draw(expansive_scalar):
    noise = NoiseModel(0.01, seed=5)
    xi0 = 0.1 * np.random.Generator(np.random.PCG64(np.random.SeedSequence(5, spawn_key=(0,)))).standard_normal(1)
    out = step(expansive_scalar, [1.0], noise)
    assert out.values[0] == pytest.approx(1.1 + xi0[0], abs=1e-15)


def test_chained_steps_draw_fresh_noise():
    zero = LinearResidual(np.zeros((2, 2)))
    noise = NoiseModel(1.0, seed=42)
    s = np.zeros(2)
    xis = []
    for _ in range(3):
        nxt = step(zero, s, noise).values
        xis.append(nxt - s)
        s = nxt
    assert not np.array_equal(xis[0], xis[1])
    assert not np.array_equal(xis[1], xis[2])
    expected = NoiseModel(1.0, seed=42).generator().standard_normal((3, 2))
    assert np.vstack(xis) == pytest.approx(expected, abs=1e-12)


def test_step_rejects_dimension_mismatch(expansive_scalar, quiet_noise):
    with pytest.raises(DimensionMismatchError):
        step(expansive_scalar, [1.0, 2.0], quiet_noise)


def test_step_overflow_raises_divergence():
    huge = LinearResidual.scalar(1e300)
    with pytest.raises(DivergenceError) as info:
        step(huge, [1e300], NoiseModel(0.0))
    assert info.value.state_norm == pytest.approx(1e300)


def test_state_vector_validation():
    with pytest.raises(ValueError):
        StateVector([])
    with pytest.raises(ValueError):
        StateVector([1.0, math.nan])
    assert StateVector([3.0, 4.0]).norm() == pytest.approx(5.0)


def test_noiseless_open_loop_tracks_ideal(default_system):
    transition = default_system.build()
    traj = simulate_open_loop(transition, default_system.initial_state(), NoiseModel(0.0, seed=3), 25)
    assert traj.n_steps == 25
    assert np.all(traj.deviation_norms() == 0.0)


def test_open_loop_is_bit_reproducible(default_system):
    transition = default_system.build()
    runs = [simulate_open_loop(transition, default_system.initial_state(), NoiseModel(0.01, seed=11), 30)
            for _ in range(2)]
    assert runs[0].to_json() == runs[1].to_json()


def test_open_loop_variance_matches_closed_form(expansive_scalar, ar1):
    run = simulate_ensemble(expansive_scalar, [1.0], NoiseModel(0.01, seed=0), 10, 10_000)
    sample_var = np.var(run.deviations[:, 10, 0], ddof=1)
    assert sample_var == pytest.approx(ar1(1.1, 0.01, 10), rel=0.05)


def test_contractive_variance_plateaus():
    run = simulate_ensemble(LinearResidual.scalar(0.5), [1.0], NoiseModel(0.01, seed=2), 40, 10_000)
    plateau = 0.01 / (1 - 0.25)
    for t in (20, 30, 40):
        assert np.var(run.deviations[:, t, 0], ddof=1) == pytest.approx(plateau, rel=0.05)


def test_ensemble_flags_diverged_samples():
    run = simulate_ensemble(LinearResidual.scalar(1e200), [0.0], NoiseModel(1.0, seed=0), 3, 4)
    assert run.n_diverged == 4


def test_ensemble_sample_seeds_are_derived():
    run = simulate_ensemble(LinearResidual.scalar(1.0), [0.0], NoiseModel(0.01, seed=9), 2, 3)
    assert run.seeds == [derive_seed(9, i) for i in range(3)]


def test_derive_seed_is_deterministic_and_distinct():
    assert derive_seed(0, 1) == derive_seed(0, 1)
    assert len({derive_seed(0, i) for i in range(100)}) == 100
    assert derive_seed(0, 1) != derive_seed(1, 1)


def test_noise_streams_are_independent():
    base = NoiseModel(0.01, seed=4)
    a = base.generator().standard_normal(4)
    b = base.with_stream(1).generator().standard_normal(4)
    assert not np.allclose(a, b)


def test_noise_model_rejects_negative_variance():
    with pytest.raises(ValueError):
        NoiseModel(-0.1)


def test_jacobian_fd_recovers_planted_map():
    transition = LinearResidual.planted(5, 1.1, seed=3)
    J = jacobian_fd(transition, np.linspace(-1, 1, 5))
    assert np.max(np.abs(J - transition.J)) <= 10 * 1e-5 ** 2 + 1e-9


def test_tanh_jacobian_at_origin_is_weight_product():
    net = RandomTanhNet.create(4, hidden=6, lipschitz=0.5, seed=1)
    expected = net.V @ net.W
    assert net.jacobian(np.zeros(4)) == pytest.approx(expected, abs=1e-12)
    assert jacobian_fd(net, np.zeros(4)) == pytest.approx(expected, abs=1e-8)


@pytest.mark.parametrize("h", [1e-3, 1e-5])
def test_jacobian_fd_step_sweep_on_tanh_net(h):
    net = RandomTanhNet.create(4, hidden=8, lipschitz=1.0, seed=2, bias_scale=0.3)
    s = np.array([0.4, -0.3, 0.2, -0.5])
    assert np.max(np.abs(jacobian_fd(net, s, h=h) - net.jacobian(s))) <= 10 * h ** 2 + 1e-9


def test_tanh_net_lipschitz_is_clipped():
    net = RandomTanhNet.create(8, hidden=32, lipschitz=0.2, seed=0)
    assert net.lipschitz <= 0.2 + 1e-12


def test_jacobian_fd_rejects_nonpositive_step(expansive_scalar):
    with pytest.raises(ValueError):
        jacobian_fd(expansive_scalar, [1.0], h=0.0)


@pytest.mark.parametrize("d", [1, 3, 10])
def test_spectral_norm_of_identity(d):
    est = spectral_norm(np.eye(d))
    assert est.converged
    assert est.value == pytest.approx(1.0)


def test_spectral_norm_of_diagonal():
    assert float(spectral_norm(np.diag([3.0, 1.0, 0.5]))) == pytest.approx(3.0)


def test_spectral_norm_bounds_every_direction(rng):
    M = rng.standard_normal((6, 6))
    est = spectral_norm(M).value
    for _ in range(50):
        v = rng.standard_normal(6)
        assert est >= np.linalg.norm(M @ v) / np.linalg.norm(v) - 1e-9


def test_spectral_norm_matches_svd_on_random_matrix():
    M = np.random.default_rng(8).standard_normal((8, 8))
    est = spectral_norm(M)
    assert est.converged
    assert est.value == pytest.approx(svdvals(M)[0], rel=1e-8)


def test_spectral_norm_reports_non_convergence():
    est = spectral_norm(np.diag([1.0, 0.9]), iters=2, tol=0.0)
    assert not est.converged
    assert est.iterations == 2


@pytest.mark.parametrize("a", [1.1, 0.9])
def test_lyapunov_of_scalar_map(a):
    lam = lyapunov_estimate(LinearResidual.scalar(a), [1.0], NoiseModel(0.01, seed=0), 1000)
    assert lam == pytest.approx(math.log(a), abs=1e-6)


def test_lyapunov_of_alternating_regimes():
    switched = PiecewiseSwitched.alternating([1.2, 0.9])
    lam = lyapunov_estimate(switched, [1.0], NoiseModel(0.0), 1000)
    assert lam == pytest.approx((math.log(1.2) + math.log(0.9)) / 2, abs=1e-6)


def test_lyapunov_matches_log_norm_of_planted_map():
    transition = LinearResidual.planted(6, 1.05, seed=2)
    lam = lyapunov_estimate(transition, np.ones(6), NoiseModel(0.01, seed=1), 1000)
    assert lam == pytest.approx(math.log(float(spectral_norm(transition.A))), abs=1e-4)


def test_lyapunov_rejects_zero_tangent(expansive_scalar):
    with pytest.raises(DegenerateDirectionError):
        lyapunov_estimate(expansive_scalar, [1.0], NoiseModel(0.0), 20, u0=[0.0])


def test_piecewise_schedule_cycles():
    switched = PiecewiseSwitched.alternating([1.2, 0.9], duration=2)
    rates = [switched.local_rate([1.0], t) for t in range(6)]
    assert rates == pytest.approx([math.log(1.2)] * 2 + [math.log(0.9)] * 2 + [math.log(1.2)] * 2)


def test_system_spec_builds_planted_rate(default_system):
    transition = default_system.build()
    assert transition.d == 8
    assert transition.local_rate() == pytest.approx(0.1)
    assert np.linalg.norm(default_system.initial_state()) == pytest.approx(1.0)


@pytest.mark.parametrize("family", ["linear_residual", "random_tanh_net", "piecewise_switched"])
def test_build_map_families(family):
    transition = build_map(family, 3, rho_plant=1.1, seed=0)
    assert transition.family.value == family
    assert transition.describe()["d"] == 3


def test_trajectory_round_trip_keeps_events():
    traj = Trajectory(s0=np.zeros(2), seeds={"dynamics": 1})
    traj.append([1.0, 0.0], [0.5, 0.0], entropy=1.2, drift=-1.48, omega=0.0)
    traj.append([0.5, 0.0], [0.5, 0.0], event=EventType.RESET, omega=0.0)
    traj.anchors.append("restated goal")
    back = Trajectory.from_dict(json.loads(traj.to_json()))
    assert back.to_dict() == traj.to_dict()
    assert (back.n_steps, back.n_resets, back.n_events) == (1, 1, 2)
    assert back.deviation_norms().tolist() == pytest.approx([0.0, 0.5, 0.0])


def test_trajectory_frame_has_one_row_per_event():
    traj = simulate_open_loop(LinearResidual.scalar(1.1), [1.0], NoiseModel(0.01, seed=0), 5)
    frame = traj.to_frame()
    assert list(frame["step"]) == [1, 2, 3, 4, 5]
    assert set(frame["event"]) == {"step"}


def test_system_spec_respects_explicit_rho():
    assert SystemSpec(rho_plant=1.2).lam == pytest.approx(math.log(1.2))
