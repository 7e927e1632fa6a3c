import dataclasses
import os
import warnings

import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from memflow.errors import ContractError, DomainError, FormatError, IntegrityError, TrajectoryBlowUp
from memflow.systems import (
    Trajectory,
    eval_rhs,
    generate_trajectories,
    get_system,
    integrate,
    integrate_batch,
    load_collection,
    load_trajectory,
    rk4_step,
    save_collection,
    save_trajectory,
    trajectory_rng,
)

PEND = get_system("Pendulum")
CSTR = get_system("cstr")
LIN = get_system("Linear20")
CELL = get_system("cell")


def dop853(spec, x0, alpha, t_end, t_eval=None):
    sol = solve_ivp(
        lambda t, x: spec.rhs(x, alpha, spec.constants),
        (0.0, t_end),
        x0,
        method="DOP853",
        rtol=1e-13,
        atol=1e-13,
        t_eval=t_eval,
    )
    assert sol.success
    return sol.y.T


# --- catalog values -------------------------------------------------------


def test_catalog_dimensions_and_domains():
    assert (PEND.state_dim, PEND.param_dim) == (2, 2)
    np.testing.assert_array_equal(PEND.state_domain, [[-0.5, 0.5], [-1.6, 1.6]])
    np.testing.assert_array_equal(PEND.param_domain, [[0.05, 0.15], [8.0, 10.0]])
    assert (LIN.state_dim, LIN.param_dim) == (20, 100)
    np.testing.assert_array_equal(LIN.state_domain, np.tile([-2.0, 2.0], (20, 1)))
    np.testing.assert_array_equal(LIN.param_domain, np.tile([-0.05, 0.05], (100, 1)))
    assert (CSTR.state_dim, CSTR.param_dim) == (2, 1)
    np.testing.assert_allclose(CSTR.param_domain, [[0.0702, 0.0858]])
    np.testing.assert_array_equal(CSTR.state_domain, [[0.1, 1.0], [0.5, 5.5]])
    assert CSTR.constants == {"B": 22.0, "beta": 3.0, "gamma": 12.0, "x2c": 0.5}
    assert (CELL.state_dim, CELL.param_dim) == (3, 12)
    nominal = [0.2] * 6 + [0.5, 0.15, 0.15, 0.15, 0.25, 0.05]
    np.testing.assert_allclose(CELL.param_domain[:, 0], 0.9 * np.array(nominal))
    np.testing.assert_allclose(CELL.param_domain[:, 1], 1.1 * np.array(nominal))


def test_get_system_names():
    assert get_system("PENDULUM") is PEND
    assert get_system("cell-cascade") is CELL
    with pytest.raises(ContractError, match="unknown system"):
        get_system("lorenz")


def test_pendulum_rhs_by_hand():
    f = eval_rhs(PEND, [0.3, -1.0], [0.1, 9.0])
    np.testing.assert_allclose(f, [-1.0, -0.1 * -1.0 - 9.0 * np.sin(0.3)], rtol=1e-15)


def test_cstr_rhs_by_hand():
    x1, x2, da = 0.4, 2.0, 0.078
    arr = (1 - x1) * np.exp(x2 / (1 + x2 / 12.0))
    want = [-x1 + da * arr, -x2 + 22.0 * da * arr - 3.0 * (x2 - 0.5)]
    np.testing.assert_allclose(eval_rhs(CSTR, [x1, x2], [da]), want, rtol=1e-14)


def test_linear20_structure():
    # with Sigma21 = 0 the field is p' = q, q' = -p - Sigma22 q
    x = np.arange(20.0) / 10
    f = eval_rhs(LIN, x, np.zeros(100))
    p, q = x[:10], x[10:]
    np.testing.assert_allclose(f[:10], q)
    np.testing.assert_allclose(f[10:], -p - LIN.constants["sigma22"] @ q, rtol=1e-14)
    # Sigma21 is read row-major
    alpha = np.zeros(100)
    alpha[1 * 10 + 3] = 0.01
    f2 = eval_rhs(LIN, x, alpha)
    np.testing.assert_allclose(f2[10:] - f[10:], -0.01 * x[3] * np.eye(10)[1], atol=1e-16)


def test_eval_rhs_is_pure():
    x, a = np.array([0.3, 0.2, 0.9]), CELL.param_domain.mean(axis=1)
    first = eval_rhs(CELL, x, a)
    assert all(eval_rhs(CELL, x, a).tobytes() == first.tobytes() for _ in range(5))
    np.testing.assert_array_equal(x, [0.3, 0.2, 0.9])


def test_cstr_singular_arrhenius_raises_domain_error():
    with pytest.raises(DomainError):
        eval_rhs(CSTR, [0.5, -12.0], [0.078])


def test_eval_rhs_shape_contract():
    with pytest.raises(ContractError):
        eval_rhs(PEND, [0.1, 0.2, 0.3], [0.1, 9.0])
    with pytest.raises(ContractError):
        rk4_step(PEND, [0.1, 0.2], [0.1, 9.0], 0.0)
    with pytest.raises(ContractError):
        rk4_step(PEND, [np.nan, 0.2], [0.1, 9.0], 0.01)


# --- RK4 against adaptive oracles ----------------------------------------------


def test_rk4_single_step_matches_taylor_on_linear_system():
    # For x' = A x one RK4 step is the degree-4 Taylor polynomial of exp(hA).
    alpha = np.random.default_rng(0).uniform(-0.05, 0.05, 100)
    A = np.block([[np.zeros((10, 10)), np.eye(10)], [-(np.eye(10) + alpha.reshape(10, 10)), -LIN.constants["sigma22"]]])
    h = 0.05
    x = np.random.default_rng(1).uniform(-2, 2, 20)
    hA = h * A
    T = np.eye(20) + hA + hA @ hA / 2 + hA @ hA @ hA / 6 + hA @ hA @ hA @ hA / 24
    np.testing.assert_allclose(rk4_step(LIN, x, alpha, h), T @ x, rtol=1e-13, atol=1e-14)


def test_linear20_trajectory_matches_matrix_exponential():
    rng = np.random.default_rng(3)
    alpha = rng.uniform(-0.05, 0.05, 100)
    x0 = rng.uniform(-2, 2, 20)
    A = np.block([[np.zeros((10, 10)), np.eye(10)], [-(np.eye(10) + alpha.reshape(10, 10)), -LIN.constants["sigma22"]]])
    traj = integrate(LIN, x0, alpha, 0.02, 101, substeps=4)
    exact = expm(A * 2.0) @ x0
    # RK4 global error ~ C h^4 t with h = 0.005 and |A| ~ 1
    np.testing.assert_allclose(traj.states[-1], exact, atol=1e-9)


@pytest.mark.parametrize("spec,x0,alpha", [
    (PEND, [0.4, -1.2], [0.1, 9.5]),
    (CSTR, [0.5, 3.0], [0.08]),
    (CELL, [0.3, 0.6, 0.2], None),
])
def test_integrate_matches_dop853(spec, x0, alpha):
    if alpha is None:
        alpha = spec.param_domain.mean(axis=1)
    alpha = np.asarray(alpha, dtype=float)
    dt, K = (0.1 if spec is CELL else 0.02), 201
    traj = integrate(spec, np.asarray(x0, float), alpha, dt, K, substeps=4)
    ref = dop853(spec, np.asarray(x0, float), alpha, (K - 1) * dt, traj.times)
    scale = np.abs(ref).max()
    assert np.abs(traj.states - ref).max() < 1e-7 * max(scale, 1.0)


def _pendulum_error(h, x0, alpha, T=1.0):
    K = int(round(T / h)) + 1
    traj = integrate(PEND, x0, alpha, h, K, substeps=1)
    exact = dop853(PEND, x0, alpha, T, [T])[-1]
    return np.linalg.norm(traj.states[-1] - exact)


def test_rk4_convergence_order_is_four():
    x0, alpha = np.array([0.5, 1.6]), np.array([0.1, 10.0])
    hs = [0.02, 0.01, 0.005]
    errs = [_pendulum_error(h, x0, alpha) for h in hs]
    order = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert 3.8 <= order <= 4.2


def test_substep_refinement_within_richardson_bound():
    # substeps=1 vs 8 differ by the RK4 truncation error of the coarse grid,
    # which the step-doubling estimate bounds.
    x0, alpha = np.array([0.4, -1.0]), np.array([0.1, 9.0])
    coarse = integrate(PEND, x0, alpha, 0.02, 50, substeps=1).states[-1]
    half = integrate(PEND, x0, alpha, 0.02, 50, substeps=2).states[-1]
    fine = integrate(PEND, x0, alpha, 0.02, 50, substeps=8).states[-1]
    est = np.linalg.norm(coarse - half) * 16 / 15
    diff = np.linalg.norm(coarse - fine)
    assert diff <= 1.1 * est
    assert diff < 1e-6


# --- integrate behaviour --------------------------------------------------


def test_integrate_first_row_and_times():
    x0 = np.array([0.1, 0.2])
    traj = integrate(PEND, x0, [0.1, 9.0], 0.02, 5)
    np.testing.assert_array_equal(traj.states[0], x0)
    np.testing.assert_allclose(traj.times, [0, 0.02, 0.04, 0.06, 0.08])
    assert traj.K == 5 and traj.n == 2 and traj.debug_params is None


def test_integrate_warns_outside_domain():
    with pytest.warns(UserWarning, match="outside"):
        integrate(PEND, [2.0, 0.0], [0.1, 9.0], 0.02, 3)


def test_integrate_contracts():
    with pytest.raises(ContractError):
        integrate(PEND, [0.1, 0.1], [0.1, 9.0], 0.02, 0)
    with pytest.raises(ContractError):
        integrate(PEND, [0.1, 0.1], [0.1, 9.0], -0.02, 3)
    with pytest.raises(ContractError):
        integrate(PEND, [0.1, 0.1], [0.1, 9.0], 0.02, 3, substeps=0)


def test_blowup_reports_last_valid_row():
    # x' = x^2 from x0 = 1 escapes at t = 1
    spec = dataclasses.replace(
        PEND, rhs=lambda x, a, c: x * x, state_domain=np.array([[-10, 10], [-10, 10]])
    )
    with pytest.raises(TrajectoryBlowUp) as info:
        integrate(spec, [1.0, 0.0], [0.0, 0.0], 0.01, 200)
    k = info.value.last_valid
    # RK4 overshoots the singular time by a few steps before overflowing
    assert 90 <= k <= 110
    assert info.value.states.shape == (k + 1, 2)
    # batch version marks the same row onward as NaN
    out = integrate_batch(spec, np.array([[1.0, 0.0], [0.5, 0.0]]), np.zeros((2, 2)), 0.01, 200)
    assert np.all(np.isfinite(out[0, : k + 1])) and np.all(np.isnan(out[0, k + 1 :]))
    assert np.all(np.isfinite(out[1, :150]))


def test_cstr_domain_error_becomes_blowup():
    # drive x2 below -gamma, where the Arrhenius factor is singular
    real = CSTR.rhs

    def field(x, a, c):
        if x[1] < -5:
            return real(np.array([x[0], -12.0]), a, c)
        return np.array([0.0, -100.0])

    spec = dataclasses.replace(CSTR, rhs=field)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(TrajectoryBlowUp):
            integrate(spec, [0.5, 1.0], [0.078], 0.02, 100)


def test_batch_matches_scalar_integration():
    rng = np.random.default_rng(7)
    x0s = rng.uniform(PEND.state_domain[:, 0], PEND.state_domain[:, 1], (4, 2))
    alphas = rng.uniform(PEND.param_domain[:, 0], PEND.param_domain[:, 1], (4, 2))
    out = integrate_batch(PEND, x0s, alphas, 0.02, 60)
    for i in range(4):
        np.testing.assert_allclose(out[i], integrate(PEND, x0s[i], alphas[i], 0.02, 60).states, rtol=0, atol=1e-13)


# --- generation -----------------------------------------------------------


def test_generation_is_prefix_stable_and_seeded():
    a = generate_trajectories(PEND, 5, 20, 0.02, seed=4, debug=True)
    b = generate_trajectories(PEND, 3, 20, 0.02, seed=4, debug=True)
    for ta, tb in zip(a, b):
        np.testing.assert_array_equal(ta.states, tb.states)
    c = generate_trajectories(PEND, 3, 20, 0.02, seed=5)
    assert not np.array_equal(a[0].states, c[0].states)
    # trajectory i draws x0 then alpha from its own stream
    rng = trajectory_rng(4, 2)
    x0 = rng.uniform(PEND.state_domain[:, 0], PEND.state_domain[:, 1])
    alpha = rng.uniform(PEND.param_domain[:, 0], PEND.param_domain[:, 1])
    np.testing.assert_array_equal(a[2].states[0], x0)
    np.testing.assert_array_equal(a[2].debug_params, alpha)


def test_generated_draws_cover_domains():
    trajs = generate_trajectories(PEND, 300, 2, 0.02, seed=0, debug=True)
    x0 = np.array([t.states[0] for t in trajs])
    al = np.array([t.debug_params for t in trajs])
    for arr, box in ((x0, PEND.state_domain), (al, PEND.param_domain)):
        assert np.all(arr >= box[:, 0]) and np.all(arr <= box[:, 1])
        width = box[:, 1] - box[:, 0]
        assert np.all(arr.min(axis=0) < box[:, 0] + 0.05 * width)
        assert np.all(arr.max(axis=0) > box[:, 1] - 0.05 * width)
    assert all(t.debug_params is None for t in generate_trajectories(PEND, 2, 2, 0.02))


# --- MFT1 ----------------------------------------------------------------


def test_trajectory_roundtrip_bit_exact(tmp_path):
    traj = integrate(CELL, [0.1, 0.5, 0.9], CELL.param_domain.mean(axis=1), 0.1, 30, debug=True)
    p = tmp_path / "t.mft"
    save_trajectory(traj, p)
    back = load_trajectory(p)
    assert back.states.tobytes() == traj.states.tobytes()
    assert back.debug_params.tobytes() == traj.debug_params.tobytes()
    assert (back.dt, back.system_id) == (0.1, "CellCascade")
    with pytest.raises(FormatError, match="debug"):
        load_trajectory(p, allow_debug=False)


def test_trajectory_file_layout(tmp_path):
    traj = Trajectory(0.5, np.arange(6.0).reshape(3, 2), "Pendulum")
    p = tmp_path / "t.mft"
    save_trajectory(traj, p)
    raw = p.read_bytes()
    assert raw.startswith(b"MFT1\n")
    payload = raw[-6 * 8 :]
    np.testing.assert_array_equal(np.frombuffer(payload, "<f8"), np.arange(6.0))


def test_trajectory_corruption(tmp_path):
    traj = Trajectory(0.5, np.ones((4, 2)))
    p = tmp_path / "t.mft"
    save_trajectory(traj, p)
    raw = p.read_bytes()
    (tmp_path / "magic.mft").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_trajectory(tmp_path / "magic.mft")
    (tmp_path / "short.mft").write_bytes(raw[:-5])
    with pytest.raises(IntegrityError):
        load_trajectory(tmp_path / "short.mft")


def test_collection_roundtrip(tmp_path):
    trajs = generate_trajectories(PEND, 3, 10, 0.02, seed=1)
    save_collection(trajs, tmp_path / "c", {"seed": 1})
    back = load_collection(tmp_path / "c")
    assert len(back) == 3
    for a, b in zip(trajs, back):
        assert a.states.tobytes() == b.states.tobytes()
    assert not any(f.endswith(".tmp") for f in os.listdir(tmp_path / "c"))
    with pytest.raises(FormatError):
        load_collection(tmp_path)
