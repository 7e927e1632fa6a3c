import csv

import numpy as np
import pytest

from memflow.errors import ContractError
from memflow.evaluation import (
    AmplitudeScan,
    amplitude,
    bifurcation_scan,
    draw_references,
    ensemble_error,
    eval_rng,
    l2_error_series,
    memory_sweep,
    read_sweep_csv,
    write_ensemble_csv,
    write_error_series_csv,
    write_scan_csv,
    write_sweep_csv,
)
from memflow.network import ModelConfig, NetworkParams, zero_params
from memflow.predictor import PredictionRun
from memflow.systems import generate_trajectories, get_system, integrate
from memflow.trainer import TrainHyper

PEND = get_system("Pendulum")
CSTR = get_system("Cstr")


def test_l2_error_series_by_hand():
    run = PredictionRun(np.zeros((1, 2)), np.array([[3.0, 4.0], [1.0, 0.0]]), 0.1, reference=np.zeros((2, 2)))
    np.testing.assert_array_equal(l2_error_series(run), [5.0, 1.0])
    with pytest.raises(ContractError):
        l2_error_series(PredictionRun(np.zeros((1, 2)), np.zeros((2, 2)), 0.1))


def test_amplitude_by_hand():
    t = np.linspace(0, 10, 10001)
    assert amplitude(0.7 * np.sin(2 * np.pi * t) + 3) == pytest.approx(0.7, rel=1e-6)
    assert amplitude(np.full(50, 2.5)) == 0.0
    with pytest.raises(ContractError):
        amplitude([])


def test_references_follow_eval_streams():
    refs = draw_references(PEND, 0.2, 3, seed=11, dt=0.02)
    for i in range(3):
        rng = eval_rng(11, i)
        x0 = rng.uniform(PEND.state_domain[:, 0], PEND.state_domain[:, 1])
        alpha = rng.uniform(PEND.param_domain[:, 0], PEND.param_domain[:, 1])
        np.testing.assert_array_equal(refs.x0s[i], x0)
        np.testing.assert_array_equal(refs.alphas[i], alpha)
        np.testing.assert_allclose(refs.paths[i], integrate(PEND, x0, alpha, 0.02, 11).states, atol=1e-14)
    # evaluation draws are disjoint from the generation stream of the same seed
    gen = generate_trajectories(PEND, 1, 2, 0.02, seed=11)[0]
    assert not np.array_equal(gen.states[0], refs.x0s[0])


def test_zero_model_ensemble_error_is_drift_of_reference():
    theta = zero_params(ModelConfig(n=2, n_mem=5, dt=0.02))
    report = ensemble_error(theta, PEND, 1.0, 4, seed=2, dt=0.02)
    assert report.n_completed == 4 and report.n_truncated == 0
    for i in range(4):
        rng = eval_rng(2, i)
        x0 = rng.uniform(PEND.state_domain[:, 0], PEND.state_domain[:, 1])
        alpha = rng.uniform(PEND.param_domain[:, 0], PEND.param_domain[:, 1])
        path = integrate(PEND, x0, alpha, 0.02, 51).states
        assert report.errors[i] == pytest.approx(np.linalg.norm(path[50] - path[5]), rel=1e-10)
    assert report.mean_error == pytest.approx(report.errors.mean())
    assert report.times[0] == pytest.approx(6 * 0.02) and report.times[-1] == pytest.approx(1.0)


def test_truncated_runs_are_counted_not_averaged():
    grow = NetworkParams([np.eye(2)], [np.zeros(2)])  # x_next = 2 x
    report = ensemble_error(grow, PEND, 1.0, 3, seed=0, dt=0.02)
    assert report.n_truncated == 3 and np.isnan(report.mean_error)


def test_t_eval_inside_warmup_rejected():
    theta = zero_params(ModelConfig(n=2, n_mem=60))
    with pytest.raises(ContractError, match="warmup"):
        ensemble_error(theta, PEND, 1.0, 2, seed=0, dt=0.02)


def test_report_writers(tmp_path):
    theta = zero_params(ModelConfig(n=2, n_mem=1))
    report = ensemble_error(theta, PEND, 0.1, 2, seed=0, dt=0.02)
    write_ensemble_csv(report, tmp_path / "e.csv")
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0] == ["run", "error", "truncated"] and rows[-1][0] == "mean"
    assert float(rows[-1][1]) == report.mean_error
    write_error_series_csv(report, tmp_path / "s.csv")
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["t", "run_0", "run_1"] and len(rows) == 1 + report.series.shape[1]


def test_reference_bifurcation_scan_brackets_critical_value():
    scan = bifurcation_scan(CSTR, [0.072, 0.085], np.array([0.5, 3.0]))
    assert scan.reference[0, 1] < 0.01
    assert scan.reference[1, 1] > 0.05
    assert scan.predicted is None


def test_scan_with_identity_model_sees_no_oscillation(tmp_path):
    theta = zero_params(ModelConfig(n=2, n_mem=10, dt=0.02))
    scan = bifurcation_scan(CSTR, [0.08, 0.085], np.array([0.5, 3.0]), theta=theta, horizon=2.0, window=(1.0, 2.0))
    np.testing.assert_array_equal(scan.predicted, 0.0)
    write_scan_csv(scan, tmp_path / "b.csv")
    rows = list(csv.reader(open(tmp_path / "b.csv")))
    assert rows[0] == ["da", "ref_amp_x1", "ref_amp_x2", "dnn_amp_x1", "dnn_amp_x2"]
    assert len(rows) == 3


def test_scan_contracts():
    with pytest.raises(ContractError):
        AmplitudeScan(np.array([0.08, 0.07]), np.zeros((2, 2)))
    with pytest.raises(ContractError):
        bifurcation_scan(PEND, [1.0], np.zeros(2))
    with pytest.raises(ContractError):
        bifurcation_scan(CSTR, [0.08], np.array([0.5, 3.0]), horizon=10, window=(5, 20))


def test_memory_sweep_rows_and_csv(tmp_path):
    trajs = generate_trajectories(PEND, 20, 40, 0.02, seed=0)
    hyper = TrainHyper(epochs=1, batch_size=32)
    rows = memory_sweep(trajs, PEND, [1, 3], [1, 2], hyper, 5, 1.0, 2, seed=0, hidden_widths=(4,))
    assert [(r.n_mem, r.n_rec) for r in rows] == [(1, 1), (1, 2), (3, 1), (3, 2)]
    assert all(r.n_completed + r.n_truncated == 2 for r in rows)
    write_sweep_csv(rows, tmp_path / "s.csv")
    back = read_sweep_csv(tmp_path / "s.csv")
    assert [(r.n_mem, r.n_rec, r.n_completed) for r in back] == [(r.n_mem, r.n_rec, r.n_completed) for r in rows]
    for a, b in zip(rows, back):
        assert (np.isnan(a.mean_error) and np.isnan(b.mean_error)) or a.mean_error == b.mean_error
