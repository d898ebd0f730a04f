import csv
import io

import numpy as np
import pytest

from dynaguide import tensor as T
from dynaguide.config import RunConfig
from dynaguide.exceptions import InputError, InvariantError
from dynaguide.network import NetworkParams, forward, init_params
from dynaguide.synthetic import SceneSpec, make_instance
from dynaguide.tensor import Tensor
from dynaguide.trainer import TRACE_COLUMNS, SGDMomentum, refine, sgd_step

CFG = RunConfig(p=8, q=8, iterations=15, min_clusters=1)


@pytest.fixture(scope="module")
def scene():
    image, gt, pseudo, _ = make_instance(SceneSpec(8, 8, 3, 0.05, 2))
    return image, gt, pseudo


def test_zero_iterations_returns_initial_assignment(scene):
    image, _, pseudo = scene
    labels, trace, _ = refine(image, pseudo, CFG.replace(iterations=0))
    np.testing.assert_array_equal(labels, forward(init_params(CFG), image).labels)
    assert len(trace) == 0


def test_zero_learning_rate_freezes(scene):
    image, _, pseudo = scene
    labels, trace, _ = refine(image, pseudo, CFG.replace(iterations=10, learning_rate=0.0))
    np.testing.assert_array_equal(labels, forward(init_params(CFG), image).labels)
    totals = trace.column("total")
    assert len(totals) == 10 and np.all(totals == totals[0])


def _quadratic_step(theta0, lr, momentum, steps):
    params = NetworkParams(CFG, {"theta": Tensor(np.array([theta0]), requires_grad=True)})
    opt = SGDMomentum(params, lr, momentum)
    path = []
    for _ in range(steps):
        with T.Tape() as tape:
            loss = T.total(T.huber(params["theta"], 1e9))  # 0.5 theta^2
        tape.backward(loss)
        opt.step()
        path.append(params["theta"].data[0])
    return path


def test_momentum_recurrence():
    theta, v, expected = 1.0, 0.0, []
    for _ in range(5):
        v = 0.9 * v + theta
        theta = theta - 0.1 * v
        expected.append(theta)
    got = _quadratic_step(1.0, 0.1, 0.9, 5)
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-15)
    assert abs(got[0] - 0.9) < 1e-15 and abs(got[1] - 0.72) < 1e-15


def test_zero_momentum_is_gradient_descent():
    got = _quadratic_step(2.0, 0.25, 0.0, 3)
    np.testing.assert_allclose(got, [1.5, 1.125, 0.84375], atol=1e-15)


def test_zero_gradient_leaves_params():
    params = init_params(CFG)
    before = [t.data.copy() for t in params]
    for t in params:
        t.grad = np.zeros_like(t.data)
    sgd_step(params, {n: np.zeros_like(t.data) for n, t in params.named()}, 0.1, 0.9)
    assert all(np.array_equal(a, t.data) for a, t in zip(before, params))


def test_missing_gradient_rejected():
    params = init_params(CFG)
    params["block1.bias"].grad = None
    with pytest.raises(InvariantError, match="block1.bias"):
        sgd_step(params, {n: np.zeros_like(t.data) for n, t in params.named()}, 0.1, 0.9)


def test_gradients_cleared_after_step():
    params = NetworkParams(CFG, {"w": Tensor(np.ones(2), requires_grad=True)})
    params["w"].grad = np.array([1.0, 2.0])
    sgd_step(params, {"w": np.zeros(2)}, 0.1, 0.9)
    assert np.all(params["w"].grad == 0)


def test_deterministic(scene):
    image, _, pseudo = scene
    a_labels, a, _ = refine(image, pseudo, CFG)
    b_labels, b, _ = refine(image, pseudo, CFG)
    assert np.array_equal(a_labels, b_labels) and a.to_csv() == b.to_csv()


def test_q_active_bounds_and_trace_length(scene):
    image, _, pseudo = scene
    labels, trace, _ = refine(image, pseudo, CFG)
    q = trace.column("q_active")
    assert np.all((q >= 1) & (q <= CFG.q))
    assert len(trace) == CFG.iterations and trace.stop_reason == "iterations"
    assert np.array_equal(trace.labels, labels)


def test_early_stop_fires_at_floor(scene):
    image, _, pseudo = scene
    cfg = CFG.replace(min_clusters=8, iterations=50)
    _, trace, _ = refine(image, pseudo, cfg)
    assert trace.stop_reason == "min_clusters"
    assert trace.records[-1].q_active <= 8 and len(trace) < 50


def test_nan_aborts_naming_iteration(scene):
    image, _, pseudo = scene
    params = init_params(CFG)

    def poison(it, _):
        if it == 3:
            params["classifier.bias"].data[:] = np.nan

    with pytest.raises(InvariantError, match="iteration 4"):
        refine(image, pseudo, CFG, params=params, callback=poison)


def test_guidance_off_has_zero_weight(scene):
    image, _, _ = scene
    _, trace, _ = refine(image, None, CFG.replace(guidance_enabled=False, iterations=5))
    assert all(r.loss.weight_gp == 0.0 and r.loss.l_gp == 0.0 for r in trace.records)


def test_pseudo_checks(scene):
    image, _, pseudo = scene
    with pytest.raises(InputError):
        refine(image, pseudo[:, :-1], CFG)
    bad = pseudo.copy()
    bad[0, 0] = CFG.q
    with pytest.raises(InputError):
        refine(image, bad, CFG)
    with pytest.raises(InputError):
        refine(image * 3, pseudo, CFG)


def test_csv_export(scene, tmp_path):
    image, _, pseudo = scene
    _, trace, _ = refine(image, pseudo, CFG.replace(iterations=3))
    trace.to_csv(tmp_path / "t.csv")
    rows = list(csv.reader(io.StringIO((tmp_path / "t.csv").read_text())))
    assert tuple(rows[0]) == TRACE_COLUMNS and len(rows) == 4
    assert float(rows[1][4]) == trace.records[0].loss.total


def test_loss_decreases_on_scene(scene):
    image, _, pseudo = scene
    _, trace, _ = refine(image, pseudo, CFG.replace(iterations=30))
    totals = trace.column("total")
    assert totals[-1] < totals[0]
