import numpy as np
import pytest

from difs.core import SeededRng
from difs.denoiser import (
    AdamState,
    adam_step,
    forward,
    init_params,
    load_checkpoint,
    loss_and_grad,
    loss_and_grad_fixed,
    save_checkpoint,
    time_embed,
    train,
)
from difs.diffusion import make_schedule


@pytest.fixture
def schedule():
    return make_schedule()


def test_init_shapes_and_zero_biases():
    p = init_params(2, [256, 256], SeededRng(0))
    assert [W.shape for W in p.weights] == [(50, 256), (256, 256), (256, 2)]
    assert all(np.all(b == 0) for b in p.biases)


def test_init_deterministic():
    a = init_params(3, [8], SeededRng(11))
    b = init_params(3, [8], SeededRng(11))
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays, b.arrays))


def test_init_errors():
    with pytest.raises(ValueError):
        init_params(2, [], SeededRng(0))
    with pytest.raises(ValueError):
        init_params(0, [4], SeededRng(0))


def test_time_embed_properties():
    e = time_embed(17, 100, 32)
    assert e.shape == (32,)
    assert np.array_equal(e, time_embed(17, 100, 32))
    assert np.all(np.abs(e) <= 1.0)
    with pytest.raises(ValueError):
        time_embed(3, 100, 31)
    with pytest.raises(ValueError):
        time_embed(0, 100, 32)
    with pytest.raises(ValueError):
        time_embed(101, 100, 32)


def test_time_embed_at_zero_step():
    from difs.denoiser import _frequencies, _sinusoid

    e = _sinusoid(np.array(0.0), _frequencies(32))
    assert np.all(e[:16] == 0.0) and np.all(e[16:] == 1.0)


def test_zero_network_outputs_zero():
    p = init_params(2, [16, 16], SeededRng(0))
    for a in p.arrays:
        a[...] = 0.0
    assert np.all(forward(p, np.array([0.3, -1.2]), 5, 0.7) == 0.0)


def test_forward_deterministic_and_finite():
    p = init_params(4, [32, 32], SeededRng(1))
    rng = np.random.default_rng(0)
    x = rng.normal(size=(64, 4))
    x *= 10.0 / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 10.0)
    k = rng.integers(1, 101, 64)
    r = rng.normal(size=64)
    out = forward(p, x, k, r)
    assert np.all(np.isfinite(out))
    assert np.array_equal(out, forward(p, x, k, r))


def test_forward_rejects_bad_input():
    p = init_params(2, [8], SeededRng(0))
    with pytest.raises(ValueError):
        forward(p, np.zeros(3), 1, 0.0)
    with pytest.raises(ValueError):
        forward(p, np.array([np.nan, 0.0]), 1, 0.0)


def test_forward_small_perturbation_small_change():
    p = init_params(3, [64, 64], SeededRng(2))
    x = np.array([0.5, -0.2, 1.0])
    d = np.array([1.0, -1.0, 0.5])
    d *= 1e-6 / np.linalg.norm(d)
    assert np.linalg.norm(forward(p, x + d, 10, 0.3) - forward(p, x, 10, 0.3)) < 1e-2


def test_loss_zero_when_prediction_exact(schedule):
    # With eps = 0 the target is 0, which the zeroed network predicts exactly.
    p = init_params(2, [8], SeededRng(0))
    for a in p.arrays:
        a[...] = 0.0
    x0 = np.array([[0.1, 0.2], [1.0, -1.0]])
    loss, _ = loss_and_grad_fixed(p, x0, np.zeros(2), np.array([3, 50]), np.zeros((2, 2)), schedule)
    assert loss == 0.0


def test_zero_network_expected_loss_is_dimension(schedule):
    # Monte Carlo oracle: E||eps||^2 = dim for eps ~ N(0, I).
    p = init_params(3, [8], SeededRng(0))
    for a in p.arrays:
        a[...] = 0.0
    x0 = np.random.default_rng(0).normal(size=(10_000, 3))
    loss, _ = loss_and_grad(p, x0, np.zeros(10_000), schedule, SeededRng(4))
    assert loss == pytest.approx(3.0, rel=0.05)


def test_loss_rejects_empty_batch(schedule):
    p = init_params(2, [8], SeededRng(0))
    with pytest.raises(ValueError):
        loss_and_grad(p, np.empty((0, 2)), np.empty(0), schedule, SeededRng(0))


def _numeric_grad(p, x0, r, k, eps, schedule, h=1e-5):
    grads = []
    for a in p.arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            lp, _ = loss_and_grad_fixed(p, x0, r, k, eps, schedule)
            a[idx] = old - h
            lm, _ = loss_and_grad_fixed(p, x0, r, k, eps, schedule)
            a[idx] = old
            g[idx] = (lp - lm) / (2 * h)
        grads.append(g)
    return grads


def test_gradient_matches_finite_differences(schedule):
    p = init_params(2, [4, 3], SeededRng(5), time_dim=4, cond_dim=2)
    assert p.n_params() <= 200
    for b in p.biases:
        b[...] = np.random.default_rng(1).normal(size=b.shape) * 0.1
    rng = np.random.default_rng(2)
    x0 = rng.normal(size=(6, 2))
    r = rng.uniform(-1, 2, size=6)
    p.r_lo, p.r_hi = -1.0, 2.0
    k = rng.integers(1, 101, 6)
    eps = rng.normal(size=(6, 2))
    _, analytic = loss_and_grad_fixed(p, x0, r, k, eps, schedule)
    numeric = _numeric_grad(p, x0, r, k, eps, schedule)
    for ga, gn in zip(analytic, numeric):
        denom = np.maximum(np.abs(ga) + np.abs(gn), 1e-8)
        rel = np.abs(ga - gn) / denom
        assert np.all((rel < 1e-4) | (np.abs(ga - gn) < 1e-9)), rel.max()


def test_adam_first_step_moves_by_lr():
    p = init_params(2, [4], SeededRng(0))
    before = [a.copy() for a in p.arrays]
    state = AdamState.zeros_like(p, lr=1e-3)
    grads = [np.full_like(a, 0.37) for a in p.arrays]
    adam_step(p, grads, state)
    for b, a in zip(before, p.arrays):
        ratio = np.abs(a - b) / 1e-3
        assert np.all((ratio >= 0.999) & (ratio <= 1.001))
    assert state.t == 1


def test_adam_zero_gradient_keeps_params():
    p = init_params(2, [4], SeededRng(0))
    before = [a.copy() for a in p.arrays]
    state = AdamState.zeros_like(p)
    adam_step(p, [np.zeros_like(a) for a in p.arrays], state)
    adam_step(p, [np.zeros_like(a) for a in p.arrays], state)
    assert all(np.array_equal(b, a) for b, a in zip(before, p.arrays))
    assert state.t == 2


def test_adam_shape_mismatch():
    p = init_params(2, [4], SeededRng(0))
    with pytest.raises(ValueError):
        adam_step(p, [np.zeros(3)], AdamState.zeros_like(p))


def test_training_decreases_moving_average_loss(schedule):
    p = init_params(2, [64, 64], SeededRng(0))
    state = AdamState.zeros_like(p)
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal([-2, 1], 0.3, (200, 2)), rng.normal([2, 1], 0.3, (200, 2))])
    losses = train(p, state, x, np.zeros(400), schedule, 2000, SeededRng(1), batch_size=64)
    assert np.mean(losses[-200:]) < np.mean(losses[:200])


def test_checkpoint_round_trip(tmp_path, schedule):
    p = init_params(3, [8, 8], SeededRng(9))
    p.r_lo, p.r_hi = -0.5, 2.25
    p.x_scale = np.array([1.0, 2.0, 0.5])
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, p, schedule, {"seed": 9})
    q, sched, prov = load_checkpoint(path)
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays, q.arrays))
    assert (q.r_lo, q.r_hi) == (-0.5, 2.25)
    assert np.array_equal(q.x_scale, p.x_scale)
    assert sched == schedule.to_dict() and prov == {"seed": 9}
    x = np.array([0.1, 0.2, 0.3])
    assert np.array_equal(forward(p, x, 4, 0.1), forward(q, x, 4, 0.1))
