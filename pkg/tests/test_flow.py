import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viewshed_reg.errors import ConfigurationError, ContractError
from viewshed_reg.flow import (DIM, FlowModel, FlowTrainConfig, Mlp, create_flow, flow_forward,
                               flow_inverse, flow_sample, log_prob, mlp_backward, mlp_forward,
                               nll_and_grad, train_flow)

LOG_2PI = math.log(2 * math.pi)


def numerical_logdet(model, x, h=1e-5):
    J = np.empty((DIM, DIM))
    for k in range(DIM):
        e = np.zeros(DIM)
        e[k] = h
        J[:, k] = (flow_forward(model, x + e)[0] - flow_forward(model, x - e)[0]) / (2 * h)
    return np.linalg.slogdet(J)[1]


def test_zero_model_is_normalizer():
    m = create_flow(4, 16, zero=True)
    m.shift = np.arange(6.0)
    m.scale = np.linspace(0.5, 2.0, 6)
    x = np.random.default_rng(0).normal(size=(10, 6))
    z, ld = flow_forward(m, x)
    assert np.allclose(z, (x - m.shift) / m.scale)
    assert np.allclose(ld, -np.log(m.scale).sum())
    assert np.allclose(flow_inverse(m, z), x)


def test_log_prob_at_mode_of_identity_model():
    m = create_flow(4, 8, zero=True)
    assert log_prob(m, np.zeros(6)) == pytest.approx(-3 * LOG_2PI, abs=1e-12)
    # the commonly quoted -5.5133 is a rounding of -5.51363
    assert -3 * LOG_2PI == pytest.approx(-5.5133, abs=1e-3)


def test_round_trip_random_model(rng):
    m = create_flow(4, 32, rng=rng, out_scale=1.0)
    x = rng.normal(size=(10_000, 6)) * 2
    assert np.max(np.abs(flow_inverse(m, flow_forward(m, x)[0]) - x)) < 1e-8


def test_logdet_matches_numerical_jacobian(rng):
    m = create_flow(4, 16, rng=rng, out_scale=1.0)
    for x in rng.normal(size=(20, 6)):
        ld = flow_forward(m, x)[1]
        assert abs(ld - numerical_logdet(m, x)) <= 1e-5 * max(1.0, abs(ld))


def test_logdet_is_sum_of_layers(rng):
    m = create_flow(4, 16, rng=rng, out_scale=1.0)
    x = rng.normal(size=(7, 6))
    _, total, parts = flow_forward(m, x, per_layer=True)
    assert np.allclose(total, np.sum(parts, axis=0) - np.log(m.scale).sum(), atol=1e-12)


def test_composition_matches_layerwise(rng):
    m = create_flow(2, 16, rng=rng, out_scale=1.0)
    x = rng.normal(size=(5, 6))
    z, ld = flow_forward(m, x)
    h, acc = x.copy(), np.zeros(5)
    for layer in m.layers:
        h, l = layer.forward(h)
        acc += l
    assert np.allclose(h, z, atol=1e-12) and np.allclose(acc, ld, atol=1e-12)


def test_clamp_bounds_per_layer_logdet(rng):
    m = create_flow(4, 16, rng=rng, out_scale=50.0, scale_clamp=2.0)
    _, _, parts = flow_forward(m, rng.normal(size=(100, 6)) * 10, per_layer=True)
    for p in parts:
        assert np.all(np.abs(p) <= 3 * 2.0 + 1e-12)


def test_non_finite_input_rejected():
    m = create_flow(2, 8, zero=True)
    with pytest.raises(ContractError):
        flow_forward(m, np.full(6, np.nan))
    with pytest.raises(ContractError):
        flow_inverse(m, np.array([np.inf, 0, 0, 0, 0, 0]))


def test_log_prob_is_batch_order_invariant(rng):
    m = create_flow(4, 16, rng=rng, out_scale=1.0)
    x = rng.normal(size=(50, 6))
    perm = rng.permutation(50)
    assert np.allclose(log_prob(m, x)[perm], log_prob(m, x[perm]), rtol=1e-13, atol=0)


def test_sample_statistics_of_identity_model():
    m = create_flow(4, 8, zero=True)
    n = 20_000
    s = flow_sample(m, np.random.default_rng(3), n)
    assert np.all(np.abs(s.mean(axis=0)) < 4 / math.sqrt(n))
    assert flow_sample(m, np.random.default_rng(3), 1).shape == (1, 6)
    with pytest.raises(ContractError):
        flow_sample(m, np.random.default_rng(3), 0)


def test_mlp_gradients_match_finite_differences(rng):
    net = Mlp.create([4, 7, 5, 3], rng)
    x = rng.normal(size=(6, 4))
    g_out = rng.normal(size=(6, 3))
    grads, g_in = mlp_backward(net, x, g_out)
    h = 1e-5

    def f():
        return float(np.sum(g_out * mlp_forward(net, x)))

    for p, g in zip(net.parameters(), grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            fp = f()
            p[idx] = old - h
            fm = f()
            p[idx] = old
            fd = (fp - fm) / (2 * h)
            assert abs(fd - g[idx]) <= 1e-4 * max(1e-3, abs(fd), abs(g[idx]))
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        assert abs((fp - fm) / (2 * h) - g_in[idx]) < 1e-6


def test_mlp_zero_input_zero_bias_gives_zero():
    net = Mlp.create([3, 5, 2], np.random.default_rng(0))
    assert np.all(mlp_forward(net, np.zeros((4, 3))) == 0.0)
    grads, g_in = mlp_backward(net, np.ones((2, 3)), np.zeros((2, 2)))
    assert all(np.all(g == 0) for g in grads) and np.all(g_in == 0)


def test_mlp_shape_mismatch():
    net = Mlp.create([3, 5, 2], np.random.default_rng(0))
    with pytest.raises(ContractError):
        mlp_forward(net, np.zeros((2, 4)))
    with pytest.raises(ContractError):
        Mlp([np.zeros((3, 4)), np.zeros((5, 2))], [np.zeros(4), np.zeros(2)])


def test_training_reduces_heldout_nll_and_is_deterministic():
    rng = np.random.default_rng(0)
    data = np.hstack([rng.normal(size=(2000, 3)) * [1, 0.1, 2], rng.normal(size=(2000, 3))])
    data[:, 3:] /= np.linalg.norm(data[:, 3:], axis=1, keepdims=True)
    cfg = FlowTrainConfig(learning_rate=1e-3, n_iterations=200, hidden=16, batch_size=128, seed=5)
    a = train_flow(data, cfg)
    b = train_flow(data, cfg)
    assert a.info["heldout_logprob_final"] > a.info["heldout_logprob_init"]
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert np.array_equal(pa, pb)


def test_training_loss_windows_mostly_non_increasing():
    # full-batch training so the curve is not dominated by minibatch noise
    rng = np.random.default_rng(1)
    data = rng.normal(size=(1000, 6)) * [1, 2, 0.5, 1, 1, 3] + 1.0
    data[:, 0] += 0.5 * data[:, 1] ** 2
    m = train_flow(data, FlowTrainConfig(learning_rate=1e-3, n_iterations=400, hidden=16,
                                         batch_size=900, seed=2))
    h = np.asarray(m.info["history"])
    ends = h[::10]
    assert np.mean(np.diff(ends) <= 0) >= 0.9


def test_sample_of_plane_trained_model_stays_near_plane():
    rng = np.random.default_rng(2)
    n = 4000
    xy = rng.uniform(-1, 1, size=(n, 2))
    pos = np.column_stack([xy, 0.3 * xy[:, 0] - 0.2 * xy[:, 1] + 0.02 * rng.normal(size=n)])
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    data = np.hstack([pos, d])
    m = train_flow(data, FlowTrainConfig(learning_rate=1e-4, n_iterations=4000, hidden=32,
                                         batch_size=512, seed=0))
    A = np.column_stack([pos[:, :2], np.ones(n)])
    coef, *_ = np.linalg.lstsq(A, pos[:, 2], rcond=None)
    sigma_fit = np.std(pos[:, 2] - A @ coef)
    s = flow_sample(m, np.random.default_rng(9), 2000)[:, :3]
    resid = s[:, 2] - np.column_stack([s[:, :2], np.ones(len(s))]) @ coef
    assert np.mean(np.abs(resid) <= 3 * sigma_fit) >= 0.9


def test_latent_origin_scores_above_median_sample():
    rng = np.random.default_rng(4)
    data = rng.normal(size=(3000, 6)) @ rng.normal(size=(6, 6)) * 0.5
    m = train_flow(data, FlowTrainConfig(learning_rate=1e-3, n_iterations=300, hidden=16,
                                         batch_size=256, seed=1))
    x0 = flow_inverse(m, np.zeros(6))
    samples = flow_sample(m, np.random.default_rng(5), 1000)
    assert log_prob(m, x0) >= np.median(log_prob(m, samples))


def test_density_integrates_to_one():
    # 2-layer model on a narrow 6D Gaussian; importance sampling from a wider Gaussian
    rng = np.random.default_rng(6)
    data = rng.normal(size=(3000, 6)) * 0.5
    m = train_flow(data, FlowTrainConfig(learning_rate=1e-3, n_iterations=200, hidden=8,
                                         batch_size=256, seed=3, n_layers=4))
    q_scale = 1.2
    x = np.random.default_rng(7).normal(size=(200_000, 6)) * q_scale
    log_q = -0.5 * np.sum((x / q_scale) ** 2, axis=1) - 3 * LOG_2PI - 6 * math.log(q_scale)
    est = np.mean(np.exp(log_prob(m, x) - log_q))
    assert est == pytest.approx(1.0, rel=0.05)


def test_dataset_smaller_than_batch_is_config_error():
    with pytest.raises(ConfigurationError):
        train_flow(np.zeros((10, 6)), FlowTrainConfig(batch_size=64))


def test_coupling_mask_must_mix():
    m = create_flow(2, 4, zero=True)
    with pytest.raises(ContractError):
        type(m.layers[0])(np.ones(6, bool), m.layers[0].scale_net, m.layers[0].translate_net)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 100.0))
def test_bijectivity_property(seed, scale):
    rng = np.random.default_rng(seed)
    m = create_flow(4, 8, rng=rng, out_scale=1.0)
    x = rng.normal(size=(64, 6)) * scale
    back = flow_inverse(m, flow_forward(m, x)[0])
    assert np.max(np.abs(back - x)) <= 1e-8 * max(1.0, scale)


def test_nll_and_grad_value_matches_log_prob(rng):
    m = create_flow(2, 8, rng=rng, out_scale=1.0)
    x = rng.normal(size=(32, 6))
    loss, grads = nll_and_grad(m, x)
    assert loss == pytest.approx(-np.mean(log_prob(m, x)), rel=1e-12)
    assert len(grads) == len(m.parameters())
    assert isinstance(m, FlowModel)
