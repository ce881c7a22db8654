import math

import numpy as np
import pytest

from gace import LossConfig, NormConfig, build_model
from gace.net import (AdamState, FrameInputs, Layer, Mlp, adam_step,
                      backward, focal_loss, gace_forward, grad_list,
                      init_mlp, iou_l1_loss, max_pool, mlp_forward,
                      model_params, total_loss)

from _oracles import (fd_gradients, max_rel_error, random_frame_inputs)

SMALL = dict(hidden=16, f_i_dim=8, f_c_dim=6, fusion_hidden=12)


def small_model(seed=0, **overrides):
    cfg = NormConfig()
    kwargs = dict(SMALL)
    kwargs.update(overrides)
    return build_model(cfg, seed=seed, **kwargs), cfg


def test_mlp_forward_zero_weights_bias_only():
    mlp = Mlp([Layer(np.zeros((3, 4)), np.array([1.0, -2.0, 0.5]),
                     "identity")])
    out = mlp_forward(mlp, np.zeros(4))
    np.testing.assert_allclose(out, [1.0, -2.0, 0.5])


def test_mlp_forward_relu_single_layer():
    mlp = Mlp([Layer(np.eye(2), np.zeros(2), "relu")])
    np.testing.assert_allclose(mlp_forward(mlp, np.array([-1.0, 2.0])),
                               [0.0, 2.0])


def test_mlp_forward_matches_straightline_recomputation():
    rng = np.random.default_rng(0)
    mlp = init_mlp(rng, (3, 5, 2), ("relu", "logistic"))
    x = rng.standard_normal(3)
    h = np.maximum(mlp.layers[0].w @ x + mlp.layers[0].b, 0.0)
    expected = 1.0 / (1.0 + np.exp(-(mlp.layers[1].w @ h + mlp.layers[1].b)))
    np.testing.assert_allclose(mlp_forward(mlp, x), expected, atol=1e-12)


def test_mlp_forward_shape_mismatch():
    mlp = Mlp([Layer(np.zeros((2, 3)), np.zeros(2), "relu")])
    with pytest.raises(ValueError):
        mlp_forward(mlp, np.zeros(4))


def test_max_pool():
    np.testing.assert_allclose(max_pool([np.array([1.0, 5.0]),
                                         np.array([3.0, 2.0])]), [3.0, 5.0])
    np.testing.assert_allclose(max_pool([np.array([1.0, 2.0])]), [1.0, 2.0])
    np.testing.assert_array_equal(max_pool([], width=4), np.zeros(4))
    with pytest.raises(ValueError):
        max_pool([])
    rng = np.random.default_rng(1)
    vecs = [rng.standard_normal(6) for _ in range(9)]
    perm = rng.permutation(9)
    np.testing.assert_array_equal(max_pool(vecs),
                                  max_pool([vecs[i] for i in perm]))


def test_forward_single_detection_no_neighbors():
    model, cfg = small_model()
    inputs = FrameInputs(np.random.default_rng(2).uniform(-1, 1,
                                                          (1, cfg.instance_dim)),
                         np.zeros(0, np.int64), np.zeros(0, np.int64),
                         np.zeros(2, np.int64),
                         np.zeros((0, cfg.neighbor_geo_dim)))
    s_hat, v_hat, cache = gace_forward(model, inputs, want_cache=True)
    np.testing.assert_array_equal(cache.f_c, np.zeros((1, model.f_c_dim)))
    assert 0.0 < s_hat[0] < 1.0 and 0.0 < v_hat[0] < 1.0


def test_forward_duplicate_neighbor_idempotent():
    model, cfg = small_model()
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (2, cfg.instance_dim))
    geo = rng.uniform(-1, 1, (1, cfg.neighbor_geo_dim))
    base = FrameInputs(x, np.array([0]), np.array([1]),
                       np.array([0, 1, 1]), geo)
    dup = FrameInputs(x, np.array([0, 0]), np.array([1, 1]),
                      np.array([0, 2, 2]), np.vstack([geo, geo]))
    s1, v1 = gace_forward(model, base)
    s2, v2 = gace_forward(model, dup)
    np.testing.assert_array_equal(s1, s2)
    np.testing.assert_array_equal(v1, v2)


def _permute_inputs(inputs, perm):
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    n = inputs.n
    new_subj_of_pair = inv[inputs.pair_subject]
    order = np.argsort(new_subj_of_pair, kind="stable")
    subject = new_subj_of_pair[order]
    neighbor = inv[inputs.pair_neighbor[order]]
    geo = inputs.pair_geo[order]
    offsets = np.zeros(n + 1, dtype=np.int64)
    for s in subject:
        offsets[s + 1] += 1
    offsets = np.cumsum(offsets)
    return FrameInputs(inputs.x[perm], subject, neighbor, offsets, geo)


def test_forward_permutation_equivariant():
    model, cfg = small_model()
    rng = np.random.default_rng(4)
    inputs = random_frame_inputs(rng, 12, cfg)
    s0, v0 = gace_forward(model, inputs)
    perm = rng.permutation(12)
    s1, v1 = gace_forward(model, _permute_inputs(inputs, perm))
    np.testing.assert_array_equal(s1, s0[perm])
    np.testing.assert_array_equal(v1, v0[perm])


def test_forward_outputs_strictly_inside_unit_interval():
    model, cfg = small_model()
    rng = np.random.default_rng(5)
    for n in (1, 3, 17):
        inputs = random_frame_inputs(rng, n, cfg)
        s_hat, v_hat = gace_forward(model, inputs)
        assert np.all(s_hat > 0) and np.all(s_hat < 1)
        assert np.all(v_hat > 0) and np.all(v_hat < 1)


def test_focal_loss_examples():
    assert focal_loss(0.5, 1, gamma=0.0, alpha=0.5) == pytest.approx(
        0.5 * math.log(2))
    assert focal_loss(1.0 - 1e-7, 1) == pytest.approx(0.0, abs=1e-10)
    expected = 0.25 * 0.1 ** 2 * (-math.log(0.9))
    assert focal_loss(0.9, 1, gamma=2.0, alpha=0.25) == pytest.approx(expected)
    # u = 0 mirrors through p_t
    assert focal_loss(0.1, 0, gamma=2.0, alpha=0.25) == pytest.approx(
        0.75 * 0.1 ** 2 * (-math.log(0.9)))


def test_iou_l1_loss():
    assert iou_l1_loss(0.4, 0.4) == 0.0
    assert iou_l1_loss(0.3, 0.8) == pytest.approx(0.5)
    assert iou_l1_loss(0.8, 0.3) == pytest.approx(0.5)


def test_total_loss():
    cfg = LossConfig(lambda_iou=0.0)
    s = np.array([0.9, 0.2])
    u = np.array([1, 0])
    v_hat = np.array([0.5, 0.5])
    v = np.array([0.9, 0.0])
    total, mf, ml = total_loss(s, v_hat, u, v, cfg)
    assert total == pytest.approx(mf)  # lambda 0: pure focal objective
    cfg5 = LossConfig(lambda_iou=0.5)
    total5, mf5, ml5 = total_loss(s, v_hat, u, v, cfg5)
    assert total5 == pytest.approx(mf5 + 0.5 * ml5)
    with pytest.raises(ValueError):
        total_loss(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), cfg)


def test_total_loss_perfect_prediction_near_zero():
    cfg = LossConfig()
    total, _, _ = total_loss(np.array([1 - 1e-7]), np.array([0.83]),
                             np.array([1]), np.array([0.83]), cfg)
    assert total == pytest.approx(0.0, abs=1e-10)


def test_backward_matches_finite_differences_small_frame():
    model, cfg = small_model(seed=7)
    rng = np.random.default_rng(8)
    inputs = random_frame_inputs(rng, 2, cfg, max_neighbors=1)
    u = np.array([1, 0])
    v = rng.uniform(0, 1, 2)
    loss_cfg = LossConfig()
    grads, _ = backward(model, inputs, u, v, loss_cfg)
    flat = grad_list(grads, model)
    fd = fd_gradients(model, inputs, u, v, loss_cfg)
    for analytic, numeric in zip(flat, fd):
        assert max_rel_error(analytic.reshape(-1), numeric) < 1e-4


def test_backward_gradient_flows_through_neighbor_embeddings():
    model, cfg = small_model(seed=9)
    rng = np.random.default_rng(10)
    inputs = random_frame_inputs(rng, 5, cfg, max_neighbors=4)
    assert inputs.pair_subject.size > 0
    u = rng.integers(0, 2, 5)
    v = rng.uniform(0, 1, 5)
    grads, _ = backward(model, inputs, u, v, LossConfig())
    model.detach_context = True
    grads_detached, _ = backward(model, inputs, u, v, LossConfig())
    model.detach_context = False
    diff = max(np.max(np.abs(a[0] - b[0]))
               for a, b in zip(grads["h_i"], grads_detached["h_i"]))
    assert diff > 0.0  # neighbor embeddings feed the instance net


def test_backward_masked_entry_gradient_zero():
    cfg = NormConfig()
    from gace.features import ablation_mask
    mask = ablation_mask(cfg, stats=False)
    model = build_model(cfg, seed=11, feature_mask=mask, **SMALL)
    rng = np.random.default_rng(12)
    inputs = random_frame_inputs(rng, 4, cfg)
    grads, _ = backward(model, inputs, rng.integers(0, 2, 4),
                        rng.uniform(0, 1, 4), LossConfig())
    masked_cols = np.nonzero(mask == 0)[0]
    np.testing.assert_array_equal(grads["x"][:, masked_cols], 0.0)
    live = np.nonzero(mask == 1)[0]
    assert np.any(grads["x"][:, live] != 0)


def test_backward_saturated_outputs_finite():
    model, cfg = small_model(seed=13)
    # pin the fusion output layer so the logistic saturates past the loss
    # clamp on both heads
    model.h_f.layers[-1].w[...] = 0.0
    model.h_f.layers[-1].b[...] = (30.0, -30.0)
    rng = np.random.default_rng(14)
    inputs = random_frame_inputs(rng, 3, cfg)
    s_hat, v_hat = gace_forward(model, inputs)
    assert np.all(s_hat >= 1 - 1e-7) and np.all(v_hat <= 1e-7)
    grads, (fs, ls, n) = backward(model, inputs, np.array([1, 1, 1]),
                                  np.array([1.0, 1.0, 1.0]), LossConfig())
    assert np.isfinite(fs) and np.isfinite(ls)
    for arr in grad_list(grads, model):
        assert np.all(np.isfinite(arr))


def test_adam_zero_gradient_from_zero_state():
    rng = np.random.default_rng(15)
    params = [rng.standard_normal((3, 4)), rng.standard_normal(3)]
    before = [p.copy() for p in params]
    state = AdamState.init(params)
    adam_step(params, [np.zeros_like(p) for p in params], state, lr=0.1)
    for p, b in zip(params, before):
        np.testing.assert_array_equal(p, b)


def test_adam_single_step_closed_form():
    params = [np.array([1.0, -2.0])]
    g = np.array([0.3, -0.7])
    state = AdamState.init(params)
    adam_step(params, [g], state, lr=0.01)
    # bias correction is exact at t=1: step = lr * g / (|g| + eps)
    expected = np.array([1.0, -2.0]) - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(params[0], expected, rtol=1e-9)


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(16)
        params = [rng.standard_normal((4, 4))]
        state = AdamState.init(params)
        for t in range(25):
            g = [np.sin(params[0] * (t + 1))]
            adam_step(params, g, state, lr=0.05)
        return params[0].tobytes()

    assert run() == run()


def test_loss_decreases_on_separable_toy_set():
    # labels equal a threshold on the score entry, which is an input
    model, cfg = small_model(seed=17)
    rng = np.random.default_rng(18)
    frames = []
    for _ in range(6):
        inputs = random_frame_inputs(rng, 8, cfg, max_neighbors=3)
        u = (inputs.x[:, 8] > 0.0).astype(np.int64)
        v = np.clip(0.5 + 0.4 * inputs.x[:, 8], 0, 1)
        frames.append((inputs, u, v))
    loss_cfg = LossConfig()
    params = model_params(model)
    state = AdamState.init(params)
    losses = []
    for step in range(50):
        acc = [np.zeros_like(p) for p in params]
        total_f, total_l, m = 0.0, 0.0, 0
        for inputs, u, v in frames:
            grads, (fs, ls, n) = backward(model, inputs, u, v, loss_cfg,
                                          scale=1.0)
            for a, g in zip(acc, grad_list(grads, model)):
                a += g
            total_f += fs
            total_l += ls
            m += n
        for a in acc:
            a /= m
        losses.append(total_f / m + loss_cfg.lambda_iou * total_l / m)
        adam_step(params, acc, state, lr=0.01)
    violations = sum(1 for a, b in zip(losses, losses[1:]) if b > a + 1e-12)
    assert violations <= 5
    assert losses[-1] < losses[0]
