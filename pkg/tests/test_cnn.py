import math

import numpy as np
import pytest

from fedgbdt.cnn import (AdamConfig, AdamState, CheckpointFormatError, CnnConfig, CnnParams,
                         HeadVariant, TrainConfig, adam_step, batch_loss, client_update,
                         decode_checkpoint, encode_checkpoint, forward, init_params,
                         loss_and_grad, param_count, pre_activations)
from fedgbdt.data import TaskKind

from oracles import central_difference, scalar_adam

VARIANTS = list(HeadVariant)


def _tiny(c=1, k=1, m=2):
    cfg = CnnConfig(m, k, c)
    p = CnnParams(np.ones((c, m)), np.zeros(c), np.ones(k * c), np.zeros(1))
    return cfg, p


# ---------------------------------------------------------------- forward


def test_forward_examples():
    cfg, p = _tiny()
    assert forward(p, np.array([3.0, 4.0]), cfg) == 7.0
    assert forward(p, np.array([-3.0, -4.0]), cfg) == 0.0
    cfg = CnnConfig(5, 4, 8)
    rnd = init_params(cfg, 3)
    assert forward(rnd, np.zeros(20), cfg) == 0.0


def test_forward_shape_checked():
    cfg, p = _tiny()
    with pytest.raises(ValueError):
        forward(p, np.zeros(3), cfg)


def test_fc_weight_layout():
    # fc_w[(k-1)C + c] weighs channel c of client block k
    cfg = CnnConfig(1, 2, 2)
    p = CnnParams(np.array([[1.0], [2.0]]), np.zeros(2), np.array([1.0, 10.0, 100.0, 1000.0]),
                  np.zeros(1))
    assert forward(p, np.array([1.0, 3.0]), cfg) == 1 * 1 + 2 * 10 + 3 * 100 + 6 * 1000


def test_block_locality():
    cfg = CnnConfig(4, 3, 5)
    p = init_params(cfg, 0)
    rng = np.random.default_rng(0)
    x = rng.normal(size=12)
    base = pre_activations(p, x, cfg)[0]
    for k in range(3):
        y = x.copy()
        y[k * 4:(k + 1) * 4] += rng.normal(size=4)
        after = pre_activations(p, y, cfg)[0]
        for j in range(3):
            if j == k:
                assert not np.array_equal(after[j], base[j])
            else:
                assert np.array_equal(after[j], base[j])


def test_shared_rates():
    cfg = CnnConfig(4, 3, 5)
    p = init_params(cfg, 1)
    block = np.random.default_rng(1).normal(size=4)
    pre = pre_activations(p, np.tile(block, 3), cfg)[0]
    assert np.array_equal(pre[0], pre[1]) and np.array_equal(pre[1], pre[2])


# ---------------------------------------------------------------- gradients


def _fixture(variant, seed):
    rng = np.random.default_rng(seed)
    m, k = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    if variant is HeadVariant.CONV_K3_S1:
        m = max(m, 2)
    cfg = CnnConfig(m, k, int(rng.integers(1, 5)), variant)
    task = "classification" if seed % 2 else "regression"
    while True:
        p = init_params(cfg, seed)
        p = CnnParams(p.conv_w, rng.normal(0, 0.3, p.conv_b.shape), p.fc_w,
                      rng.normal(0, 0.3, 1))
        X = rng.normal(size=(int(rng.integers(1, 7)), cfg.input_width))
        # keep every pre-activation clear of the rectifier kink
        if np.abs(pre_activations(p, X, cfg)).min() > 1e-3:
            break
    y = (rng.random(len(X)) < 0.5).astype(float) if task == "classification" \
        else rng.normal(size=len(X))
    return cfg, p, X, y, task


def _assert_grads_close(analytic, numeric):
    for a, n in zip(analytic.arrays(), numeric):
        err = np.abs(a - n)
        assert (err <= 1e-4 * np.maximum(np.abs(a), np.abs(n)) + 1e-8).all(), (a, n)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("seed", range(8))
def test_gradients_match_finite_differences(variant, seed):
    cfg, p, X, y, task = _fixture(variant, seed)
    loss, grads = loss_and_grad(p, X, y, task, cfg)
    numeric = central_difference(lambda q: loss_and_grad(q, X, y, task, cfg)[0], p.copy())
    _assert_grads_close(grads, numeric)
    assert loss == pytest.approx(batch_loss(TaskKind.parse(task), forward(p, X, cfg), y),
                                 rel=1e-15)


def test_zero_gradient_at_exact_fit():
    cfg = CnnConfig(2, 2, 3)
    p = init_params(cfg, 0)
    p = CnnParams(np.abs(p.conv_w), np.full(3, 0.5), p.fc_w, np.array([0.2]))
    X = np.abs(np.random.default_rng(0).normal(size=(10, 4)))
    y = forward(p, X, cfg)
    loss, grads = loss_and_grad(p, X, y, "regression", cfg)
    assert loss == 0.0
    assert all((g == 0).all() for g in grads.arrays())


def test_uninformative_margin_gives_ln2():
    cfg = CnnConfig(2, 1, 2)
    p = CnnParams(np.zeros((2, 2)), np.zeros(2), np.zeros(2), np.zeros(1))
    X = np.random.default_rng(0).normal(size=(6, 2))
    loss, _ = loss_and_grad(p, X, np.array([0, 1, 0, 1, 0, 1.0]), "classification", cfg)
    assert loss == pytest.approx(math.log(2), abs=1e-15)


# ---------------------------------------------------------------- Adam


def test_adam_zero_grad_is_noop():
    cfg = CnnConfig(3, 2, 4)
    p = init_params(cfg, 0)
    state = AdamState.zeros(p)
    p2, s2 = adam_step(p, state, p.zeros_like(), AdamConfig())
    assert p2 == p and s2.step == 1


def test_adam_first_step_is_alpha_sign():
    cfg = CnnConfig(3, 2, 4)
    p = init_params(cfg, 0)
    g = CnnParams(*(np.random.default_rng(1).normal(size=a.shape) for a in p.arrays()))
    p2, _ = adam_step(p, AdamState.zeros(p), g, AdamConfig(alpha=0.01))
    for a, b, ga in zip(p.arrays(), p2.arrays(), g.arrays()):
        np.testing.assert_allclose(b - a, -0.01 * np.sign(ga), rtol=1e-6)


def test_adam_matches_scalar_reference_on_quadratic():
    # f(w) = sum_i c_i (w_i - t_i)^2 over the four tensors of a 1x1x1 head
    c = np.array([0.5, 2.0, 1.0, 3.0])
    t = np.array([1.0, -2.0, 0.5, 4.0])
    w0 = [0.3, 0.1, -0.7, 2.0]
    adam = AdamConfig()

    def grad_list(w):
        return [2 * ci * (wi - ti) for ci, wi, ti in zip(c, w, t)]

    want = scalar_adam(w0, grad_list, 100, adam.alpha, adam.beta1, adam.beta2, adam.epsilon)
    p = CnnParams(np.array([[w0[0]]]), np.array([w0[1]]), np.array([w0[2]]), np.array([w0[3]]))
    state = AdamState.zeros(p)
    for _ in range(100):
        flat = [float(a.reshape(-1)[0]) for a in p.arrays()]
        g = grad_list(flat)
        grads = CnnParams(np.array([[g[0]]]), np.array([g[1]]), np.array([g[2]]),
                          np.array([g[3]]))
        p, state = adam_step(p, state, grads, adam)
    got = [float(a.reshape(-1)[0]) for a in p.arrays()]
    assert state.step == 100
    for a, b in zip(got, want):
        assert abs(a - b) <= 1e-12


# ---------------------------------------------------------------- init and sizes


def test_init_deterministic_and_scaled():
    cfg = CnnConfig(250, 2, 64)
    a, b = init_params(cfg, 7), init_params(cfg, 7)
    assert a == b
    assert not (init_params(cfg, 8) == a)
    assert a.conv_w.size >= 10_000
    assert abs(a.conv_w.var() / (2 / 250) - 1) < 0.2
    assert abs(a.conv_w.mean()) < 0.01
    assert (a.conv_b == 0).all() and (a.fc_b == 0).all()
    assert a.conv_w.shape == (64, 250) and a.fc_w.shape == (128,)


@pytest.mark.parametrize("m,k,count", [(250, 2, 16193), (100, 5, 6785), (50, 10, 3905)])
def test_interpretable_param_count(m, k, count):
    assert param_count(m, k, 64) == count
    assert init_params(CnnConfig(m, k, 64), 0).size == count


@pytest.mark.parametrize("m,k", [(100, 5), (250, 2), (7, 3)])
def test_ablation_param_counts(m, k):
    c = 64
    w = m * k
    # padded k=3 convolution keeps M*K positions
    assert param_count(m, k, c, "conv_k3_s1") == c * 3 + c + c * w + 1
    assert param_count(m, k, c, "fcnn_2layer_256") == w * 256 + 256 + 256 + 1


def test_reference_ablation_counts():
    assert param_count(100, 5, 64, "conv_k3_s1") == 32257
    assert param_count(100, 5, 64, "fcnn_2layer_256") == 128513


# ---------------------------------------------------------------- checkpoints


@pytest.mark.parametrize("variant", VARIANTS)
def test_checkpoint_round_trip(variant):
    cfg = CnnConfig(4, 3, 5, variant)
    p = init_params(cfg, 2)
    data = encode_checkpoint(p, cfg)
    q, cfg2 = decode_checkpoint(data)
    assert q == p and cfg2 == cfg
    assert len(data) == p.size * 8 + 20 + 36
    assert encode_checkpoint(q, cfg2) == data


def test_checkpoint_corruption():
    cfg = CnnConfig(4, 3, 5)
    data = encode_checkpoint(init_params(cfg, 0), cfg)
    for cut in (0, 3, 19, 25, 60, len(data) - 1):
        with pytest.raises(CheckpointFormatError):
            decode_checkpoint(data[:cut])
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(data + b"\0")


# ---------------------------------------------------------------- client_update


def _matrix(seed, n=40, cfg=CnnConfig(3, 2, 4)):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, cfg.input_width))
    y = X[:, :3].sum(axis=1) * 0.5 - X[:, 3:].sum(axis=1) + rng.normal(0, 0.1, n)
    return cfg, X, y


def test_single_epoch_full_batch_is_one_step():
    cfg, X, y = _matrix(0)
    p = init_params(cfg, 0)
    adam = AdamConfig()
    got = client_update(p, X, y, "regression", cfg, TrainConfig(1, 64), adam, seed=5)
    _, grads = loss_and_grad(p, X, y, "regression", cfg)
    want, _ = adam_step(p, AdamState.zeros(p), grads, adam)
    for a, b in zip(got.arrays(), want.arrays()):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_client_update_deterministic_and_pure():
    cfg, X, y = _matrix(1)
    p = init_params(cfg, 0)
    before = p.copy()
    a = client_update(p, X, y, "regression", cfg, TrainConfig(3, 8), AdamConfig(), seed=11)
    b = client_update(p, X, y, "regression", cfg, TrainConfig(3, 8), AdamConfig(), seed=11)
    assert a == b
    assert p == before
    c = client_update(p, X, y, "regression", cfg, TrainConfig(3, 8), AdamConfig(), seed=12)
    assert not (a == c)


def test_last_short_batch_is_used():
    cfg, X, y = _matrix(2, n=10)
    p = init_params(cfg, 0)
    hist = []
    client_update(p, X, y, "regression", cfg, TrainConfig(1, 4), AdamConfig(), 0, hist)
    # 3 batches (4, 4, 2): every row contributes to the epoch mean
    assert len(hist) == 1 and np.isfinite(hist[0])


@pytest.mark.parametrize("task", ["regression", "classification"])
def test_epoch_loss_mostly_non_increasing(task):
    cfg, X, y = _matrix(3, n=200)
    if task == "classification":
        y = (y > 0).astype(float)
    hist = []
    client_update(init_params(cfg, 0), X, y, task, cfg, TrainConfig(100, 64), AdamConfig(), 0,
                  hist)
    drops = sum(b <= a for a, b in zip(hist, hist[1:]))
    assert drops >= 0.9 * (len(hist) - 1)
