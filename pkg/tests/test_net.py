import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amend.data import MotionMode, NormalizationParams, SynthSpec, TrajectorySample, canonicalize, fit_normalization, synthesize_dataset
from amend.net import (
    Batch,
    ConfigError,
    Dense,
    EwtaSchedule,
    NetConfig,
    NumericError,
    Params,
    PredictionSet,
    TrainOptions,
    backward,
    decode,
    encode,
    evaluate_min_ade,
    ewta_loss,
    flatten_grads,
    init_params,
    load_params,
    make_batch,
    predict_batch,
    predictor_loss_and_grad,
    save_params,
    train,
)

from .helpers import central_difference, max_relative_error


def canon(hist, fut=None, neighbors=(), scale=1.0, sample_id=0):
    hist = np.asarray(hist, dtype=float)
    nb = np.asarray(neighbors, dtype=float).reshape(-1, len(hist), 2)
    raw = TrajectorySample(hist, fut, nb, np.ones(nb.shape[:2], dtype=bool), sample_id)
    return canonicalize(raw, NormalizationParams(scale))


def tiny_config(**kw):
    base = dict(t_hist=4, t_pred=3, neighbor_feature_dim=3, encoder_hidden_dims=(5,), latent_dim=4,
                decoder_hidden_dims=(5,), k_max=4, n_max=3)
    base.update(kw)
    return NetConfig(**base)


def tiny_samples(cfg, n=6, seed=0, sigma=0.05):
    spec = SynthSpec(
        modes=(MotionMode("a", 0.5, (0.5, 1.5), 0.4), MotionMode("b", 0.5, (0.5, 1.5), -0.3)),
        noise_sigma=sigma, n_samples=n, t_hist=cfg.t_hist, t_pred=cfg.t_pred, max_neighbors=4,
    )
    raw = synthesize_dataset(spec, seed=seed)
    params = fit_normalization(raw)
    return [canonicalize(s, params) for s in raw]


# ------------------------------------------------------------------ encode

def test_zero_params_give_zero_latent():
    cfg = tiny_config()
    p = init_params(cfg, 0)
    zero = p.with_arrays([np.zeros_like(a) for a in p.arrays()])
    s = tiny_samples(cfg, 1)[0]
    np.testing.assert_array_equal(encode(s, zero), np.zeros(cfg.latent_dim))


def test_encode_deterministic():
    cfg = tiny_config()
    p = init_params(cfg, 3)
    s = tiny_samples(cfg, 1)[0]
    np.testing.assert_array_equal(encode(s, p), encode(s, p))


def test_encode_hand_computed():
    # 2 history inputs (+1 pooled neighbor slot, empty) -> 2 hidden -> 1 latent
    cfg = NetConfig(t_hist=2, t_pred=1, neighbor_feature_dim=1, encoder_hidden_dims=(2,), latent_dim=1,
                    decoder_hidden_dims=(1,), k_max=1, n_max=1)
    w1 = [[0.3, -0.7, 5.0], [1.1, 0.4, -5.0]]
    b1 = [0.05, -0.2]
    w2 = [[0.9, -1.3]]
    b2 = [0.1]
    p = init_params(cfg, 0)
    layers = list(p.layers)
    layers[1] = Dense(np.array(w1), np.array(b1))
    layers[2] = Dense(np.array(w2), np.array(b2))
    p = Params(cfg, tuple(layers))
    s = canon([[0.0, 0.0], [0.0, 0.5]])
    x = [0.0, 0.5, 0.0]
    h = [math.tanh(sum(w * xi for w, xi in zip(row, x)) + b) for row, b in zip(w1, b1)]
    z = math.tanh(w2[0][0] * h[0] + w2[0][1] * h[1] + b2[0])
    assert abs(encode(s, p)[0] - z) < 1e-12


def test_neighbor_max_pool_ignores_masked_and_all_invalid_is_zero():
    cfg = tiny_config(neighbor_feature_dim=2)
    p = init_params(cfg, 1)
    s = tiny_samples(cfg, 1)[0]
    b = make_batch([s], cfg)
    empty = Batch(b.hist, b.nbr * 0 + 7.0, np.zeros_like(b.nbr_mask), b.future)
    none = Batch(b.hist, np.zeros_like(b.nbr), np.zeros_like(b.nbr_mask), b.future)
    from amend.net import encode_batch
    np.testing.assert_array_equal(encode_batch(p, empty), encode_batch(p, none))


def test_encode_shape_mismatch():
    cfg = tiny_config()
    s = tiny_samples(tiny_config(t_hist=5), 1)[0]
    with pytest.raises(ConfigError):
        encode(s, init_params(cfg, 0))


# ------------------------------------------------------------------ decode

def test_zero_decoder_output_stays_at_origin():
    cfg = tiny_config()
    p = init_params(cfg, 0)
    head = p.layers[-1]
    p = Params(cfg, p.layers[:-1] + (Dense(np.zeros_like(head.weights), np.zeros_like(head.bias), "linear"),))
    pred = decode(np.ones(cfg.latent_dim), p, K=3)
    assert pred.K == 3
    np.testing.assert_array_equal(pred.hypotheses, np.zeros((3, cfg.t_pred, 2)))


def test_constant_displacement_accumulates():
    cfg = tiny_config(t_pred=5)
    p = init_params(cfg, 0)
    head = p.layers[-1]
    bias = np.tile([0.0, 1.0], cfg.k_max * cfg.t_pred)
    p = Params(cfg, p.layers[:-1] + (Dense(np.zeros_like(head.weights), bias, "linear"),))
    pred = decode(np.zeros(cfg.latent_dim), p)
    expected = np.array([[0.0, t] for t in range(1, 6)])
    for h in pred.hypotheses:
        np.testing.assert_array_equal(h, expected)


def test_decode_hand_computed():
    cfg = NetConfig(t_hist=2, t_pred=2, neighbor_feature_dim=1, encoder_hidden_dims=(1,), latent_dim=1,
                    decoder_hidden_dims=(1,), k_max=2, n_max=1)
    p = init_params(cfg, 0)
    tw, tb = 0.8, -0.1
    hw = [0.5, -1.0, 2.0, 0.25, -0.3, 0.6, 1.5, -2.0]
    hb = [0.1, 0.0, -0.1, 0.2, 0.0, 0.3, 0.05, -0.05]
    layers = p.layers[:-2] + (
        Dense(np.array([[tw]]), np.array([tb])),
        Dense(np.array(hw)[:, None], np.array(hb), "linear"),
    )
    p = Params(cfg, layers)
    z = 0.7
    h = math.tanh(tw * z + tb)
    d = [w * h + b for w, b in zip(hw, hb)]
    expected = [
        [[d[0], d[1]], [d[0] + d[2], d[1] + d[3]]],
        [[d[4], d[5]], [d[4] + d[6], d[5] + d[7]]],
    ]
    np.testing.assert_allclose(decode(np.array([z]), p).hypotheses, expected, atol=1e-12, rtol=0)


def test_decode_k_out_of_range():
    cfg = tiny_config()
    with pytest.raises(ConfigError):
        decode(np.zeros(cfg.latent_dim), init_params(cfg, 0), K=cfg.k_max + 1)


# -------------------------------------------------------------------- loss

def test_ewta_exact_hypothesis_k1_is_zero():
    truth = np.arange(6.0).reshape(3, 2)
    pred = PredictionSet(np.stack([truth + 1.0, truth, truth - 2.0]))
    assert ewta_loss(pred, truth, 1) == 0.0


def test_ewta_sort_and_average():
    truth = np.zeros((4, 2))
    # constant offsets of length 2, 1, 3 -> per-hypothesis errors 4, 1, 9
    pred = PredictionSet(np.stack([np.full((4, 2), [2.0, 0.0]), np.full((4, 2), [0.0, 1.0]), np.full((4, 2), [3.0, 0.0])]))
    errs = sorted([4.0, 1.0, 9.0])
    assert ewta_loss(pred, truth, 2) == pytest.approx(sum(errs[:2]) / 2, abs=1e-15)
    assert ewta_loss(pred, truth, 3) == pytest.approx(np.mean([4.0, 1.0, 9.0]), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), K=st.integers(1, 8), k=st.integers(1, 8))
def test_ewta_k1_is_smallest(seed, K, k):
    rng = np.random.default_rng(seed)
    pred = PredictionSet(rng.normal(size=(K, 5, 2)))
    truth = rng.normal(size=(5, 2))
    k = min(k, K)
    assert ewta_loss(pred, truth, 1) <= ewta_loss(pred, truth, k)


# ---------------------------------------------------------------- gradients

def _loss_fn(params, batch, k, w):
    return lambda arrays: predictor_loss_and_grad(params.with_arrays(arrays), batch, k, w)[0]


@pytest.mark.parametrize("trial", range(20))
def test_gradient_matches_finite_differences(trial):
    rng = np.random.default_rng(trial)
    cfg = tiny_config(
        t_hist=int(rng.integers(2, 5)), t_pred=int(rng.integers(1, 4)),
        neighbor_feature_dim=int(rng.integers(1, 4)), encoder_hidden_dims=(int(rng.integers(2, 5)),),
        latent_dim=int(rng.integers(1, 4)), decoder_hidden_dims=(int(rng.integers(2, 5)),),
        k_max=int(rng.integers(1, 5)), n_max=int(rng.integers(1, 4)),
    )
    params = init_params(cfg, trial)
    batch = make_batch(tiny_samples(cfg, 4, seed=trial), cfg)
    k = int(rng.integers(1, cfg.k_max + 1))
    w = rng.uniform(0.2, 1.8, size=len(batch))
    _, grads = predictor_loss_and_grad(params, batch, k, w)
    numeric = central_difference(_loss_fn(params, batch, k, w), params.arrays(), h=1e-5)
    assert max_relative_error(flatten_grads(grads), numeric) < 1e-4


def test_zero_loss_gives_zero_gradient():
    cfg = tiny_config()
    s = tiny_samples(cfg, 1)[0]
    p = init_params(cfg, 0)
    head = p.layers[-1]
    disp = np.diff(np.vstack([[0.0, 0.0], s.ego_future]), axis=0).ravel()
    bias = np.tile(disp, cfg.k_max) + np.repeat(np.arange(cfg.k_max), disp.size)  # only hypothesis 0 exact
    p = Params(cfg, p.layers[:-1] + (Dense(np.zeros_like(head.weights), bias, "linear"),))
    grads = backward(s, s.ego_future, p, k=1)
    assert all(not gw.any() and not gb.any() for gw, gb in grads)


def test_non_winning_heads_get_exactly_zero_gradient():
    cfg = tiny_config(k_max=5)
    p = init_params(cfg, 2)
    s = tiny_samples(cfg, 1)[0]
    batch = make_batch([s], cfg)
    hyps = predict_batch(p, batch)[0]
    errs = np.mean(np.sum((hyps - s.ego_future) ** 2, axis=-1), axis=-1)
    winners = set(np.argsort(errs, kind="stable")[:2])
    gw, gb = backward(s, s.ego_future, p, k=2)[-1]
    block = cfg.t_pred * 2
    for h in range(cfg.k_max):
        rows = slice(h * block, (h + 1) * block)
        if h in winners:
            assert np.abs(gw[rows]).sum() > 0
        else:
            assert not gw[rows].any() and not gb[rows].any()


def test_non_finite_weights_raise_with_layer_index():
    cfg = tiny_config()
    p = init_params(cfg, 0)
    arrays = p.arrays()
    arrays[2][0, 0] = np.nan  # first encoder layer (index 1)
    batch = make_batch(tiny_samples(cfg, 2), cfg)
    with pytest.raises(NumericError) as err:
        predictor_loss_and_grad(p.with_arrays(arrays), batch, 1)
    assert err.value.layer == 1


# ----------------------------------------------------------------- training

def test_schedule_shrinks_to_one():
    sched = EwtaSchedule(20, 0.8, 5)
    ks = []
    for _ in range(200):
        sched.step(1.0)
        ks.append(sched.k_current)
    assert ks[-1] == 1
    assert all(a >= b for a, b in zip(ks, ks[1:]))


def test_schedule_waits_for_patience():
    sched = EwtaSchedule(20, 0.8, 3)
    sched.step(1.0)
    sched.step(1.0)
    sched.step(1.0)
    assert sched.k_current == 20
    sched.step(1.0)
    assert sched.k_current == 16


def _single_mode(n, seed=0, speed=(1.2, 1.2)):
    spec = SynthSpec(modes=(MotionMode("turn", 1.0, speed, 0.3),), n_samples=n, max_neighbors=2)
    raw = synthesize_dataset(spec, seed=seed)
    params = fit_normalization(raw[: n * 3 // 4])
    return [canonicalize(s, params) for s in raw]


def test_train_fits_noiseless_single_mode():
    data = _single_mode(1200)
    cfg = NetConfig()
    result = train(data[:1000], data[1000:], cfg, seed=0, epochs=100)
    assert min(result.val_history) < 0.05
    assert evaluate_min_ade(result.params, make_batch(data[1000:], cfg)) == pytest.approx(min(result.val_history))


def test_train_improves_on_initialization():
    data = _single_mode(160, seed=5, speed=(0.8, 1.6))
    cfg = tiny_config(t_hist=8, t_pred=12, k_max=20, n_max=8)
    batch = make_batch(data, cfg)
    result = train(batch, None, cfg, seed=1, epochs=15)
    assert evaluate_min_ade(result.params, batch) <= evaluate_min_ade(init_params(cfg, 1), batch)


def test_train_unit_weights_match_default_and_deterministic():
    cfg = tiny_config()
    data = tiny_samples(cfg, 40, seed=3)
    opts = TrainOptions(epochs=12, batch_size=16, ewta_patience=1)
    a = train(data[:30], data[30:], cfg, 7, options=opts)
    b = train(data[:30], data[30:], cfg, 7, options=opts, loss_weights=np.ones(30))
    c = train(data[:30], data[30:], cfg, 7, options=opts)
    for x, y, z in zip(a.params.arrays(), b.params.arrays(), c.params.arrays()):
        assert x.tobytes() == y.tobytes() == z.tobytes()
    assert a.k_history == b.k_history
    assert all(p >= q for p, q in zip(a.k_history, a.k_history[1:])) and a.k_history[-1] >= 1


def test_train_rejects_empty():
    with pytest.raises(ValueError):
        train([], None, tiny_config(), 0, epochs=1)


def test_train_aborts_on_nan_loss():
    cfg = tiny_config()
    data = tiny_samples(cfg, 8)
    with pytest.raises(NumericError):
        train(data, None, cfg, 0, epochs=2, loss_weights=np.full(8, np.nan))


def test_model_file_round_trip_is_bitwise(tmp_path):
    cfg = tiny_config()
    p = init_params(cfg, 9)
    save_params(p, tmp_path / "m.json")
    q = load_params(tmp_path / "m.json")
    batch = make_batch(tiny_samples(cfg, 5), cfg)
    assert predict_batch(p, batch).tobytes() == predict_batch(q, batch).tobytes()


def test_model_file_shape_mismatch(tmp_path):
    import json

    cfg = tiny_config()
    save_params(init_params(cfg, 0), tmp_path / "m.json")
    d = json.loads((tmp_path / "m.json").read_text())
    d["net_config"]["latent_dim"] = 7
    (tmp_path / "m.json").write_text(json.dumps(d))
    with pytest.raises(ConfigError):
        load_params(tmp_path / "m.json")
