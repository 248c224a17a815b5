import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _grad import numeric_grad, relative_error
from cpcfl.nn import (
    Adam,
    ArchConfig,
    BatchNorm,
    Dense,
    DimensionError,
    ReLU,
    Softmax,
    StateError,
    ZeroNormWarning,
    build_model,
    cosine_similarity,
    cross_entropy,
    cross_entropy_grad,
    backward_layers,
    forward_layers,
    load_checkpoint,
    one_hot,
    save_checkpoint,
    softmax,
)


def jitter_biases(model, rng):
    # zero biases behind an all-dead ReLU layer sit exactly on a kink
    for name, arr in model.parameters().items():
        if name.endswith(".b"):
            arr += rng.uniform(0.05, 0.3, arr.shape)


def small_arch(**kw):
    base = dict(input_dim=5, num_classes=3, encoder_widths=[7, 6], rep_dim=4, seed=3)
    base.update(kw)
    return ArchConfig(**base)


# ---------------------------------------------------------------- forward


def test_zero_weight_dense_gives_zero():
    layer = Dense(4, 3)
    x = np.random.default_rng(0).standard_normal((5, 4))
    out, _ = layer.forward(x, True)
    assert np.all(out == 0)


def test_identity_dense():
    layer = Dense(2, 2)
    layer.params["W"] = np.eye(2)
    out, _ = layer.forward(np.array([[1.0, 2.0]]), False)
    np.testing.assert_array_equal(out, [[1.0, 2.0]])


def _straight_line_mlp(weights, biases, x):
    """Independent loop-based forward pass: dense+ReLU, dense+ReLU, dense+softmax."""
    h = list(x)
    for layer, (w, b) in enumerate(zip(weights, biases)):
        out = []
        for j in range(len(b)):
            acc = b[j]
            for i in range(len(h)):
                acc += h[i] * w[i][j]
            out.append(acc)
        if layer < len(weights) - 1:
            out = [v if v > 0 else 0.0 for v in out]
        h = out
    m = max(h)
    e = [math.exp(v - m) for v in h]
    s = sum(e)
    return [v / s for v in e]


def test_forward_matches_straight_line_oracle():
    model = build_model(small_arch(encoder_widths=[6], rep_dim=4))
    layers = model.components["encoder"] + model.components["classifier"]
    dense = [l for l in layers if l.kind == "dense"]
    assert len(dense) == 3
    x = np.random.default_rng(42).standard_normal((4, 5))
    got = model.forward("encoder+classifier", x, "eval")
    for row, xi in zip(got, x):
        ref = _straight_line_mlp(
            [d.params["W"].tolist() for d in dense], [d.params["b"].tolist() for d in dense], xi.tolist()
        )
        assert np.max(np.abs(row - np.array(ref))) < 1e-12


def test_forward_dimension_error_names_layer():
    model = build_model(small_arch())
    with pytest.raises(DimensionError, match=r"encoder\[0\]"):
        model.forward("encoder", np.zeros((2, 9)))


def test_eval_forward_does_not_record_tape():
    model = build_model(small_arch())
    model.forward("encoder+classifier", np.zeros((2, 5)), "eval")
    with pytest.raises(StateError):
        model.backward(np.zeros((2, 3)))


def test_backward_without_forward_is_state_error():
    with pytest.raises(StateError):
        build_model(small_arch()).backward(np.zeros((1, 3)))


# ---------------------------------------------------------------- backward


def test_zero_upstream_gradient_gives_zero_param_grads():
    model = build_model(small_arch(ssl="byol"))
    x = np.random.default_rng(1).standard_normal((6, 5))
    out = model.forward("encoder+projector+predictor", x, "train")
    grads = model.backward(np.zeros_like(out))
    assert grads and all(np.all(g == 0) for g in grads.values())


def test_single_dense_scalar_output_finite_difference():
    rng = np.random.default_rng(2)
    layer = Dense(4, 1, rng)
    x = rng.standard_normal((3, 4))

    def f():
        return float(layer.forward(x, True)[0].sum())

    _, cache = layer.forward(x, True)
    _, grads = layer.backward(cache, np.ones((3, 1)))
    for key in ("W", "b"):
        assert relative_error(grads[key], numeric_grad(f, layer.params[key])) < 1e-6


LAYER_CASES = {
    "dense": lambda rng: [Dense(4, 3, rng)],
    "relu": lambda rng: [Dense(4, 3, rng), ReLU(3)],
    "batchnorm": lambda rng: [Dense(4, 3, rng), BatchNorm(3)],
    "softmax": lambda rng: [Dense(4, 3, rng), Softmax(3)],
}


@pytest.mark.parametrize("kind", sorted(LAYER_CASES))
def test_layer_gradients_match_finite_differences(kind):
    for trial in range(20):
        rng = np.random.default_rng([7, trial])
        layers = LAYER_CASES[kind](rng)
        for layer in layers:
            if layer.kind == "batchnorm":
                layer.params["gamma"] = rng.uniform(0.5, 1.5, 3)
                layer.params["beta"] = rng.standard_normal(3)
        x = rng.standard_normal((5, 4))
        weights = rng.standard_normal((5, 3))

        def f():
            out, _ = forward_layers(layers, x, True)
            return float((out * weights).sum())

        out, caches = forward_layers(layers, x, True)
        gx, grads = backward_layers(layers, caches, weights)
        assert relative_error(gx, numeric_grad(f, x)) < 1e-5
        for layer, g in zip(layers, grads):
            for key, arr in layer.params.items():
                assert relative_error(g[key], numeric_grad(f, arr)) < 1e-5, (kind, key, trial)


def test_cross_entropy_gradient_through_softmax_head():
    for trial in range(20):
        rng = np.random.default_rng([11, trial])
        model = build_model(small_arch(seed=trial))
        jitter_biases(model, rng)
        x = rng.standard_normal((6, 5))
        y = one_hot(rng.integers(0, 3, 6), 3)

        def f():
            return cross_entropy(model.forward("encoder+classifier", x, "train"), y)

        probs = model.forward("encoder+classifier", x, "train")
        grads = model.backward(cross_entropy_grad(probs, y))
        for name, arr in model.parameters(["encoder", "classifier"]).items():
            assert relative_error(grads[name], numeric_grad(f, arr)) < 1e-5, name


# ---------------------------------------------------------------- softmax / batchnorm properties


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_softmax_rows_sum_to_one_and_shift_invariant(seed, shift):
    logits = np.random.default_rng(seed).standard_normal((4, 6)) * 5
    p = softmax(logits)
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-12)
    np.testing.assert_allclose(softmax(logits + shift), p, atol=1e-12)


def test_batchnorm_train_mode_normalizes():
    bn = BatchNorm(4)
    # eps=1e-5 shrinks the variance by eps/var, so use var ~ 25
    x = np.random.default_rng(0).standard_normal((32, 4)) * 5 + 7
    x = (x - x.mean(axis=0)) / x.std(axis=0) * 5 + 7
    out, _ = bn.forward(x, True)
    assert np.all(np.abs(out.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(out.var(axis=0) - 1) < 1e-6)


def test_batchnorm_eval_mode_is_fixed_affine_map():
    bn = BatchNorm(3)
    bn.buffers["running_mean"] = np.array([1.0, 2.0, 3.0])
    bn.buffers["running_var"] = np.array([4.0, 1.0, 0.25])
    bn.params["gamma"] = np.array([2.0, 1.0, 0.5])
    x = np.random.default_rng(1).standard_normal((5, 3))
    a, _ = bn.forward(x, False)
    b, _ = bn.forward(x, False)
    np.testing.assert_array_equal(a, b)
    scale = bn.params["gamma"] / np.sqrt(bn.buffers["running_var"] + 1e-5)
    np.testing.assert_allclose(a, (x - bn.buffers["running_mean"]) * scale, atol=1e-12)


def test_batchnorm_running_stats_momentum():
    bn = BatchNorm(2)
    x = np.array([[0.0, 2.0], [2.0, 4.0]])
    bn.forward(x, True)
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * np.array([1.0, 3.0]))
    np.testing.assert_allclose(bn.buffers["running_var"], 0.9 + 0.1 * np.array([2.0, 2.0]))


# ---------------------------------------------------------------- losses


def test_cross_entropy_perfect_prediction_is_zero():
    y = one_hot([0, 2], 3)
    assert cross_entropy(y, y) == 0.0


def test_cross_entropy_uniform():
    probs = np.full((2, 10), 0.1)
    assert cross_entropy(probs, one_hot([3, 7], 10)) == pytest.approx(math.log(10), abs=1e-12)
    assert cross_entropy(probs, one_hot([3, 7], 10)) == pytest.approx(2.302585, abs=1e-6)


def test_cross_entropy_hand_value():
    assert cross_entropy([[0.7, 0.2, 0.1]], [[1, 0, 0]]) == pytest.approx(-math.log(0.7), abs=1e-12)
    assert cross_entropy([[0.7, 0.2, 0.1]], [[1, 0, 0]]) == pytest.approx(0.356675, abs=1e-6)


def test_cross_entropy_floor_keeps_loss_finite():
    assert cross_entropy([[1.0, 0.0]], [[0, 1]]) == pytest.approx(-math.log(1e-12))


def test_cross_entropy_rejects_bad_rows():
    with pytest.raises(ValueError):
        cross_entropy([[0.5, 0.4]], [[1, 0]])
    with pytest.raises(ValueError):
        cross_entropy([[0.5, 0.5]], [[1, 1]])


def test_cosine_similarity_cases():
    v = np.array([0.3, -2.0, 5.0])
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 0], [1, 1]) == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    with pytest.raises(DimensionError):
        cosine_similarity([1, 0], [1, 0, 0])


def test_cosine_similarity_zero_norm_flags_and_returns_zero():
    with pytest.warns(ZeroNormWarning):
        assert cosine_similarity([0, 0], [1, 2]) == 0.0


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    before = p["w"].copy()
    opt = Adam(1e-3)
    for _ in range(5):
        opt.step(p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], before)


def test_adam_first_step_hand_evaluation():
    g = np.array([0.5, -3.0, 1e-3])
    p = {"w": np.zeros(3)}
    Adam(1e-3).step(p, {"w": g})
    # m_hat = g, v_hat = g^2  ->  step = lr * g / (|g| + eps)
    expected = -1e-3 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p["w"], expected, rtol=0, atol=1e-18)
    assert np.all(np.abs(np.abs(p["w"]) - 1e-3) < 1e-3 * 1e-5)


def test_adam_constant_gradient_step_approaches_lr():
    # closed form: m_hat = g and v_hat = g^2 for every t, so each step is lr*g/(|g|+eps)
    g = 0.37
    p = {"w": np.array([0.0])}
    opt = Adam(1e-3)
    prev = 0.0
    for t in range(1, 201):
        opt.step(p, {"w": np.array([g])})
        step = prev - p["w"][0]
        assert step == pytest.approx(1e-3 * g / (g + 1e-8), rel=1e-9)
        prev = p["w"][0]


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        Adam().step({"w": np.zeros(2)}, {"w": np.zeros(3)})


# ---------------------------------------------------------------- build_model / checkpoint


def test_default_head_is_single_dense_softmax():
    model = build_model(ArchConfig(input_dim=8, num_classes=10))
    kinds = [l.kind for l in model.components["classifier"]]
    assert kinds == ["dense", "softmax"]
    assert model.components["classifier"][0].out_dim == 10


def test_deeper_heads_add_hidden_relu_layers():
    for head, depth in [("c-1", 1), ("c-2", 2), ("c-3", 3)]:
        kinds = [l.kind for l in build_model(ArchConfig(input_dim=8, num_classes=10, head=head)).components["classifier"]]
        assert kinds == ["dense", "relu"] * depth + ["dense", "softmax"]


def test_encoder_layers_all_relu():
    kinds = [l.kind for l in build_model(ArchConfig(input_dim=8, num_classes=4)).components["encoder"]]
    assert kinds == ["dense", "relu"] * 3


def test_build_model_is_deterministic():
    a = build_model(small_arch(ssl="byol"))
    b = build_model(small_arch(ssl="byol"))
    for (na, xa), (nb, xb) in zip(a.state().items(), b.state().items()):
        assert na == nb and xa.tobytes() == xb.tobytes()
    x = np.random.default_rng(0).standard_normal((3, 5))
    assert a.forward("encoder+classifier", x).tobytes() == b.forward("encoder+classifier", x).tobytes()


def test_momentum_copies_only_for_byol():
    assert build_model(small_arch(ssl="byol")).has("momentum_encoder")
    for ssl in ("none", "simclr", "simsiam"):
        assert not build_model(small_arch(ssl=ssl)).has("momentum_encoder")
    m = build_model(small_arch(ssl="byol"))
    for a, b in zip(m.parameters(["encoder", "projector"]).values(),
                    m.parameters(["momentum_encoder", "momentum_projector"]).values()):
        assert a.shape == b.shape


def test_build_model_rejects_nonpositive_dims():
    with pytest.raises(ValueError):
        build_model(small_arch(rep_dim=0))
    with pytest.raises(ValueError):
        build_model(small_arch(encoder_widths=[4, -1]))


def test_checkpoint_round_trip_bitwise(tmp_path):
    model = build_model(small_arch(ssl="byol", head="c-2"))
    model.forward("encoder+projector", np.random.default_rng(0).standard_normal((4, 5)), "train")
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.arch == model.arch
    assert list(loaded.state()) == list(model.state())
    for a, b in zip(model.state().values(), loaded.state().values()):
        assert a.tobytes() == b.tobytes()
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_of_encoder_only_model(tmp_path):
    enc = build_model(small_arch()).subset(["encoder"])
    save_checkpoint(enc, tmp_path / "e.ckpt")
    loaded = load_checkpoint(tmp_path / "e.ckpt")
    assert list(loaded.components) == ["encoder"]


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(bad)
