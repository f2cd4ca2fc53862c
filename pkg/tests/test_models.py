import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deeptsc import autodiff as ad
from deeptsc.models import (ModelFormatError, ModelSpec, build_fcn, build_inception, build_mlp,
                            build_model, build_resnet, count_conv_layers, dumps_model,
                            ensemble_predict, forward, load_model, loads_model, predict,
                            receptive_field, save_model)


@pytest.fixture(scope="module")
def fcn():
    return build_model(ModelSpec("fcn", n_classes=3), seed=0)


@pytest.fixture(scope="module")
def inception():
    return build_model(ModelSpec("inception", n_classes=2), seed=1)


def test_fcn_features_have_128_channels(fcn):
    fw = forward(fcn, np.random.default_rng(0).normal(size=(2, 1, 40)))
    assert fw.features.shape == (2, 128, 40)
    assert fcn.params["head.w"].shape == (128, 3)


@pytest.mark.parametrize("t", [50, 150])
def test_fcn_output_shape_is_length_invariant(fcn, t):
    probs = predict(fcn, np.random.default_rng(t).normal(size=(2, 1, t)))
    assert probs.shape == (2, 3)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_build_helpers_check_architecture():
    with pytest.raises(ValueError):
        build_fcn(ModelSpec("resnet"))
    assert build_resnet(ModelSpec("resnet")).spec.architecture == "resnet"
    assert build_inception(ModelSpec("inception", depth=3)).spec.architecture == "inception"
    assert build_mlp(ModelSpec("mlp", input_length=8)).spec.architecture == "mlp"


def test_resnet_has_nine_convolutions_and_projection_shortcuts():
    state = build_model(ModelSpec("resnet", n_classes=4))
    assert count_conv_layers(state) == 9
    # 1 -> 64 and 64 -> 128 need projections, 128 -> 128 does not
    assert "block1.short.w" in state.params and "block2.short.w" in state.params
    assert "block3.short.w" not in state.params


def test_resnet_zero_input_gives_uniform_probabilities():
    state = build_model(ModelSpec("resnet", n_classes=4), seed=3)
    probs = predict(state, np.zeros((3, 1, 20)))
    np.testing.assert_allclose(probs, 0.25, atol=1e-12)


def test_inception_module_width_and_residuals(inception):
    fw = forward(inception, np.random.default_rng(0).normal(size=(2, 1, 64)))
    assert fw.features.shape == (2, 128, 64)
    shortcuts = [k for k in inception.params if k.startswith("res") and k.endswith("short.w")]
    bns = [k for k in inception.running if k.startswith("res") and k.endswith(".mean")]
    # depth 6 -> residual additions after modules 2 and 5; only the first needs a projection
    assert shortcuts == ["res2.short.w"]
    assert bns == ["res2.short_bn.mean"]


def test_inception_residual_count_follows_depth():
    out = forward(build_model(ModelSpec("inception", depth=6, n_filters=4, bottleneck_size=4)),
                  np.ones((1, 1, 12)), grad=True)
    add_nodes = []
    stack, seen = [out.features], set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.op == "add":
            add_nodes.append(node)
        stack.extend(node._parents)
    assert len(add_nodes) == 2


def test_inception_without_bottleneck_is_much_larger():
    with_b = build_model(ModelSpec("inception")).n_params()
    without = build_model(ModelSpec("inception", use_bottleneck=False)).n_params()
    assert without > 1.5 * with_b


def test_inception_param_count_independent_of_length():
    spec = ModelSpec("inception", depth=3)
    assert build_model(spec).n_params() == build_model(ModelSpec("inception", depth=3, input_length=500)).n_params()
    state = build_model(spec)
    for t in (8, 33):
        assert predict(state, np.zeros((1, 1, t))).shape == (1, 2)


def test_inception_depth_warning():
    with pytest.warns(UserWarning, match="multiple of 3"):
        build_model(ModelSpec("inception", depth=4, n_filters=4, bottleneck_size=4))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        build_model(ModelSpec("inception", depth=3, n_filters=4, bottleneck_size=4))


def test_mlp_parameter_count():
    state = build_model(ModelSpec("mlp", input_length=24, n_classes=2))
    assert state.n_params() == 24 * 500 + 500 + 2 * (500 * 500 + 500) + 500 * 2 + 2 == 514_502


def test_mlp_rejects_other_lengths():
    state = build_model(ModelSpec("mlp", input_length=24))
    with pytest.raises(ValueError, match="length"):
        predict(state, np.zeros((1, 1, 25)))
    with pytest.raises(ValueError):
        ModelSpec("mlp")


def test_mlp_dropout_modes():
    state = build_model(ModelSpec("mlp", input_length=10, n_classes=2), seed=2)
    x = np.random.default_rng(0).normal(size=(4, 1, 10))
    np.testing.assert_array_equal(predict(state, x), predict(state, x))
    a = forward(state, x, train=True, rng=np.random.default_rng(5)).output.data
    b = forward(state, x, train=True, rng=np.random.default_rng(5)).output.data
    c = forward(state, x, train=True, rng=np.random.default_rng(6)).output.data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_wrong_dimension_count_is_rejected(fcn):
    with pytest.raises(ValueError, match="dimensions"):
        predict(fcn, np.zeros((1, 2, 10)))


def test_regression_head_returns_raw_outputs():
    state = build_model(ModelSpec("fcn", n_classes=1, head="regression"), seed=0)
    out = predict(state, np.random.default_rng(0).normal(size=(3, 1, 16)))
    assert out.shape == (3, 1)


def test_dual_bn_routes_statistics():
    state = build_model(ModelSpec("fcn", dual_bn=True), seed=0)
    x = np.random.default_rng(0).normal(size=(4, 1, 16)) * 3 + 1
    fw = forward(state, x, train=True, bn_set="adv")
    assert not np.array_equal(fw.running["bn1.mean@adv"], state.running["bn1.mean@adv"])
    np.testing.assert_array_equal(fw.running["bn1.mean"], state.running["bn1.mean"])
    assert state.n_params(include_adv=False) < state.n_params()
    with pytest.raises(ValueError):
        forward(build_model(ModelSpec("fcn")), x, bn_set="adv")


# receptive field -------------------------------------------------------------------------

def test_receptive_field_values():
    assert receptive_field(ModelSpec("fcn")) == 14
    assert receptive_field(ModelSpec("resnet")) == 1 + 3 * (7 + 4 + 2)
    assert receptive_field(ModelSpec("inception")) == 235
    assert receptive_field(ModelSpec("inception", depth=1, kernel_sizes=(9,))) == 9
    assert receptive_field(ModelSpec("mlp", input_length=30)) == 30


@given(depth=st.integers(1, 12), k=st.integers(3, 64))
def test_receptive_field_is_monotone(depth, k):
    rf = receptive_field(ModelSpec("inception", depth=depth, kernel_sizes=(k,)))
    assert receptive_field(ModelSpec("inception", depth=depth + 1, kernel_sizes=(k,))) > rf
    assert receptive_field(ModelSpec("inception", depth=depth, kernel_sizes=(k + 1,))) > rf


def test_receptive_field_matches_input_influence():
    """Perturbing one input sample changes exactly a window of RF outputs (stride-1 stack)."""
    spec = ModelSpec("inception", depth=3, kernel_sizes=(5,), n_filters=2, bottleneck_size=2,
                     use_residual=False)
    state = build_model(spec, seed=0)
    x = np.random.default_rng(0).normal(size=(1, 1, 60))
    base = forward(state, x).features.data
    x2 = x.copy()
    x2[0, 0, 30] += 1.0
    changed = np.any(forward(state, x2).features.data != base, axis=(0, 1))
    idx = np.flatnonzero(changed)
    assert idx.max() - idx.min() + 1 <= receptive_field(spec)


# ensembles --------------------------------------------------------------------------------

def _ensemble(n):
    return [build_model(ModelSpec("fcn", n_classes=3), seed=s) for s in range(n)]


def test_single_member_ensemble_equals_predict():
    x = np.random.default_rng(0).normal(size=(4, 1, 20))
    (m,) = _ensemble(1)
    np.testing.assert_array_equal(ensemble_predict([m], x), predict(m, x))


def test_ensemble_of_opposite_models_is_half():
    def fixed(bias):
        s = build_model(ModelSpec("fcn", n_classes=2), seed=0)
        s.params["head.w"] = np.zeros_like(s.params["head.w"])
        s.params["head.b"] = np.array(bias)
        return s
    probs = ensemble_predict([fixed([800.0, 0.0]), fixed([0.0, 800.0])], np.zeros((1, 1, 8)))
    np.testing.assert_array_equal(probs, [[0.5, 0.5]])


def test_ensemble_is_permutation_invariant_and_exact_mean():
    members = _ensemble(4)
    x = np.random.default_rng(1).normal(size=(5, 1, 20))
    ref = ensemble_predict(members, x)
    for perm in ([3, 1, 0, 2], [2, 3, 1, 0]):
        np.testing.assert_array_equal(ensemble_predict([members[i] for i in perm], x), ref)
    mean = np.mean([predict(m, x) for m in members], axis=0)
    np.testing.assert_allclose(ref, mean, rtol=0, atol=1e-15)
    np.testing.assert_allclose(ref.sum(axis=1), 1.0, atol=1e-12)


def test_ensemble_rejects_mixed_class_counts():
    with pytest.raises(ValueError):
        ensemble_predict([build_model(ModelSpec("fcn", n_classes=2)),
                          build_model(ModelSpec("fcn", n_classes=3))], np.zeros((1, 1, 8)))
    with pytest.raises(ValueError):
        ensemble_predict([], np.zeros((1, 1, 8)))


# serialisation ----------------------------------------------------------------------------

@pytest.mark.parametrize("spec", [ModelSpec("fcn", n_classes=3),
                                  ModelSpec("resnet"),
                                  ModelSpec("inception", depth=3, dual_bn=True),
                                  ModelSpec("mlp", input_length=12, n_classes=4)])
def test_save_load_round_trip(tmp_path, spec):
    state = build_model(spec, seed=4)
    state.meta["dataset"] = "toy"
    path = tmp_path / "m.tscm"
    save_model(state, path)
    loaded = load_model(path)
    assert loaded.spec == spec and loaded.meta == state.meta
    save_model(loaded, tmp_path / "again.tscm")
    assert path.read_bytes() == (tmp_path / "again.tscm").read_bytes()
    x = np.random.default_rng(0).normal(size=(3, 1, 12))
    np.testing.assert_array_equal(predict(loaded, x), predict(state, x))


def test_file_starts_with_magic_and_version(fcn):
    data = dumps_model(fcn)
    assert data[:4] == b"TSCM"
    assert int.from_bytes(data[4:8], "little") == 1


@pytest.mark.parametrize("mutate", [
    lambda d: b"XXXX" + d[4:],
    lambda d: d[:4] + (99).to_bytes(4, "little") + d[8:],
    lambda d: d[:len(d) // 2],
    lambda d: d[:10],
    lambda d: b"",
])
def test_corrupted_files_raise_format_error(fcn, mutate):
    with pytest.raises(ModelFormatError):
        loads_model(mutate(dumps_model(fcn)))


def test_wrong_parameter_shape_is_rejected(fcn):
    bad = fcn.copy()
    bad.params["head.w"] = np.zeros((5, 3))
    with pytest.raises(ModelFormatError):
        loads_model(dumps_model(bad))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_probabilities_sum_to_one(n, t, seed):
    state = build_model(ModelSpec("inception", depth=1, n_filters=4, bottleneck_size=4, use_residual=False,
                                  n_classes=3), seed=0)
    probs = predict(state, np.random.default_rng(seed).normal(size=(n, 1, t)))
    assert probs.shape == (n, 3)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_input_gradient_via_tensor(fcn):
    x = ad.Tensor(np.random.default_rng(0).normal(size=(2, 1, 10)), requires_grad=True)
    fw = forward(fcn, x)
    ad.backward(ad.mean(fw.logits))
    assert x.grad.shape == (2, 1, 10) and np.any(x.grad != 0)
