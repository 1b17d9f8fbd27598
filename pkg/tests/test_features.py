import numpy as np
import pytest

from remi.core import tensor as T
from remi.datasets import make_synthetic, split
from remi.errors import AccessError, InputError
from remi.features import (
    AttackDataset,
    FeatureSpec,
    build_attack_dataset,
    extract,
    extract_features,
    feature_tensor,
    per_layer_grad_sq,
)
from remi.models import build, small_cnn
from remi.training import TrainConfig, train

from helpers import per_sample_grads_bruteforce, small_corpus, tiny_cnn


def _three_layer_mlp(k=4, d=6, seed=0):
    return build("mlp", d, k, seed=seed, hidden=(5, 5))


def test_layout_length_all_blocks():
    net = _three_layer_mlp()
    assert len(net.param_layers) == 3
    spec = FeatureSpec.white_box()
    assert spec.block_sizes(net) == {"posterior": 4, "pred_label": 4, "loss": 1, "gradient": 3}
    f = extract_features(net, np.zeros((2, 6)), [0, 1], spec)
    assert f.shape == (2, 12)


def test_block_order_and_values():
    net = _three_layer_mlp()
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(5, 6)), rng.integers(0, 4, 5)
    f = extract_features(net, X, y, FeatureSpec.white_box())
    probs = net.predict_proba(X)
    np.testing.assert_allclose(f[:, :4], probs)
    np.testing.assert_array_equal(f[:, 4:8], np.eye(4)[probs.argmax(axis=1)])
    np.testing.assert_allclose(f[:, 8], -np.log(probs[np.arange(5), y]), rtol=1e-12)


def test_omitted_blocks_are_absent():
    net = _three_layer_mlp()
    spec = FeatureSpec(include_posterior=False, include_pred_label=False)
    assert extract_features(net, np.zeros((3, 6)), [0, 1, 2], spec).shape == (3, 1)


def test_perfect_prediction_has_zero_loss_and_matching_label():
    net = build("mlp", 2, 2, hidden=(2,))
    net.set_flat(np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 50.0, 0.0, 0.0, 50.0, 0.0, 0.0]))
    rec = extract(net, np.array([5.0, 0.0]), 0, FeatureSpec.black_box())
    assert rec.z is None
    assert rec.features[4] == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_array_equal(rec.features[2:4], [1.0, 0.0])


def test_gradient_norms_match_bruteforce():
    net = tiny_cnn(seed=3)
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(20, 16)), rng.integers(0, 3, 20)
    fast = np.sqrt(per_layer_grad_sq(net, X, y))
    grads = per_sample_grads_bruteforce(net, X, y)
    sizes = [p.size for layer in net.param_layers for p in layer.params]
    bounds = np.cumsum([0] + sizes)
    per_param = [grads[:, bounds[i]:bounds[i + 1]] for i in range(len(sizes))]
    brute = np.stack([np.sqrt((per_param[2 * j] ** 2).sum(1) + (per_param[2 * j + 1] ** 2).sum(1))
                      for j in range(len(net.param_layers))], axis=1)
    assert np.max(np.abs(fast - brute) / np.abs(brute)) <= 1e-8


def test_last_layer_full_gradient_matches_bruteforce():
    net = tiny_cnn(seed=2)
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(6, 16)), rng.integers(0, 3, 6)
    spec = FeatureSpec(include_posterior=False, include_pred_label=False, include_loss=False,
                       include_gradient=True, gradient_reduction="last_layer_full")
    f = extract_features(net, X, y, spec)
    last = net.param_layers[-1]
    n_last = last.weight.size + last.bias.size
    brute = per_sample_grads_bruteforce(net, X, y)[:, -n_last:]
    np.testing.assert_allclose(f, brute, rtol=1e-9, atol=1e-14)


def test_gradient_features_need_white_box():
    net = _three_layer_mlp()
    with pytest.raises(AccessError):
        extract_features(net, np.zeros((1, 6)), [0], FeatureSpec.white_box(), access="black_box")
    extract_features(net, np.zeros((1, 6)), [0], FeatureSpec.black_box(), access="black_box")


def test_spec_needs_a_block_and_valid_mask():
    with pytest.raises(InputError):
        FeatureSpec(include_posterior=False, include_pred_label=False, include_loss=False)
    with pytest.raises(InputError):
        FeatureSpec(differentiable_mask={"posterior": True, "pred_label": True, "loss": True, "gradient": False})


def test_extraction_never_mutates_network():
    net = tiny_cnn(seed=5)
    before = net.get_flat()
    rng = np.random.default_rng(0)
    extract_features(net, rng.normal(size=(7, 16)), rng.integers(0, 3, 7), FeatureSpec.white_box())
    assert np.array_equal(net.get_flat(), before)
    assert all(p.grad is None for p in net.params)


def test_differentiable_mask_is_honoured():
    net = tiny_cnn(seed=6)
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(4, 16)), rng.integers(0, 3, 4)
    spec = FeatureSpec.white_box()
    feats = feature_tensor(net, X, y, spec)
    k, g = 3, len(net.param_layers)
    # only the gradient-norm and argmax columns are weighted: no path to w
    weights = np.zeros(feats.shape)
    weights[:, k:2 * k] = 1.0
    weights[:, 2 * k + 1:] = 1.0
    assert weights[:, 2 * k + 1:].shape[1] == g
    net.zero_grad()
    T.sum_(T.mul(feats, weights)).backward()
    assert not np.any(net.flat_grad())
    # posterior and loss columns do reach w
    feats = feature_tensor(net, X, y, spec)
    weights = np.zeros(feats.shape)
    weights[:, 2 * k] = 1.0
    net.zero_grad()
    T.sum_(T.mul(feats, weights)).backward()
    assert np.any(net.flat_grad())


def test_overfit_members_have_lower_loss():
    corpus = make_synthetic(4, 60, 64, seed=0)
    plan = split(corpus, 0)
    net = small_cnn((1, 8, 8), 4, seed=0, channels=(4, 8, 8), hidden=32)
    net, _ = train(net, corpus, plan.target_train, plan.target_test, TrainConfig(epochs=30, lr=0.05))
    spec = FeatureSpec(include_posterior=False, include_pred_label=False)
    Xm, ym = corpus.subset(plan.target_train)
    Xn, yn = corpus.subset(plan.target_test)
    assert extract_features(net, Xm, ym, spec).mean() < extract_features(net, Xn, yn, spec).mean()


def test_attack_dataset_balanced_and_labelled():
    corpus = small_corpus(n_per_class=100, k=2)
    net = build("mlp", corpus.input_dim, 2, hidden=(4,))
    members, nonmembers = np.arange(100), np.arange(100, 200)
    ds = build_attack_dataset(net, corpus, members, nonmembers, FeatureSpec.black_box())
    assert len(ds) == 200 and ds.z.sum() == 100
    ds = build_attack_dataset(net, small_corpus(n_per_class=200, k=2), members, np.arange(100, 400),
                              FeatureSpec.black_box())
    assert len(ds) == 200 and ds.z.sum() == 100
    member_set = set(members.tolist())
    for rec in ds:
        assert rec.z == int(rec.source_index in member_set)


def test_attack_dataset_rejects_empty_and_overlap():
    corpus = small_corpus()
    net = build("mlp", corpus.input_dim, 2, hidden=(4,))
    with pytest.raises(InputError):
        build_attack_dataset(net, corpus, [], [1, 2], FeatureSpec.black_box())
    with pytest.raises(InputError):
        build_attack_dataset(net, corpus, [0, 1], [1, 2], FeatureSpec.black_box())


def test_attack_dataset_csv_round_trip(tmp_path):
    corpus = small_corpus()
    net = tiny_cnn(k=2)
    ds = build_attack_dataset(net, corpus, np.arange(10), np.arange(10, 20), FeatureSpec.white_box())
    ds.to_csv(tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text().startswith("# {")
    back = AttackDataset.from_csv(tmp_path / "a.csv")
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.z, ds.z) and np.array_equal(back.source_index, ds.source_index)
    assert back.spec == ds.spec and back.num_classes == 2


def test_scaled_columns_cover_loss_and_gradient():
    spec = FeatureSpec.white_box()
    mask = spec.scaled_columns(4, 12)
    assert mask.tolist() == [False] * 8 + [True] * 4
