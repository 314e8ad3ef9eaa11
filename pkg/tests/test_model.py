import math

import numpy as np
import pytest

from datamark.core import Dataset, Image, LabeledImage, validate_posterior
from datamark.datasets import SyntheticSpec, generate_synthetic
from datamark.model.mocks import MockSpec, make_mock
from datamark.model.network import (
    Architecture,
    MiniNetClassifier,
    MiniNetParams,
    TrainConfig,
    TrainingDivergedError,
    gradient_check,
    gradient_errors,
    init_params,
    max_relative_error,
    predict_posterior,
    train,
)
from datamark.watermark import blend, make_square_trigger


@pytest.fixture(scope="module")
def blobs():
    return generate_synthetic(
        SyntheticSpec(num_classes=2, per_class=200, shape=(3, 4, 4), base_colors=((40, 40, 40), (200, 200, 200)), noise_std=25, seed=1)
    )


def test_zero_params_give_uniform_posterior():
    params = init_params(Architecture.mlp(5), (3, 4, 4), 4)
    post = predict_posterior(params, Image(np.full((3, 4, 4), 77)))
    np.testing.assert_allclose(post, 0.25, atol=1e-15)


def test_hand_set_forward_pass():
    params = init_params(Architecture(hidden=(2,)), (2, 1, 1), 2)
    params.weights["dense0.W"][:] = [[1.0, -1.0], [2.0, 3.0]]
    params.weights["dense0.b"][:] = [0.0, 0.5]
    params.weights["out.W"][:] = [[1.0, 0.0], [0.0, 1.0]]
    params.weights["out.b"][:] = [0.0, math.log(2)]
    # x = [255, 0] / 255 = [1, 0]; hidden = relu([1, -0.5]) = [1, 0]; logits = [1, ln 2]
    post = predict_posterior(params, Image(np.array([[[255]], [[0]]])))
    e = math.e
    np.testing.assert_allclose(post, [e / (e + 2), 2 / (e + 2)], atol=1e-12)


def test_posterior_normalized_for_random_params(rng):
    for arch in (Architecture.linear(), Architecture.mlp(8), Architecture.conv(3)):
        params = init_params(arch, (3, 6, 6), 5, 3.0, rng)
        for _ in range(5):
            post = predict_posterior(params, Image(rng.integers(0, 256, (3, 6, 6))))
            assert abs(post.sum() - 1) <= 1e-9


def test_predict_shape_mismatch():
    params = init_params(Architecture.linear(), (3, 4, 4), 2)
    with pytest.raises(ValueError, match="shape"):
        predict_posterior(params, Image(np.zeros((3, 5, 4), np.uint8)))


def test_train_separable_blobs(blobs):
    tr, te = blobs
    params = train(tr, Architecture.mlp(32), TrainConfig(epochs=5, learning_rate=0.05, seed=0))
    pred = MiniNetClassifier(params).posterior_batch(tr.images).argmax(axis=1)
    assert np.mean(pred == tr.labels) >= 0.99
    assert params.loss_history[-1] < params.loss_history[0]


def test_linear_model_on_synthetic_reaches_99_percent():
    tr, te = generate_synthetic(
        SyntheticSpec(num_classes=2, per_class=1000, shape=(3, 8, 8), base_colors=((40, 40, 40), (200, 200, 200)), noise_std=25)
    )
    params = train(tr, Architecture.linear(), TrainConfig(epochs=5))
    pred = MiniNetClassifier(params).posterior_batch(te.images).argmax(axis=1)
    assert np.mean(pred == te.labels) >= 0.99


def test_zero_learning_rate_is_noop(blobs):
    tr, _ = blobs
    cfg = TrainConfig(epochs=2, learning_rate=0.0, seed=4)
    trained = train(tr, Architecture.mlp(8), cfg)
    init = init_params(Architecture.mlp(8), tr.shape, tr.num_classes, 1.0, np.random.default_rng(4))
    for k in init.weights:
        np.testing.assert_array_equal(trained.weights[k], init.weights[k])


def test_single_sample_memorized():
    d = Dataset(np.full((1, 3, 4, 4), 90, np.uint8), np.array([2]), 3)
    params = train(d, Architecture.mlp(8), TrainConfig(epochs=200, batch_size=1, learning_rate=0.05))
    assert predict_posterior(params, d[0].image).argmax() == 2


def test_training_is_deterministic(blobs):
    tr, _ = blobs
    a = train(tr, Architecture.conv(2), TrainConfig(epochs=1, seed=11))
    b = train(tr, Architecture.conv(2), TrainConfig(epochs=1, seed=11))
    for k in a.weights:
        assert a.weights[k].tobytes() == b.weights[k].tobytes()


def test_divergence_is_reported(blobs):
    tr, _ = blobs
    with pytest.raises(TrainingDivergedError, match="epoch"):
        train(tr, Architecture.mlp(8), TrainConfig(epochs=3, learning_rate=1e200, weight_init_scale=1e200))


def test_params_json_round_trip(tmp_path, blobs):
    tr, te = blobs
    params = train(tr, Architecture.conv(2, hidden=(4,)), TrainConfig(epochs=1))
    params.save(tmp_path / "p.json")
    back = MiniNetParams.load(tmp_path / "p.json")
    assert back.arch == params.arch and back.train_config == params.train_config
    for k in params.weights:
        np.testing.assert_array_equal(back.weights[k], params.weights[k])
    np.testing.assert_array_equal(
        MiniNetClassifier(back).posterior_batch(te.images[:5]), MiniNetClassifier(params).posterior_batch(te.images[:5])
    )


def test_params_reject_wrong_shapes(tmp_path):
    d = init_params(Architecture.mlp(3), (1, 2, 2), 2).to_dict()
    d["layers"][0]["shape"] = [2, 6]
    with pytest.raises(ValueError):
        MiniNetParams.from_dict(d)


@pytest.fixture
def sample(rng):
    return LabeledImage(Image(rng.integers(0, 256, (3, 8, 8))), 1)


def test_gradient_check_linear(sample):
    assert gradient_check(Architecture.linear(), sample, seed=0, num_classes=4) <= 1e-6


def test_gradient_check_relu_mlp(sample):
    assert gradient_check(Architecture.mlp(16), sample, seed=1, num_classes=4) <= 1e-4


def test_gradient_check_conv(sample):
    assert gradient_check(Architecture.conv(8), sample, seed=2, num_classes=4) <= 1e-4


def test_gradient_check_size_limit(sample):
    with pytest.raises(ValueError, match="limit"):
        gradient_check(Architecture.mlp(64), sample, num_classes=4)


def test_gradient_check_zero_signal():
    # All-zero input with zero weights: logits are the (zero) biases whatever the weights,
    # so weight gradients vanish both analytically and numerically.
    params = init_params(Architecture.linear(), (1, 2, 2), 3)
    x = np.zeros((1, 1, 2, 2))
    analytic, numeric = gradient_errors(params, x, np.array([0]))
    assert np.abs(analytic["out.W"]).max() == 0.0
    assert np.abs(numeric["out.W"]).max() < 1e-10
    assert max_relative_error(analytic, numeric) < 1e-6


# --- mocks -----------------------------------------------------------------

@pytest.fixture
def trig():
    return make_square_trigger((3, 8, 8), side=2)


def test_perfect_backdoor_mock(small_split, trig):
    _, te = small_split
    mock = make_mock(MockSpec("perfect_backdoor", 4, target_label=1, trigger=trig)).register(te)
    img = te[0].image
    np.testing.assert_array_equal(mock.posterior(blend(img, trig)), np.eye(4)[1])
    np.testing.assert_array_equal(mock.posterior(img), np.eye(4)[te[0].label])
    unseen = Image(np.full((3, 8, 8), 7))
    np.testing.assert_array_equal(mock.posterior(unseen), np.full(4, 0.25))


def test_uniform_and_constant_mocks(trig):
    img = Image(np.zeros((3, 8, 8), np.uint8))
    np.testing.assert_array_equal(make_mock(MockSpec("uniform", 5)).posterior(img), np.full(5, 0.2))
    np.testing.assert_array_equal(make_mock(MockSpec("constant", 3, constant_label=2)).posterior(img), [0, 0, 1])


def test_stochastic_gap_mock_mean(trig):
    mock = make_mock(MockSpec("stochastic_gap", 4, target_label=0, trigger=trig, gap_mean=0.6, gap_std=0.05, seed=3))
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (10_000, 3, 8, 8))
    gaps = []
    for x in imgs:
        img = Image(x)
        gaps.append(mock.posterior(blend(img, trig))[0] - mock.posterior(img)[0])
    assert abs(np.mean(gaps) - 0.6) <= 0.002


def test_mocks_answer_by_content(small_split, trig):
    _, te = small_split
    specs = [
        MockSpec("perfect_backdoor", 4, 1, trig),
        MockSpec("stochastic_gap", 4, 1, trig, seed=5),
        MockSpec("echo", 4),
        MockSpec("uniform", 4),
        MockSpec("constant", 4, constant_label=3),
    ]
    for spec in specs:
        mock = make_mock(spec).register(te)
        for i in (0, 1, 2):
            img = blend(te[i].image, trig)
            first = mock.posterior(img)
            mock.posterior(te[5].image)
            assert np.array_equal(first, mock.posterior(img))
            validate_posterior(first, 1e-5)


def test_mock_spec_validation(trig):
    with pytest.raises(ValueError):
        MockSpec("nope", 3)
    with pytest.raises(ValueError):
        MockSpec("perfect_backdoor", 3)
    with pytest.raises(ValueError):
        MockSpec("stochastic_gap", 3, trigger=trig, gap_std=-1)
