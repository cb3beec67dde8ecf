import numpy as np
import pytest

from ..exceptions import NumericalError, ParameterError, StaleCacheError
from ..nnet import (
    BACKBONE,
    CLASSIFIER,
    PROJECTOR,
    SgdConfig,
    backward,
    ce_loss,
    copy_network,
    cross_entropy,
    forward,
    init_network,
    learning_rate,
    load_network,
    param_keys,
    per_sample_losses,
    save_network,
    sgd_step,
)
from .utils import numerical_gradient, rel_error


def random_network(seed, **kwargs):
    rng = np.random.default_rng(seed)
    in_dim = int(rng.integers(2, 6))
    num_classes = int(rng.integers(2, 5))
    hidden = tuple(int(h) for h in rng.integers(6, 10, size=int(rng.integers(1, 3))))
    embedding_dim = int(rng.integers(2, 5))
    net = init_network(
        in_dim, num_classes, hidden, embedding_dim,
        projector_depth=int(rng.integers(1, 3)), projector_hidden=5, seed=seed, **kwargs
    )
    x = rng.standard_normal((7, in_dim))
    return net, x, rng


def test_shapes_and_parameter_groups(small_network):
    out = forward(small_network, np.zeros((3, 6)))
    assert out.logits.shape == (3, 4)
    assert out.feature.shape == (3, 10)
    assert out.embedding.shape == (3, 5)
    assert param_keys(small_network, PROJECTOR) == [
        "projector.0.weight", "projector.0.bias", "projector.1.weight", "projector.1.bias",
    ]
    assert len(param_keys(small_network, BACKBONE, CLASSIFIER)) == 6


def test_single_sample_is_unbatched(small_network):
    out = forward(small_network, np.ones(6))
    assert out.probs.shape == (4,)
    assert out.embedding.shape == (5,)


def test_zero_weights_give_uniform_probs(small_network):
    for value in small_network.weights.values():
        value[...] = 0.0
    out = forward(small_network, np.random.default_rng(0).standard_normal((5, 6)))
    assert np.allclose(out.probs, 0.25)


def test_probs_sum_to_one_and_embeddings_are_unit(small_network, rng):
    out = forward(small_network, 10 * rng.standard_normal((50, 6)))
    assert np.allclose(out.probs.sum(axis=1), 1.0)
    assert np.allclose(np.linalg.norm(out.embedding, axis=1), 1.0)


def test_forward_is_deterministic(small_network, rng):
    x = rng.standard_normal((4, 6))
    assert forward(small_network, x).logits.tobytes() == forward(small_network, x).logits.tobytes()


def test_forward_dimension_mismatch(small_network):
    with pytest.raises(ParameterError, match="dimension mismatch"):
        forward(small_network, np.zeros((2, 5)))


def test_forward_rejects_non_finite_inputs(small_network):
    x = np.zeros((2, 6))
    x[1, 3] = np.nan
    with pytest.raises(ParameterError, match="NaN"):
        forward(small_network, x)


def test_embedding_must_be_narrower_than_features():
    with pytest.raises(ParameterError, match="embedding dim"):
        init_network(4, 3, hidden=(8,), embedding_dim=8)


def test_ce_loss_values():
    assert ce_loss([0.0, 1.0, 0.0], 1) == 0.0
    assert ce_loss(np.full(10, 0.1), 3) == pytest.approx(np.log(10), abs=1e-12)
    assert ce_loss([0.5, 0.5], 0) == pytest.approx(np.log(2), abs=1e-12)
    with pytest.raises(ParameterError):
        ce_loss([0.5, 0.5], 2)


def test_per_sample_losses_are_stable_for_large_logits():
    logits = np.array([[1000.0, 0.0], [0.0, 1000.0]])
    losses = per_sample_losses(logits, np.array([0, 0]))
    assert losses[0] == pytest.approx(0.0)
    assert losses[1] == pytest.approx(1000.0)


def test_soft_and_hard_cross_entropy_agree(rng):
    logits = rng.standard_normal((6, 3))
    labels = rng.integers(0, 3, size=6)
    hard = cross_entropy(logits, labels)
    soft = cross_entropy(logits, np.eye(3)[labels])
    assert hard[0] == pytest.approx(soft[0])
    assert np.allclose(hard[1], soft[1])


@pytest.mark.parametrize("seed", range(10))
def test_cross_entropy_gradients(seed):
    net, x, rng = random_network(seed)
    targets = rng.dirichlet(np.ones(net.num_classes), size=x.shape[0])
    out = forward(net, x)
    _, d_logits = cross_entropy(out.logits, targets)
    grads = backward(net, out.cache, d_logits=d_logits)

    def loss():
        return cross_entropy(forward(net, x).logits, targets)[0]

    for name in param_keys(net, BACKBONE, CLASSIFIER):
        assert rel_error(grads[name], numerical_gradient(loss, net.weights[name])) < 1e-4, name
    for name in param_keys(net, PROJECTOR):
        assert not grads[name].any()


@pytest.mark.parametrize("seed", range(10))
def test_projector_gradients_through_normalization(seed):
    net, x, rng = random_network(seed)
    upstream = rng.standard_normal((x.shape[0], net.embedding_dim))
    out = forward(net, x)
    grads = backward(net, out.cache, d_embedding=upstream, stop_at_projector_input=False)

    def loss():
        return float(np.sum(forward(net, x).embedding * upstream))

    for name in net.weights:
        if name.startswith(CLASSIFIER):
            continue
        assert rel_error(grads[name], numerical_gradient(loss, net.weights[name])) < 1e-4, name


def test_stop_gradient_blocks_backbone(small_network, rng):
    out = forward(small_network, rng.standard_normal((4, 6)))
    grads = backward(small_network, out.cache, d_embedding=rng.standard_normal((4, 5)))
    for name in param_keys(small_network, BACKBONE, CLASSIFIER):
        assert not grads[name].any()
    assert any(grads[name].any() for name in param_keys(small_network, PROJECTOR))


def test_zero_upstream_gives_zero_gradients(small_network, rng):
    out = forward(small_network, rng.standard_normal((4, 6)))
    grads = backward(small_network, out.cache, d_logits=np.zeros((4, 4)), d_embedding=np.zeros((4, 5)))
    assert all(not grad.any() for grad in grads.values())


def test_stale_cache(small_network, rng):
    out = forward(small_network, rng.standard_normal((4, 6)))
    zero = {name: np.zeros_like(value) for name, value in small_network.weights.items()}
    sgd_step(small_network, zero)
    with pytest.raises(StaleCacheError, match="parameter version 0"):
        backward(small_network, out.cache, d_logits=np.zeros((4, 4)))


def test_sgd_zero_grads_without_decay_keeps_params():
    net = init_network(3, 2, hidden=(5,), embedding_dim=2, seed=0, hyper=SgdConfig(weight_decay=0.0))
    before = net.copy()
    sgd_step(net, {name: np.zeros_like(value) for name, value in net.weights.items()})
    for name in net.weights:
        assert np.array_equal(net.weights[name], before.weights[name])
    assert net.version == before.version + 1


def test_sgd_weight_decay_closed_form():
    net = init_network(3, 2, hidden=(5,), embedding_dim=2, seed=0, hyper=SgdConfig(0.1, 0.0, 0.01))
    before = net.copy()
    sgd_step(net, {name: np.zeros_like(value) for name, value in net.weights.items()})
    for name in net.weights:
        assert np.allclose(net.weights[name], before.weights[name] * (1 - 0.1 * 0.01))


def test_sgd_momentum_accumulates():
    net = init_network(3, 2, hidden=(5,), embedding_dim=2, seed=0, hyper=SgdConfig(0.1, 0.9, 0.0))
    grads = {name: np.ones_like(value) for name, value in net.weights.items()}
    start = net.weights["classifier.bias"].copy()
    sgd_step(net, grads, keys=["classifier.bias"])
    first = net.weights["classifier.bias"].copy()
    sgd_step(net, grads, keys=["classifier.bias"])
    second = net.weights["classifier.bias"]
    assert np.allclose(start - first, 0.1)
    assert np.allclose(first - second, 0.19)


def test_sgd_only_touches_requested_keys(small_network):
    before = small_network.copy()
    grads = {name: np.ones_like(value) for name, value in small_network.weights.items()}
    sgd_step(small_network, grads, keys=param_keys(small_network, PROJECTOR))
    for name in param_keys(small_network, BACKBONE, CLASSIFIER):
        assert np.array_equal(small_network.weights[name], before.weights[name])


def test_sgd_rejects_nan_gradient(small_network):
    grads = {name: np.zeros_like(value) for name, value in small_network.weights.items()}
    grads["backbone.1.weight"][0, 0] = np.nan
    with pytest.raises(NumericalError, match="backbone.1.weight"):
        sgd_step(small_network, grads)


def test_sgd_rejects_wrong_shape(small_network):
    grads = {name: np.zeros_like(value) for name, value in small_network.weights.items()}
    grads["classifier.bias"] = np.zeros(3)
    with pytest.raises(ParameterError, match="classifier.bias"):
        sgd_step(small_network, grads)


def test_learning_rate_drop():
    assert learning_rate(0.02, 49, 50) == 0.02
    assert learning_rate(0.02, 50, 50) == pytest.approx(0.002)
    assert learning_rate(0.02, 500, None) == 0.02


def test_networks_with_different_seeds_differ():
    first = init_network(4, 3, seed=0)
    second = init_network(4, 3, seed=1)
    assert not np.array_equal(first.weights["backbone.0.weight"], second.weights["backbone.0.weight"])


def test_checkpoint_restores_outputs(tmp_path, small_network, rng):
    x = rng.standard_normal((3, 6))
    sgd_step(small_network, {name: np.ones_like(value) for name, value in small_network.weights.items()})
    path = tmp_path / "net.json"
    save_network(small_network, str(path))
    restored = load_network(str(path))
    assert restored.version == small_network.version
    assert np.array_equal(forward(restored, x).logits, forward(small_network, x).logits)
    assert np.array_equal(restored.velocity["classifier.bias"], small_network.velocity["classifier.bias"])


def test_copy_network_shares_no_arrays(small_network):
    snapshot = copy_network(small_network)
    grads = {name: np.ones_like(value) for name, value in small_network.weights.items()}
    sgd_step(small_network, grads)
    assert snapshot.version == small_network.version - 1
    for name in small_network.weights:
        assert not np.array_equal(snapshot.weights[name], small_network.weights[name])


def test_copy_network_rejects_other_types():
    re_err = r"Expected NetworkParams, but got: \{"
    with pytest.raises(TypeError, match=re_err):
        copy_network({"weights": {}})
