import numpy as np
import pytest
from scipy.special import expit, logit

from ..cpc import (
    ConfidentSet,
    CpcBatch,
    PrototypeBank,
    clean_score,
    clean_scores,
    cpc_objective,
    cpc_scores,
    init_prototypes,
    load_bank,
    loss_clean_set,
    loss_confident_set,
    loss_noise_set,
    make_bank,
    partition_cpc,
    save_bank,
    score_histogram,
    select_confident,
    self_labeled_partition,
    update,
)
from ..enums import CleanerSource
from ..exceptions import ParameterError
from ..nnet import BACKBONE, CLASSIFIER, PROJECTOR, forward, init_network, param_keys
from ..semisup import Partition
from .utils import numerical_gradient, rel_error

LN2 = np.log(2.0)


def random_case(seed, n=6):
    rng = np.random.default_rng(seed)
    num_classes = int(rng.integers(2, 6))
    dim = int(rng.integers(2, 5))
    bank = make_bank(num_classes, dim, seed=seed, scale=1.0)
    embeddings = rng.standard_normal((n, dim))
    embeddings /= np.linalg.norm(embeddings, axis=1, keepdims=True)
    labels = rng.integers(0, num_classes, size=n)
    return bank, embeddings, labels


def split(n, noise):
    noise = np.asarray(noise, dtype=int)
    clean = np.setdiff1d(np.arange(n), noise)
    return Partition(clean, np.ones(clean.size), noise, CleanerSource.GMM_AGNOSTIC, provenance=1)


def test_bank_properties():
    bank = make_bank(10, 4, seed=0)
    assert bank.num_classes == 10
    assert bank.dim == 4
    assert bank.lambda_neg == 0.1
    assert bank.warmup_epochs(100) == 5
    assert PrototypeBank(np.ones((3, 2)), warmup=0.1).warmup_epochs(100) == 10


@pytest.mark.parametrize(
    "kwargs, re_err",
    [
        ({"prototypes": np.ones((1, 3))}, "K >= 2"),
        ({"prototypes": np.full((2, 3), np.inf)}, "finite"),
        ({"prototypes": np.ones((2, 3)), "tau": 1.5}, "tau"),
        ({"prototypes": np.ones((2, 3)), "alpha": -1.0}, "alpha"),
        ({"prototypes": np.ones((2, 3)), "warmup": 1.0}, "warmup"),
    ],
)
def test_bank_validation(kwargs, re_err):
    with pytest.raises(ParameterError, match=re_err):
        PrototypeBank(**kwargs)


def test_clean_score_closed_forms():
    bank = PrototypeBank(np.array([[10.0, 0.0], [0.0, 3.0]]))
    assert clean_score(np.array([0.0, 1.0]), bank, 0) == 0.5
    assert clean_score(np.array([1.0, 0.0]), bank, 0) == pytest.approx(expit(10.0))
    assert clean_score(np.array([1.0, 0.0]), bank, 0) == pytest.approx(0.99995, abs=1e-5)
    with pytest.raises(ParameterError, match="out of range"):
        clean_score(np.array([1.0, 0.0]), bank, 2)


def test_clean_score_increases_with_similarity():
    bank = PrototypeBank(np.array([[1.0, 0.0], [0.0, 1.0]]))
    angles = np.linspace(np.pi, 0, 50)
    embeddings = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    scores = clean_scores(embeddings, bank, np.zeros(50, dtype=int))
    assert np.all(np.diff(scores[:26]) > 0)


def test_clean_set_loss_at_zero_similarity():
    bank = PrototypeBank(np.zeros((4, 3)))
    loss = loss_clean_set(np.ones((1, 3)), [2], bank)
    assert loss.value == pytest.approx(LN2 + (1 / 4) * 3 * LN2)


def test_negative_terms_weighted_one_over_k():
    prototypes = np.zeros((10, 2))
    prototypes[0] = [5.0, 0.0]
    prototypes[1] = [-5.0, 0.0]
    bank = PrototypeBank(prototypes)
    value = loss_clean_set(np.array([[1.0, 0.0]]), [0], bank).value
    negatives = -np.log(expit(5.0)) + 8 * LN2
    assert value == pytest.approx(-np.log(expit(5.0)) + 0.1 * negatives)


def test_noise_set_loss():
    bank = PrototypeBank(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert loss_noise_set(np.array([[0.0, 1.0]]), [0], bank).value == pytest.approx(LN2)
    assert loss_noise_set(np.array([[-50.0, 0.0]]), [0], bank).value < 1e-20


def test_noise_set_gradient_pushes_prototype_away():
    bank, embeddings, labels = random_case(3, n=1)
    loss = loss_noise_set(embeddings, labels, bank)
    before = embeddings[0] @ bank.prototypes[labels[0]]
    bank.prototypes -= 0.1 * loss.grad_prototypes
    assert embeddings[0] @ bank.prototypes[labels[0]] < before


def test_confident_set_loss_is_the_positive_term():
    bank, embeddings, labels = random_case(4)
    s = embeddings @ bank.prototypes.T
    positive = s[np.arange(labels.size), labels]
    expected = np.mean(-np.log(expit(positive)))
    assert loss_confident_set(embeddings, labels, bank).value == pytest.approx(expected)
    assert loss_confident_set(np.ones((2, bank.dim)) * 0.0, [0, 1], bank).value == pytest.approx(LN2)


@pytest.mark.parametrize("loss_fn", [loss_clean_set, loss_noise_set, loss_confident_set])
def test_empty_sets_contribute_nothing(loss_fn):
    bank = make_bank(3, 2)
    loss = loss_fn(np.zeros((0, 2)), np.zeros(0, dtype=int), bank)
    assert loss.empty
    assert loss.value == 0.0
    assert not loss.grad_prototypes.any()


@pytest.mark.parametrize("loss_fn", [loss_clean_set, loss_noise_set, loss_confident_set])
@pytest.mark.parametrize("seed", range(10))
def test_loss_gradients(loss_fn, seed):
    bank, embeddings, labels = random_case(seed)
    loss = loss_fn(embeddings, labels, bank)

    def value():
        return loss_fn(embeddings, labels, bank).value

    assert rel_error(loss.grad_prototypes, numerical_gradient(value, bank.prototypes)) < 1e-4
    assert rel_error(loss.grad_embeddings, numerical_gradient(value, embeddings)) < 1e-4


def make_batch(seed, num_classes, n=8, in_dim=5):
    rng = np.random.default_rng(seed)
    mask = rng.integers(0, 3, size=n)
    confident = mask == 2
    return CpcBatch(
        rng.standard_normal((n, in_dim)),
        rng.integers(0, num_classes, size=n),
        mask == 0,
        mask >= 1,
        confident,
        np.where(confident, rng.integers(0, num_classes, size=n), 0),
    )


@pytest.mark.parametrize("seed", range(10))
def test_objective_gradients_for_prototypes_and_projector(seed):
    net = init_network(5, 3, hidden=(8,), embedding_dim=4, projector_depth=1 + seed % 2, seed=seed)
    bank = make_bank(3, 4, seed=seed, scale=1.0, alpha=0.5)
    batch = make_batch(seed, 3)
    breakdown, grad_prototypes, grads = cpc_objective(bank, net, batch)

    def total():
        return cpc_objective(bank, net, batch)[0].total

    assert rel_error(grad_prototypes, numerical_gradient(total, bank.prototypes)) < 1e-4
    for name in param_keys(net, PROJECTOR):
        assert rel_error(grads[name], numerical_gradient(total, net.weights[name])) < 1e-4, name
    for name in param_keys(net, BACKBONE, CLASSIFIER):
        assert not grads[name].any()


def test_objective_is_the_sum_of_its_terms():
    net = init_network(5, 3, hidden=(8,), embedding_dim=4, seed=1)
    bank = make_bank(3, 4, seed=1, scale=1.0, alpha=0.5)
    batch = make_batch(1, 3)
    breakdown, _, _ = cpc_objective(bank, net, batch)
    embeddings = forward(net, batch.features).embedding
    clean = loss_clean_set(embeddings[batch.clean], batch.labels[batch.clean], bank).value
    noise = loss_noise_set(embeddings[batch.noise], batch.labels[batch.noise], bank).value
    confident = loss_confident_set(embeddings[batch.confident], batch.pseudo_labels[batch.confident], bank).value
    assert abs(breakdown.total - (clean + noise + 0.5 * confident)) < 1e-12
    assert breakdown.confident_size == int(batch.confident.sum())


def test_select_confident_threshold_rule():
    labels = np.array([0, 0, 1, 1])
    probs = np.array([[0.8, 0.2], [0.6, 0.4], [0.75, 0.25], [0.65, 0.35]])
    confident = select_confident([2, 3], [0, 1], labels, probs)
    assert confident.thresholds[0] == pytest.approx(0.7)
    assert confident.thresholds[1] == np.inf
    assert confident.indices.tolist() == [2]
    assert confident.pseudo_labels.tolist() == [0]
    confident.check(probs)


def test_select_confident_without_noise():
    confident = select_confident([], [0, 1], np.array([0, 1]), np.eye(2))
    assert len(confident) == 0


def test_confident_pseudo_labels_are_predictions(rng):
    probs = rng.dirichlet(np.ones(4), size=60)
    labels = rng.integers(0, 4, size=60)
    confident = select_confident(np.arange(30, 60), np.arange(30), labels, probs)
    assert np.array_equal(confident.pseudo_labels, probs[confident.indices].argmax(axis=1))
    confident.check(probs)


def test_confident_check_detects_tampering():
    probs = np.array([[0.9, 0.1], [0.2, 0.8]])
    forged = ConfidentSet(np.array([1]), np.array([0]), np.array([0.5, 0.5]))
    with pytest.raises(AssertionError, match="predicted classes"):
        forged.check(probs)


def test_init_prototypes_from_clean_set():
    embeddings = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [3.0, 3.0], [5.0, 5.0]])
    labels = np.array([0, 0, 1, 1, 2])
    prototypes = init_prototypes(embeddings, labels, [0, 1, 2], 3)
    assert np.allclose(prototypes[0], [0.5, 0.5])
    assert np.allclose(prototypes[1], [1.0, 1.0])
    # class 2 has no clean member: mean of its labeled samples
    assert np.allclose(prototypes[2], [5.0, 5.0])


def test_update_moves_prototypes_and_projector_only(small_network, rng):
    features = rng.standard_normal((40, 6))
    labels = rng.integers(0, 4, size=40)
    bank = make_bank(4, 5, seed=0, scale=0.5)
    before_net, before_bank = small_network.copy(), bank.copy()
    breakdown = update(bank, small_network, features, labels, split(40, range(25, 40)), batch_size=16, rng=0)
    assert np.isfinite(breakdown.total)
    assert not np.array_equal(bank.prototypes, before_bank.prototypes)
    for name in param_keys(small_network, BACKBONE, CLASSIFIER):
        assert small_network.weights[name].tobytes() == before_net.weights[name].tobytes()
    assert any(
        not np.array_equal(small_network.weights[name], before_net.weights[name])
        for name in param_keys(small_network, PROJECTOR)
    )


def test_zero_alpha_ignores_the_confident_set(small_network, rng):
    features = rng.standard_normal((30, 6))
    labels = rng.integers(0, 4, size=30)
    partition = split(30, range(20, 30))
    confident = ConfidentSet(np.arange(20, 25), np.zeros(5, dtype=int), np.zeros(4))
    bank = make_bank(4, 5, seed=2, scale=0.5, alpha=0.0)
    other_bank, other_net = bank.copy(), small_network.copy()
    update(bank, small_network, features, labels, partition, confident, batch_size=8, rng=3)
    update(other_bank, other_net, features, labels, partition, None, batch_size=8, rng=3)
    assert bank.prototypes.tobytes() == other_bank.prototypes.tobytes()
    for name in small_network.weights:
        assert small_network.weights[name].tobytes() == other_net.weights[name].tobytes()


def test_update_on_clean_sample_raises_its_score(small_network, rng):
    features = rng.standard_normal((1, 6))
    labels = np.array([0])
    prototypes = np.zeros((4, 5))
    prototypes[0] = rng.standard_normal(5) * 0.5
    bank = PrototypeBank(prototypes)
    before = clean_scores(forward(small_network, features).embedding, bank, labels).mean()
    update(bank, small_network, features, labels, split(1, []), batch_size=1, rng=0, lr=1e-3)
    after = clean_scores(forward(small_network, features).embedding, bank, labels).mean()
    assert after >= before


def test_update_descends_on_a_fixed_batch(small_network, rng):
    features = rng.standard_normal((24, 6))
    labels = rng.integers(0, 4, size=24)
    partition = split(24, range(16, 24))
    bank = make_bank(4, 5, seed=1, scale=0.5)
    batch = CpcBatch(
        features, labels, partition.clean_mask(), ~partition.clean_mask(),
        np.zeros(24, dtype=bool), np.zeros(24, dtype=int),
    )
    start = cpc_objective(bank, small_network, batch)[0].total
    for _ in range(10):
        update(bank, small_network, features, labels, partition, batch_size=24, rng=0, lr=0.01)
    assert cpc_objective(bank, small_network, batch)[0].total < start


def test_partition_cpc_is_strict_at_tau():
    bank = PrototypeBank(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert partition_cpc(bank, np.zeros((3, 2)), [0, 1, 0]).clean_indices.size == 0
    embeddings = np.array([[logit(0.51), 0.0], [logit(0.49), 0.0]])
    partition = partition_cpc(bank, embeddings, [0, 0], provenance=0)
    assert partition.clean_indices.tolist() == [0]
    assert partition.noise_indices.tolist() == [1]
    assert partition.source is CleanerSource.CPC
    assert partition.provenance == 0


def test_lower_tau_admits_a_superset(rng):
    bank = make_bank(3, 4, seed=0, scale=1.0)
    embeddings = rng.standard_normal((100, 4))
    labels = rng.integers(0, 3, size=100)
    loose = partition_cpc(bank, embeddings, labels, tau=0.3)
    strict = partition_cpc(bank, embeddings, labels, tau=0.5)
    assert set(strict.clean_indices) <= set(loose.clean_indices)


def test_cpc_scores_source():
    bank = make_bank(3, 2)
    scores = cpc_scores(bank, np.ones((4, 2)), [0, 1, 2, 0])
    assert scores.source is CleanerSource.CPC
    assert scores.q_clean.shape == (4,)


def test_self_labeled_partition():
    bank = PrototypeBank(np.array([[1.0, 0.0], [0.0, 1.0]]))
    embeddings = np.array([[1.0, 0.1], [1.0, 0.1], [0.1, 1.0]])
    partition = self_labeled_partition(bank, embeddings, [0, 1, 1], provenance=1)
    assert partition.clean_indices.tolist() == [0, 2]
    assert partition.noise_indices.tolist() == [1]
    assert np.all(partition.clean_weights > 0.5)


def test_score_histogram():
    histogram = score_histogram(np.array([0.05, 0.15, 0.95, 1.0]), bins=10)
    assert sum(histogram["counts"]) == 4
    assert histogram["counts"][-1] == 2
    assert len(histogram["edges"]) == 11


def test_bank_checkpoint(tmp_path):
    bank = make_bank(3, 2, seed=4, tau=0.3, alpha=0.5)
    bank.velocity = np.ones((3, 2))
    path = tmp_path / "bank.json"
    save_bank(bank, str(path))
    restored = load_bank(str(path))
    assert np.array_equal(restored.prototypes, bank.prototypes)
    assert np.array_equal(restored.velocity, bank.velocity)
    assert (restored.tau, restored.alpha) == (0.3, 0.5)
