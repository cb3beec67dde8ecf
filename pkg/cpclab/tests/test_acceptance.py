"""Scaled-down trend reproductions. Each takes minutes; run them with ``pytest --runslow -m slow``."""
from functools import lru_cache

import numpy as np
import pytest

from ..config import RunConfig
from ..evaluation import heterogeneity_report
from ..nnet import forward, per_sample_losses
from ..trainer import RNG_STREAMS, build_datasets, init_state, run, warmup
from ..utils import rng_streams

SEEDS = (0, 1, 2)


def blobs_config(seed, num_classes, noise, cleaner_mode="cpc_agn", supervision="gmm", epochs=100):
    return RunConfig.model_validate({
        "seed": seed,
        "cleaner_mode": cleaner_mode,
        "dataset": {"num_classes": num_classes, "dim": 16, "n_per_class": 100, "n_test_per_class": 50},
        "noise": noise,
        "trainer": {"epochs": epochs, "warmup_epochs": 10, "prototype_supervision": supervision,
                    "checkpoints": False},
    })


SYMMETRIC_80 = {"kind": "symmetric", "rate": 0.8}
ASYMMETRIC_40 = {"kind": "asymmetric", "rate": 0.4}


@lru_cache(maxsize=None)
def symmetric_summary(seed, cleaner_mode):
    return run(blobs_config(seed, 8, SYMMETRIC_80, cleaner_mode)).summary


@lru_cache(maxsize=None)
def asymmetric_summary(seed, cleaner_mode, supervision="gmm"):
    return run(blobs_config(seed, 10, ASYMMETRIC_40, cleaner_mode, supervision)).summary


@pytest.mark.slow
def test_clean_losses_differ_between_classes_after_warmup():
    fractions = []
    for seed in SEEDS:
        config = blobs_config(seed, 8, {"kind": "symmetric", "rate": 0.6})
        rngs = rng_streams(seed, RNG_STREAMS)
        dataset, _ = build_datasets(config, rngs)
        state = init_state(config, dataset.features.shape[1], dataset.num_classes, rngs)
        warmup(state.networks, dataset, config.trainer.warmup_epochs, config.optimizer.batch_size)
        losses = per_sample_losses(forward(state.networks[0], dataset.features).logits, dataset.observed_labels)
        report = heterogeneity_report(losses, dataset.observed_labels, dataset.corrupted, dataset.num_classes)
        fractions.append(report.fraction_significant_clean)
    assert np.mean(fractions) >= 0.5


@pytest.mark.slow
def test_cleaner_ordering_under_symmetric_noise():
    wins = 0
    for seed in SEEDS:
        gmm_agn = symmetric_summary(seed, "gmm_agn")["auc_final_third"]["gmm_agn"]
        cpc_agn = symmetric_summary(seed, "cpc_agn")["auc_final_third"]["cpc"]
        cpc_awr = symmetric_summary(seed, "cpc_awr")["auc_final_third"]["cpc"]
        wins += cpc_agn >= gmm_agn + 0.01 and cpc_awr >= cpc_agn + 0.01
    assert wins >= 2


@pytest.mark.slow
def test_cleaner_ordering_under_asymmetric_noise():
    gmm_agn = np.mean([asymmetric_summary(seed, "gmm_agn")["auc_final_third"]["gmm_agn"] for seed in SEEDS])
    gmm_awr = np.mean([asymmetric_summary(seed, "gmm_awr")["auc_final_third"]["gmm_awr"] for seed in SEEDS])
    cpc_agn = np.mean([asymmetric_summary(seed, "cpc_agn")["auc_final_third"]["cpc"] for seed in SEEDS])
    assert gmm_awr < gmm_agn
    assert cpc_agn >= gmm_agn + 0.01


@pytest.mark.slow
def test_prototype_cleaner_improves_accuracy():
    baseline = np.mean([asymmetric_summary(seed, "gmm_agn")["final_test_accuracy"] for seed in SEEDS])
    cpc = np.mean([asymmetric_summary(seed, "cpc_agn")["final_test_accuracy"] for seed in SEEDS])
    assert cpc >= baseline + 0.01


@pytest.mark.slow
def test_cleaners_agree_more_as_training_goes_on():
    summary = asymmetric_summary(0, "cpc_agn")
    consistency_first, _, consistency_last = summary["consistency_thirds"]
    kld_first, _, kld_last = summary["kld_thirds"]
    assert consistency_last > consistency_first
    assert kld_last < kld_first


@pytest.mark.slow
def test_self_labeled_prototypes_do_not_beat_gmm_supervision():
    full = np.mean([asymmetric_summary(seed, "cpc_agn")["final_test_accuracy"] for seed in SEEDS])
    self_labeled = np.mean([asymmetric_summary(seed, "cpc_agn", "self")["final_test_accuracy"] for seed in SEEDS])
    assert self_labeled <= full
