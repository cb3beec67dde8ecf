"""Dual-network training loop: warm-up, then per epoch a cleaning stage and a semi-supervised stage.

Network ``r`` never cleans its own data. The cleaner serving network ``r`` is
built from the other network ``c = 1 - r``: the GMM models ``c``'s losses, and
the prototype bank owned by ``c`` (trained on that GMM split with ``c``'s
projector) scores ``c``'s embeddings. Stage 2 of network ``r`` uses the GMM
split during the CPC warm-up and the prototype split afterwards (in the
``cpc_*`` arms).
"""
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig
from .cpc import (
    CpcLossBreakdown,
    PrototypeBank,
    cpc_scores,
    init_prototypes,
    partition_cpc,
    save_bank,
    score_histogram,
    select_confident,
    self_labeled_partition,
    update,
)
from .datagen import (
    CleanDataset,
    NoisyDataset,
    default_asymmetric_map,
    heterogeneous_separations,
    inject_asymmetric,
    inject_symmetric,
    load_csv,
    make_train_test,
)
from .enums import CleanerSource, NoiseKind, Phase, PrototypeSupervision
from .evaluation import auc, consistency_rate, heterogeneity_report, kld_bernoulli, test_accuracy, window_means
from .exceptions import CpcLabError, DatasetError, EmptyPartitionError, NumericalError, TrainingAborted
from .gmm import ClassAwareFallbackWarning, CleanerScores, DegenerateFitWarning, partition_from_scores
from .nnet import (
    BACKBONE,
    CLASSIFIER,
    NetworkParams,
    SgdConfig,
    backward,
    cross_entropy,
    forward,
    init_network,
    learning_rate,
    param_keys,
    per_sample_losses,
    save_network,
    sgd_step,
)
from .registry import get_global_registry
from .semisup import EvrBreakdown, Partition, evr_step, guess_from_probs, linear_rampup, mixup_batch, refine_labels
from .utils import dumps_line, rng_streams, to_jsonable

logger = logging.getLogger(__name__)

NETWORKS = (0, 1)
RNG_STREAMS = (
    "data", "noise", "init0", "init1", "shuffle0", "shuffle1", "mix0", "mix1", "cpc0", "cpc1",
)


@dataclass(frozen=True)
class EpochRecord:
    """Measurements of one network for one epoch; one JSON line in the metrics stream."""

    epoch: int
    network: int
    phase: Phase
    lr: float
    test_accuracy: float
    auc: Dict[str, Optional[float]] = field(default_factory=dict)
    partition_sizes: Dict[str, int] = field(default_factory=dict)
    stage2_source: Optional[CleanerSource] = None
    provenance: Optional[int] = None
    stage2_precision: Optional[float] = None
    gmm_fits: Dict[str, list] = field(default_factory=dict)
    cpc_loss: Optional[CpcLossBreakdown] = None
    evr: Optional[EvrBreakdown] = None
    warmup_loss: Optional[float] = None
    kld: Optional[float] = None
    consistency: Optional[float] = None
    cpc_histogram: Optional[dict] = None
    flags: Tuple[str, ...] = ()


class MetricsLog:
    """Append-only list of records, mirrored to a JSON-lines file when ``path`` is given."""

    def __init__(self, path=None):
        self.records: List[dict] = []
        self.path = path
        self._handle = open(path, "w", encoding="utf-8") if path else None

    def append(self, record):
        data = to_jsonable(record)
        self.records.append(data)
        if self._handle:
            self._handle.write(dumps_line(data) + "\n")
            self._handle.flush()
        return data

    def close(self):
        if self._handle:
            self._handle.close()
            self._handle = None

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


@dataclass
class TrainingState:
    networks: List[NetworkParams]
    rngs: Dict[str, np.random.Generator]
    banks: List[Optional[PrototypeBank]] = field(default_factory=lambda: [None, None])
    previous_gmm: List[Optional[Partition]] = field(default_factory=lambda: [None, None])


@dataclass(frozen=True)
class Stage1Result:
    """Cleaning outcome for network ``network``; every partition has provenance ``1 - network``."""

    network: int
    gmm_scores: Dict[CleanerSource, CleanerScores]
    gmm_partition: Partition
    cpc_scores: CleanerScores
    cpc_partition: Partition
    cpc_loss: CpcLossBreakdown
    confident_size: int
    flags: Tuple[str, ...] = ()


@dataclass
class RunResult:
    records: List[dict]
    summary: dict
    networks: List[NetworkParams]
    banks: List[Optional[PrototypeBank]]


def build_datasets(config: RunConfig, rngs: Dict[str, np.random.Generator]) -> Tuple[NoisyDataset, CleanDataset]:
    """Training set with injected noise, and the clean test set."""
    data = config.dataset
    data_seed = int(rngs["data"].integers(2 ** 31))
    if data.source == "csv":
        train, test = _split_csv(load_csv(data.csv_path), data.test_fraction, data_seed)
    else:
        separations = data.separations or heterogeneous_separations(data.num_classes, *data.separation_range)
        train, test = make_train_test(
            data.n_per_class, data.n_test_per_class, data.num_classes, data.dim, separations, data_seed,
            counts=data.class_counts,
        )
    noise = config.noise
    noise_seed = int(rngs["noise"].integers(2 ** 31))
    if noise.kind is NoiseKind.ASYMMETRIC:
        class_map = noise.class_map or default_asymmetric_map(train.num_classes)
        noisy = inject_asymmetric(train, noise.rate, class_map, noise_seed)
    else:
        noisy = inject_symmetric(train, noise.rate, noise_seed, exclude_true=noise.exclude_true_class)
    logger.info(
        "dataset: %d train / %d test samples, %d classes, %.1f%% labels corrupted",
        noisy.num_samples, test.num_samples, noisy.num_classes, 100 * noisy.corruption_fraction,
    )
    return noisy, test


def _split_csv(ds: CleanDataset, test_fraction, seed):
    rng = np.random.default_rng(seed)
    test_mask = np.zeros(ds.num_samples, dtype=bool)
    for k in range(ds.num_classes):
        members = rng.permutation(np.flatnonzero(ds.true_labels == k))
        if members.size < 4:
            raise DatasetError("class {} needs at least 4 samples to split into train and test".format(k))
        take = min(max(2, int(round(test_fraction * members.size))), members.size - 2)
        test_mask[members[:take]] = True

    def subset(mask):
        return CleanDataset(ds.features[mask], ds.true_labels[mask], ds.num_classes, ds.separations)

    return subset(~test_mask), subset(test_mask)


def init_state(config: RunConfig, num_features: int, num_classes: int, rngs=None) -> TrainingState:
    rngs = rngs or rng_streams(config.seed, RNG_STREAMS)
    model, opt = config.model, config.optimizer
    hyper = SgdConfig(opt.lr, opt.momentum, opt.weight_decay)
    networks = [
        init_network(
            num_features, num_classes, model.hidden, model.embedding_dim, model.projector_depth,
            model.projector_hidden, seed=rngs["init{}".format(r)], hyper=hyper,
        )
        for r in NETWORKS
    ]
    return TrainingState(networks, rngs)


def _check_finite(value, what):
    if not np.isfinite(value):
        raise NumericalError("{} is not finite".format(what))


def warmup(
    networks: Sequence[NetworkParams],
    dataset: NoisyDataset,
    epochs: int = 1,
    batch_size: int = 64,
    rngs: Optional[Sequence[np.random.Generator]] = None,
    lr: Optional[float] = None,
) -> List[float]:
    """Plain cross-entropy on all (noisy) labels, each network with its own shuffling.

    Returns the mean training loss of every network over the last epoch.
    """
    if epochs < 1:
        raise ValueError("warm-up needs at least one epoch, got {}".format(epochs))
    rngs = rngs or [np.random.default_rng(r) for r in range(len(networks))]
    features, labels = dataset.features, dataset.observed_labels
    mean_losses = []
    for net, rng in zip(networks, rngs):
        keys = param_keys(net, BACKBONE, CLASSIFIER)
        for _ in range(epochs):
            order = rng.permutation(dataset.num_samples)
            losses = []
            for start in range(0, order.size, batch_size):
                rows = order[start:start + batch_size]
                out = forward(net, features[rows])
                loss, d_logits = cross_entropy(out.logits, labels[rows])
                _check_finite(loss, "warm-up cross-entropy")
                sgd_step(net, backward(net, out.cache, d_logits=d_logits), keys=keys, lr=lr)
                losses.append(loss)
        mean_losses.append(float(np.mean(losses)))
    return mean_losses


def _snapshot(networks, dataset):
    outputs = []
    for net in networks:
        out = forward(net, dataset.features)
        outputs.append({
            "losses": per_sample_losses(out.logits, dataset.observed_labels),
            "probs": out.probs,
            "embedding": out.embedding,
        })
    return outputs


def _gmm_scores(config: RunConfig, losses, labels, num_classes):
    registry = get_global_registry()
    options = dict(
        normalize=config.trainer.normalize_losses,
        max_iter=config.trainer.gmm_max_iter,
        tol=config.trainer.gmm_tol,
        seed=config.seed,
    )
    scores = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClassAwareFallbackWarning)
        for source in registry.gmm_sources:
            scores[source] = registry.get_gmm_cleaner(source)(losses, labels, num_classes, **options)
    return scores


def _make_bank(config: RunConfig, prototypes):
    trainer = config.trainer
    return PrototypeBank(
        prototypes, tau=trainer.tau, alpha=trainer.alpha, warmup=trainer.cpc_warmup,
        exclude_confident_from_noise=trainer.exclude_confident_from_noise,
    )


def _bank_seed_indices(config: RunConfig, gmm_partition: Partition, num_samples: int) -> np.ndarray:
    """Samples whose embeddings seed a new bank: the GMM clean set, or every sample when self-supervised."""
    if config.trainer.prototype_supervision is PrototypeSupervision.SELF:
        return np.arange(num_samples)
    return gmm_partition.clean_indices


def epoch_stage1(state: TrainingState, dataset: NoisyDataset, config: RunConfig, lr: float) -> List[Stage1Result]:
    """Clean the data for both networks.

    For network ``r`` with partner ``c``: fit the GMM cleaners on ``c``'s losses,
    train ``c``'s prototype bank and projector on that split (plus the confident
    set from ``c``'s predictions), then score ``c``'s embeddings with the bank.
    """
    mode = get_global_registry().get_cleaner_mode(config.cleaner_mode)
    labels = dataset.observed_labels
    num_classes = dataset.num_classes
    tau = config.trainer.tau
    snapshot = _snapshot(state.networks, dataset)

    results = []
    for r in NETWORKS:
        c = 1 - r
        flags = []
        scores = _gmm_scores(config, snapshot[c]["losses"], labels, num_classes)
        chosen = scores[mode.gmm_source]
        if chosen.fallback_classes:
            flags.append("class_aware_fallback")
        if chosen.degenerate and state.previous_gmm[r] is not None:
            gmm_partition = state.previous_gmm[r].carried_over()
            flags.append("gmm_degenerate")
            warnings.warn(
                "epoch partition for network {} reuses the previous one (degenerate GMM fit)".format(r),
                DegenerateFitWarning,
                stacklevel=2,
            )
        else:
            gmm_partition = partition_from_scores(chosen, labels, tau, provenance=c)
            if chosen.degenerate:
                flags.append("gmm_degenerate")
        state.previous_gmm[r] = gmm_partition

        net = state.networks[c]
        if state.banks[c] is None:
            seed_indices = _bank_seed_indices(config, gmm_partition, dataset.num_samples)
            prototypes = init_prototypes(snapshot[c]["embedding"], labels, seed_indices, num_classes)
            state.banks[c] = _make_bank(config, prototypes)
            flags.append("bank_initialized")
        bank = state.banks[c]
        supervision = gmm_partition
        if config.trainer.prototype_supervision is PrototypeSupervision.SELF:
            supervision = self_labeled_partition(bank, snapshot[c]["embedding"], labels, provenance=c)
        confident = select_confident(
            supervision.noise_indices, supervision.clean_indices, labels, snapshot[c]["probs"]
        )
        cpc_loss = update(
            bank, net, dataset.features, labels, supervision, confident,
            batch_size=config.optimizer.batch_size, rng=state.rngs["cpc{}".format(c)], lr=lr,
        )
        embedding = np.atleast_2d(forward(net, dataset.features).embedding)
        scores_cpc = cpc_scores(bank, embedding, labels)
        results.append(Stage1Result(
            r, scores, gmm_partition, scores_cpc,
            partition_cpc(bank, embedding, labels, tau, provenance=c),
            cpc_loss, len(confident), tuple(flags),
        ))
    return results


def _mean_breakdown(breakdowns: List[EvrBreakdown]) -> EvrBreakdown:
    values = np.mean([[b.labeled, b.unlabeled, b.penalty] for b in breakdowns], axis=0)
    labeled, unlabeled, penalty = (float(v) for v in values)
    lambda_u = breakdowns[0].lambda_u
    evr = labeled + lambda_u * unlabeled
    return EvrBreakdown(labeled, unlabeled, lambda_u, penalty, evr, evr + penalty)


def epoch_stage2(
    state: TrainingState,
    r: int,
    partition: Partition,
    dataset: NoisyDataset,
    config: RunConfig,
    epoch: int,
    lr: float,
) -> EvrBreakdown:
    """One pass of vicinal-risk training of network ``r`` on ``partition``.

    Labeled batches walk the clean set once; unlabeled batches cycle through
    the noise set. Network ``1 - r`` co-refines and co-guesses the targets.
    """
    if partition.provenance == r:
        raise AssertionError("network {} cannot train on a partition derived from its own outputs".format(r))
    if partition.clean_indices.size == 0:
        raise EmptyPartitionError("epoch {}: the clean set for network {} is empty".format(epoch, r))
    trainer = config.trainer
    batch_size = config.optimizer.batch_size
    net, other = state.networks[r], state.networks[1 - r]
    shuffle = state.rngs["shuffle{}".format(r)]
    mix = state.rngs["mix{}".format(r)]
    features, labels = dataset.features, dataset.observed_labels
    lambda_u = trainer.lambda_u * linear_rampup(epoch, trainer.warmup_epochs, trainer.lambda_u_rampup)

    labeled_order = shuffle.permutation(partition.clean_indices.size)
    unlabeled = shuffle.permutation(partition.noise_indices.copy())
    breakdowns = []
    for b, start in enumerate(range(0, labeled_order.size, batch_size)):
        positions = labeled_order[start:start + batch_size]
        rows_x = partition.clean_indices[positions]
        x_l = features[rows_x]
        p_avg = (forward(net, x_l).probs + forward(other, x_l).probs) / 2.0
        targets_x = refine_labels(labels[rows_x], partition.clean_weights[positions], np.atleast_2d(p_avg),
                                  trainer.temperature)
        inputs, targets = [x_l], [targets_x]
        if unlabeled.size:
            rows_u = np.take(unlabeled, np.arange(b * batch_size, (b + 1) * batch_size), mode="wrap")
            x_u = features[rows_u]
            targets_u = guess_from_probs(
                [np.atleast_2d(forward(net, x_u).probs), np.atleast_2d(forward(other, x_u).probs)],
                trainer.temperature,
            )
            inputs.append(x_u)
            targets.append(targets_u)
        is_labeled = np.zeros(sum(len(chunk) for chunk in inputs), dtype=bool)
        is_labeled[: rows_x.size] = True
        batch = mixup_batch(
            np.concatenate(inputs), np.concatenate(targets), is_labeled, trainer.mix_alpha, mix,
            max_lambda=trainer.max_lambda,
        )
        breakdowns.append(evr_step(net, batch, lambda_u, lr=lr, prior_weight=trainer.prior_weight))
    return _mean_breakdown(breakdowns)


def _safe_auc(scores, is_clean):
    if is_clean.all() or not is_clean.any():
        return None
    return auc(scores, is_clean)


def _gate_epoch(config: RunConfig) -> int:
    """First epoch whose stage 2 may use the prototype split."""
    trainer = config.trainer
    return trainer.warmup_epochs + int(math.ceil(trainer.cpc_warmup * trainer.epochs - 1e-9))


def _stage1_record(result: Stage1Result, dataset, config, epoch, lr, stage2, evr, accuracy, mode):
    is_clean = ~dataset.corrupted
    gmm_q = result.gmm_scores[mode.gmm_source].q_clean
    cpc_q = result.cpc_scores.q_clean
    aucs = {source.short_name: _safe_auc(scores.q_clean, is_clean) for source, scores in result.gmm_scores.items()}
    aucs[CleanerSource.CPC.short_name] = _safe_auc(cpc_q, is_clean)
    clean_rows = stage2.clean_indices
    return EpochRecord(
        epoch=epoch,
        network=result.network,
        phase=Phase.TRAIN,
        lr=lr,
        test_accuracy=accuracy,
        auc=aucs,
        partition_sizes={
            "gmm_clean": int(result.gmm_partition.clean_indices.size),
            "gmm_noise": int(result.gmm_partition.noise_indices.size),
            "cpc_clean": int(result.cpc_partition.clean_indices.size),
            "cpc_noise": int(result.cpc_partition.noise_indices.size),
            "stage2_clean": int(clean_rows.size),
            "stage2_noise": int(stage2.noise_indices.size),
            "confident": result.confident_size,
        },
        stage2_source=stage2.source,
        provenance=stage2.provenance,
        stage2_precision=float(is_clean[clean_rows].mean()) if clean_rows.size else None,
        gmm_fits={source.short_name: list(scores.fits) for source, scores in result.gmm_scores.items()},
        cpc_loss=result.cpc_loss,
        evr=evr,
        kld=kld_bernoulli(gmm_q, cpc_q),
        consistency=consistency_rate(gmm_q, cpc_q, config.trainer.tau),
        cpc_histogram=score_histogram(cpc_q),
        flags=result.flags + (("fallback_partition",) if stage2.fallback else ()),
    )


def _summary(config: RunConfig, dataset: NoisyDataset, records: List[dict], heterogeneity):
    final = [record for record in records if record["phase"] == Phase.TRAIN.value]
    summary = {
        "seed": config.seed,
        "cleaner_mode": config.cleaner_mode.value,
        "prototype_supervision": config.trainer.prototype_supervision.value,
        "config": config.model_dump(mode="json"),
        "num_records": len(records),
        "corruption_fraction": dataset.corruption_fraction,
        "final_test_accuracy": records[-1]["test_accuracy"] if records else None,
        "heterogeneity": heterogeneity,
        "auc_final_third": {},
        "kld_thirds": None,
        "consistency_thirds": None,
    }
    if len(final) >= 6:
        for cleaner in sorted({name for record in final for name in record["auc"]}):
            values = [record["auc"].get(cleaner) for record in final]
            if sum(value is not None for value in values) >= 3:
                summary["auc_final_third"][cleaner] = window_means(values)[2]
        summary["kld_thirds"] = window_means(record["kld"] for record in final)
        summary["consistency_thirds"] = window_means(record["consistency"] for record in final)
    return summary


def _heterogeneity(snapshot, dataset):
    reports = []
    for output in snapshot:
        report = heterogeneity_report(
            output["losses"], dataset.observed_labels, dataset.corrupted, dataset.num_classes
        )
        reports.append({
            "fraction_significant_clean": report.fraction_significant_clean,
            "fraction_significant_noise": report.fraction_significant_noise,
            "classes": list(report.rows()),
        })
    return reports


def run(config: RunConfig, output_dir: Optional[str] = None) -> RunResult:
    """Train both networks end to end.

    With ``output_dir`` the run writes ``metrics.jsonl`` (one record per epoch
    and network), ``summary.json`` and, unless disabled, the network and bank
    checkpoints. A failing epoch raises :class:`TrainingAborted` carrying the
    records logged so far.
    """
    trainer = config.trainer
    mode = get_global_registry().get_cleaner_mode(config.cleaner_mode)
    rngs = rng_streams(config.seed, RNG_STREAMS)
    dataset, test_set = build_datasets(config, rngs)
    state = init_state(config, dataset.features.shape[1], dataset.num_classes, rngs)
    drop_epoch = config.optimizer.lr_drop_epoch or trainer.lr_drop_default
    gate = _gate_epoch(config)
    heterogeneity = None

    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
    log = MetricsLog(os.path.join(output_dir, "metrics.jsonl") if output_dir else None)
    try:
        for epoch in range(trainer.epochs):
            lr = learning_rate(config.optimizer.lr, epoch, drop_epoch)
            if epoch < trainer.warmup_epochs:
                losses = warmup(
                    state.networks, dataset, 1, config.optimizer.batch_size,
                    [state.rngs["shuffle{}".format(r)] for r in NETWORKS], lr,
                )
                accuracy = test_accuracy(state.networks, test_set, trainer.ensemble_inference)
                for r in NETWORKS:
                    log.append(EpochRecord(epoch, r, Phase.WARMUP, lr, accuracy, warmup_loss=losses[r]))
                if epoch == trainer.warmup_epochs - 1:
                    heterogeneity = _heterogeneity(_snapshot(state.networks, dataset), dataset)
                logger.info("epoch %d warm-up: loss %.4f / %.4f, test accuracy %.4f",
                            epoch, losses[0], losses[1], accuracy)
                continue

            results = epoch_stage1(state, dataset, config, lr)
            stage2, evrs = [], []
            for result in results:
                use_cpc = mode.partition_source is CleanerSource.CPC and epoch >= gate
                partition = result.cpc_partition if use_cpc else result.gmm_partition
                stage2.append(partition)
                evrs.append(epoch_stage2(state, result.network, partition, dataset, config, epoch, lr))
            accuracy = test_accuracy(state.networks, test_set, trainer.ensemble_inference)
            for result, partition, evr in zip(results, stage2, evrs):
                record = log.append(
                    _stage1_record(result, dataset, config, epoch, lr, partition, evr, accuracy, mode)
                )
            logger.info("epoch %d: stage 2 from %s, AUC %s, test accuracy %.4f",
                        epoch, stage2[0].source.value, record["auc"], accuracy)
    except CpcLabError as error:
        log.close()
        raise TrainingAborted("run aborted: {}".format(error), log.records) from error
    log.close()

    summary = _summary(config, dataset, log.records, heterogeneity)
    if output_dir:
        if trainer.checkpoints:
            for r in NETWORKS:
                save_network(state.networks[r], os.path.join(output_dir, "net{}.json".format(r + 1)))
                if state.banks[r] is not None:
                    save_bank(state.banks[r], os.path.join(output_dir, "bank{}.json".format(r + 1)))
        with open(os.path.join(output_dir, "summary.json"), "w", encoding="utf-8") as handle:
            handle.write(dumps_line(summary) + "\n")
    return RunResult(log.records, summary, state.networks, state.banks)
