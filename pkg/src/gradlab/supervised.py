"""Stationary and non-stationary supervised classification.

Non-stationarity is injected by periodically relabeling every example with
a fresh uniform class permutation (composed with earlier ones), so the task
stays solvable after each event and recovery is well defined. The test
split is relabeled with the same permutations.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .diagnostics import DiagnosticsReport, ProbeBatch, ProbeConfig, run_probes
from .errors import ConfigError, FormatError, InputError, NumericError
from .networks import ArchitectureSpec, backward_network, build_network, forward_network
from .optim import make_optimizer_state, optimizer_step
from .rng import child_rng

__all__ = [
    "Dataset",
    "ShuffleSchedule",
    "SupervisedConfig",
    "SupervisedResult",
    "load_cifar10_binary",
    "make_synthetic_classification",
    "make_synthetic_task",
    "apply_label_shuffle",
    "shuffle_events_until",
    "cross_entropy_with_softmax",
    "evaluate_accuracy",
    "train_supervised",
]

_CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes


@dataclass
class Dataset:
    inputs: np.ndarray  # (n, dim) standardized or (n, 3, 32, 32) in [0, 1]
    labels: np.ndarray  # (n,) int64 in [0, class_count)
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise InputError("inputs and labels length mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise InputError("labels out of range")

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class ShuffleSchedule:
    period_epochs: int
    seed: int
    mode: str = "class_permutation"

    def __post_init__(self):
        if self.period_epochs < 1:
            raise ConfigError("shuffle period must be >= 1")
        if self.mode != "class_permutation":
            raise ConfigError(f"unknown shuffle mode '{self.mode}'")


@dataclass
class SupervisedConfig:
    batch_size: int = 256
    epochs: int = 100
    learning_rate: float = 2.5e-4
    optimizer: str = "adam"
    arch: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    optimizer_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.learning_rate <= 0:
            raise ConfigError("batch_size, epochs and learning_rate must be positive")


def load_cifar10_binary(path: str, split: str = "train") -> Dataset:
    """Read one CIFAR-10 binary batch file (3073-byte records)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % _CIFAR_RECORD != 0:
        raise FormatError(
            f"file size {len(raw)} is not a multiple of the {_CIFAR_RECORD}-byte record",
            byte_offset=(len(raw) // _CIFAR_RECORD) * _CIFAR_RECORD,
        )
    data = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = data[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise FormatError(f"label byte {labels[bad[0]]} > 9", byte_offset=int(bad[0]) * _CIFAR_RECORD)
    pixels = data[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(inputs=pixels, labels=labels, class_count=10, split=split)


def make_synthetic_classification(
    class_count: int, dim: int, n: int, margin: float, rng: np.random.Generator, split: str = "train"
) -> Dataset:
    """Gaussian clusters with pairwise class-mean separation margin * sqrt(dim).

    Features are standardized over the generated sample; classes are balanced.
    """
    if class_count < 2:
        raise InputError("need at least 2 classes")
    if dim < class_count:
        raise InputError("dim must be >= class_count for equispaced class means")
    if n < 1:
        raise InputError("empty dataset requested")
    scale = margin * np.sqrt(dim) / np.sqrt(2.0)
    means = np.zeros((class_count, dim))
    means[np.arange(class_count), np.arange(class_count)] = scale
    labels = np.arange(n, dtype=np.int64) % class_count
    labels = labels[rng.permutation(n)]
    inputs = means[labels] + rng.standard_normal((n, dim))
    mu = inputs.mean(axis=0)
    sd = inputs.std(axis=0)
    sd[sd == 0] = 1.0
    return Dataset(inputs=(inputs - mu) / sd, labels=labels, class_count=class_count, split=split)


def make_synthetic_task(class_count: int, dim: int, n_train: int, n_test: int, margin: float, rng):
    """Train/test pair drawn from the same clusters, standardized with train stats."""
    both = make_synthetic_classification(class_count, dim, n_train + n_test, margin, rng)
    train = Dataset(both.inputs[:n_train], both.labels[:n_train], class_count, "train")
    test = Dataset(both.inputs[n_train:], both.labels[n_train:], class_count, "test")
    return train, test


def _composed_permutation(schedule: ShuffleSchedule, n_events: int, class_count: int) -> np.ndarray:
    perm = np.arange(class_count)
    for k in range(n_events):
        fresh = child_rng(schedule.seed, k).permutation(class_count)
        perm = fresh[perm]
    return perm


def shuffle_events_until(schedule: ShuffleSchedule | None, epoch: int) -> int:
    if schedule is None:
        return 0
    return epoch // schedule.period_epochs


def apply_label_shuffle(dataset: Dataset, schedule: ShuffleSchedule, epoch: int) -> Dataset:
    """View of the dataset with labels relabeled by all events up to `epoch`."""
    n_events = shuffle_events_until(schedule, epoch)
    if n_events == 0:
        return dataset
    perm = _composed_permutation(schedule, n_events, dataset.class_count)
    return Dataset(dataset.inputs, perm[dataset.labels], dataset.class_count, dataset.split)


def cross_entropy_with_softmax(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its logit gradient (softmax - onehot, scaled 1/batch)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    loss = -float(log_probs[np.arange(b), labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[np.arange(b), labels] -= 1.0
    return loss, dlogits / b


def evaluate_accuracy(params, dataset: Dataset, batch_size: int = 2048) -> float:
    """Argmax-match ratio; argmax breaks ties toward the lowest class index."""
    hits = 0
    for start in range(0, len(dataset), batch_size):
        x = dataset.inputs[start : start + batch_size]
        y = dataset.labels[start : start + batch_size]
        outputs = forward_network(params, x).outputs
        hits += int(np.count_nonzero(np.argmax(outputs, axis=1) == y))
    return hits / len(dataset)


@dataclass
class SupervisedResult:
    params: object
    optimizer_state: object
    final_accuracy: float
    final_test_accuracy: float | None
    rows: int


def train_supervised(
    config: SupervisedConfig,
    dataset: Dataset,
    schedule: ShuffleSchedule | None = None,
    *,
    test_dataset: Dataset | None = None,
    probe_config: ProbeConfig | None = None,
    probe_every: int = 1,
    seed: int = 0,
    on_row=None,
) -> SupervisedResult:
    """Epoch loop over shuffled minibatches; emits one metrics row per probe epoch.

    Deterministic under (config, dataset, schedule, seed). Mutates only the
    network parameters and optimizer state it creates.
    """
    probe_config = probe_config or ProbeConfig()
    init_rng = child_rng(seed, 0)
    batch_rng = child_rng(seed, 1)
    in_dim = dataset.inputs.shape[1:] if dataset.inputs.ndim > 2 else int(dataset.inputs.shape[1])
    params = build_network(config.arch, in_dim, dataset.class_count, init_rng)
    state = make_optimizer_state(config.optimizer, config.learning_rate, **config.optimizer_options)

    n_probe = min(probe_config.probe_batch_size, len(dataset))
    probe_batch = ProbeBatch(inputs=dataset.inputs[:n_probe], labels=dataset.labels[:n_probe])

    def probe_loss_fn(p):
        res = forward_network(p, probe_batch.inputs)
        loss, dlogits = cross_entropy_with_softmax(res.outputs, probe_batch.labels)
        return loss, backward_network(p, res.caches, dlogits)

    n = len(dataset)
    rows = 0
    accuracy = 0.0
    test_accuracy = None
    for epoch in range(config.epochs):
        view = apply_label_shuffle(dataset, schedule, epoch) if schedule else dataset
        shuffle_event = int(
            schedule is not None and epoch > 0 and epoch % schedule.period_epochs == 0
        )
        order = batch_rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            res = forward_network(params, view.inputs[idx])
            loss, dlogits = cross_entropy_with_softmax(res.outputs, view.labels[idx])
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            bundle = backward_network(params, res.caches, dlogits)
            params = optimizer_step(params, bundle, res.caches, state)
            epoch_losses.append(loss)
        accuracy = evaluate_accuracy(params, view)
        if test_dataset is not None:
            test_view = apply_label_shuffle(test_dataset, schedule, epoch) if schedule else test_dataset
            test_accuracy = evaluate_accuracy(params, test_view)
        if on_row is not None and epoch % probe_every == 0:
            report = run_probes(
                params, probe_batch, probe_loss_fn, probe_config, child_rng(seed, 2, epoch), step=epoch
            )
            row = {
                "step": epoch,
                "loss": float(np.mean(epoch_losses)),
                "accuracy": accuracy,
                "test_accuracy": test_accuracy if test_accuracy is not None else accuracy,
                "shuffle_event": shuffle_event,
                "dormant_fraction": report.dormant_fraction,
                "srank": report.srank,
                "hessian_trace": report.hessian_trace,
                "probe_loss": report.probe_loss,
                "mean_q": report.mean_q,
            }
            for i, g in enumerate(report.per_layer_grad_norms):
                row[f"grad_norm_L{i}"] = g
            on_row(row)
            rows += 1
    return SupervisedResult(
        params=params,
        optimizer_state=state,
        final_accuracy=accuracy,
        final_test_accuracy=test_accuracy,
        rows=rows,
    )
