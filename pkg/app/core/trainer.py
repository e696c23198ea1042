"""
Adversarial semi-supervised optimization.

Per iteration one labeled and one unlabeled mini-batch are drawn. The labeled path descends the
cross-entropy L for every parameter. The unlabeled path sends the pooled features through the
gradient reversal layer and descends the head loss -lambda*H, so the classifier ascends H while
the feature extractor descends it. Both backward passes accumulate into one gradient per
parameter before a single SGD update.
"""

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.dataset import Dataset, DatasetSplit
from app.core.network import Network, build_network, cross_entropy, entropy
from app.core.tensor import Parameter, Tape, scale, softmax_rows
from app.errors import ConfigError, ContractError, DegenerateCovariance, DimensionError
from app.models import MetricsRecord, ModelConfig, ParamGroup, SopConfig, TrainConfig, TrainMode

logger = logging.getLogger("SSLTrainer")

RNG_STREAMS = ("init", "labeled", "unlabeled", "aug_labeled", "aug_unlabeled")

Gradients = Dict[str, np.ndarray]


@dataclass
class Batch:
    images: np.ndarray
    ids: np.ndarray
    labels: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.ids.shape[0])


@dataclass
class FitResult:
    mode: TrainMode
    records: List[MetricsRecord]
    best_val_acc: Optional[float]
    best_iteration: int
    test_acc: Optional[float]
    iterations_run: int
    final_state: Dict[str, np.ndarray]
    best_state: Dict[str, np.ndarray]
    entropy_history: List[float] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "mode": self.mode.value,
            "best_val_acc": self.best_val_acc,
            "best_iteration": self.best_iteration,
            "test_acc": self.test_acc,
            "iterations_run": self.iterations_run,
        }


@contextmanager
def reporting_sample_ids(batch: Batch):
    """Re-raise DegenerateCovariance with the dataset id of the offending batch sample."""
    try:
        yield
    except DegenerateCovariance as e:
        if e.sample_index is None:
            raise
        raise e.with_sample_id(int(batch.ids[e.sample_index])) from e


def _forward(network: Network, batch: Batch, reverse_gradient: bool = False):
    with reporting_sample_ids(batch):
        return network.logits(batch.images, reverse_gradient=reverse_gradient)


def labeled_gradients(network: Network, batch: Batch) -> Tuple[float, Gradients]:
    """Cross-entropy value and its gradient for every parameter."""
    if len(batch) == 0:
        raise ContractError("labeled batch is empty")
    with Tape() as tape:
        loss = cross_entropy(_forward(network, batch), batch.labels)
    return loss.item(), tape.parameter_gradients(loss, network.parameters)


def unlabeled_gradients(network: Network, batch: Batch, mode: TrainMode, lambda_: float) -> Tuple[float, Gradients]:
    """
    Entropy value and the gradient of the unlabeled head loss.
    Adversarial modes: GRL before the classifier, head loss -lambda*H.
    ent_cov: no GRL, head loss +lambda*H, so both groups minimize H.
    """
    if len(batch) == 0:
        raise ContractError("unlabeled batch is empty")
    with Tape() as tape:
        probs = softmax_rows(_forward(network, batch, reverse_gradient=mode.adversarial))
        H = entropy(probs)
        head = scale(H, -lambda_ if mode.adversarial else lambda_)
    return H.item(), tape.parameter_gradients(head, network.parameters)


def combined_gradients(network: Network, labeled: Batch, unlabeled: Optional[Batch], config: TrainConfig):
    """Accumulated gradients of both paths, exactly what one combined train_step applies."""
    L, grads = labeled_gradients(network, labeled)
    H = float("nan")
    if _uses_unlabeled_path(config) and unlabeled is not None:
        H, extra = unlabeled_gradients(network, unlabeled, config.mode, config.lambda_)
        grads = {name: grads[name] + extra[name] for name in grads}
    return L, H, grads


def _uses_unlabeled_path(config: TrainConfig) -> bool:
    return config.mode.uses_unlabeled and config.lambda_ > 0


def sgd_update(
    params: Sequence[Parameter],
    grads: Gradients,
    lr_by_group: Dict[ParamGroup, float],
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    velocity: Optional[Dict[str, np.ndarray]] = None,
) -> None:
    """
    theta <- theta - lr(group) * g, in place on the parameter list.
    With momentum m > 0 the step uses v <- m*v + g (+ weight_decay*theta), kept in `velocity`.
    """
    for param in params:
        if param.name not in grads:
            raise ContractError(f"no gradient for parameter {param.name}")
        grad = grads[param.name]
        if grad.shape != param.data.shape:
            raise DimensionError(f"gradient shape {grad.shape} != parameter shape {param.data.shape} for {param.name}")
        lr = lr_by_group[param.group]
        if weight_decay:
            grad = grad + weight_decay * param.data
        if momentum:
            if velocity is None:
                raise ContractError("momentum needs a velocity buffer")
            step = momentum * velocity.get(param.name, np.zeros_like(grad)) + grad
            velocity[param.name] = step
            grad = step
        param.data = param.data - lr * grad


def train_step(
    network: Network,
    labeled: Batch,
    unlabeled: Optional[Batch],
    config: TrainConfig,
    velocity: Optional[Dict[str, np.ndarray]] = None,
    iteration: int = 0,
) -> MetricsRecord:
    """One optimization step; returns L and H measured before the update."""
    started = time.perf_counter()
    lr = config.lr_by_group()
    if config.sequential_updates:
        L, grads = labeled_gradients(network, labeled)
        sgd_update(network.parameters, grads, lr, config.momentum, config.weight_decay, velocity)
        H = float("nan")
        if _uses_unlabeled_path(config) and unlabeled is not None:
            H, grads = unlabeled_gradients(network, unlabeled, config.mode, config.lambda_)
            sgd_update(network.parameters, grads, lr, config.momentum, config.weight_decay, velocity)
    else:
        L, H, grads = combined_gradients(network, labeled, unlabeled, config)
        sgd_update(network.parameters, grads, lr, config.momentum, config.weight_decay, velocity)
    return MetricsRecord(
        iteration=iteration,
        labeled_loss=L,
        entropy=H,
        ms=(time.perf_counter() - started) * 1000.0,
    )


def evaluate(network: Network, split: DatasetSplit, batch_size: int = 100) -> float:
    """Fraction of argmax-correct predictions, evaluated in fixed chunks."""
    if len(split) == 0:
        raise ContractError(f"cannot evaluate on empty {split.split.value} split")
    if split.labels is None:
        raise ContractError(f"{split.split.value} split has no labels")
    correct = 0
    for start in range(0, len(split), batch_size):
        batch = Batch(split.images[start : start + batch_size], split.ids[start : start + batch_size])
        predictions = np.argmax(_forward(network, batch).data, axis=-1)
        correct += int(np.sum(predictions == split.labels[start : start + batch_size]))
    return correct / len(split)


def measure_entropy(network: Network, batch: Batch) -> float:
    return entropy(softmax_rows(_forward(network, batch))).item()


class SSLTrainer:
    """
    Runs one training configuration on one dataset.

    Five independent RNG streams are spawned from the run seed (initialization, labeled and
    unlabeled sampling, and the two flip-augmentation streams), so switching the unlabeled path
    on or off never perturbs the labeled trajectory.
    """

    def __init__(
        self,
        dataset: Dataset,
        train_config: TrainConfig,
        model_config: Optional[ModelConfig] = None,
        sop_config: Optional[SopConfig] = None,
    ):
        self.dataset = dataset
        self.config = train_config
        self.model_config = model_config or ModelConfig()
        self.sop_config = sop_config or SopConfig()
        self.logger = logging.getLogger("SSLTrainer")
        self._check_data()

        seeds = np.random.SeedSequence(train_config.seed).spawn(len(RNG_STREAMS))
        self.rngs = {name: np.random.default_rng(seed) for name, seed in zip(RNG_STREAMS, seeds)}
        self.network = build_network(
            train_config.mode,
            self.model_config,
            self.sop_config,
            dataset.image_shape,
            dataset.num_classes,
            self.rngs["init"],
        )
        self.velocity: Dict[str, np.ndarray] = {}

    def _check_data(self) -> None:
        mode = self.config.mode
        if len(self.dataset.labeled) == 0:
            raise ConfigError("training needs a non-empty labeled set")
        if mode.uses_unlabeled and len(self.dataset.unlabeled) == 0:
            raise ConfigError(f"mode {mode.value} needs unlabeled data but the unlabeled set is empty")

    def sample_batch(self, split: DatasetSplit, size: int, rng, flip_rng) -> Batch:
        """Uniform sampling with replacement; optional per-sample horizontal flip."""
        indices = rng.integers(0, len(split), size=size)
        images = split.images[indices]
        if self.config.horizontal_flip:
            flip = flip_rng.random(size) < 0.5
            images = np.where(flip[:, None, None, None], images[..., ::-1], images)
        return Batch(
            images=images,
            ids=split.ids[indices],
            labels=None if split.labels is None else split.labels[indices],
        )

    def fit(self, on_record: Optional[Callable[[MetricsRecord], None]] = None) -> FitResult:
        config, dataset, network = self.config, self.dataset, self.network
        has_unlabeled = len(dataset.unlabeled) > 0
        has_validation = len(dataset.validation) > 0
        has_test = len(dataset.test) > 0

        records: List[MetricsRecord] = []
        entropy_history: List[float] = []
        best_val, best_iteration, best_test = None, 0, None
        best_state = network.state_dict()
        stale_evaluations = 0
        iterations_run = 0
        started = time.perf_counter()

        self.logger.info(
            f"Training {config.mode.value}: lambda={config.lambda_}, {config.iterations} iterations, "
            f"batches {config.batch_labeled}/{config.batch_unlabeled}, seed {config.seed}"
        )
        for iteration in range(1, config.iterations + 1):
            labeled = self.sample_batch(
                dataset.labeled, config.batch_labeled, self.rngs["labeled"], self.rngs["aug_labeled"]
            )
            unlabeled = None
            if has_unlabeled:
                unlabeled = self.sample_batch(
                    dataset.unlabeled, config.batch_unlabeled, self.rngs["unlabeled"], self.rngs["aug_unlabeled"]
                )
            step = train_step(network, labeled, unlabeled, config, self.velocity, iteration)
            iterations_run = iteration
            if unlabeled is not None and _uses_unlabeled_path(config):
                # H of the same unlabeled batch under the updated parameters
                entropy_history.append(measure_entropy(network, unlabeled))

            if iteration % config.eval_every and iteration != config.iterations:
                continue

            val_acc = evaluate(network, dataset.validation, config.eval_batch_size) if has_validation else None
            test_acc = evaluate(network, dataset.test, config.eval_batch_size) if has_test else None
            record = MetricsRecord(
                iteration=iteration,
                labeled_loss=step.labeled_loss,
                entropy=measure_entropy(network, unlabeled) if unlabeled is not None else float("nan"),
                val_acc=val_acc,
                test_acc=test_acc,
                ms=(time.perf_counter() - started) * 1000.0,
            )
            records.append(record)
            if on_record is not None:
                on_record(record)
            self.logger.info(
                f"[{config.mode.value}] iter {iteration}: L={record.labeled_loss:.4f} H={record.entropy:.4f} "
                f"val={val_acc} test={test_acc}"
            )

            if val_acc is not None and (best_val is None or val_acc > best_val):
                best_val, best_iteration, best_test = val_acc, iteration, test_acc
                best_state = network.state_dict()
                stale_evaluations = 0
            elif config.early_stop_patience is not None:
                stale_evaluations += 1
                if stale_evaluations >= config.early_stop_patience:
                    self.logger.info(f"Early stop at iteration {iteration}, best validation {best_val}")
                    break

        if best_val is None:
            best_iteration = iterations_run
            best_test = records[-1].test_acc if records else None
            best_state = network.state_dict()

        return FitResult(
            mode=config.mode,
            records=records,
            best_val_acc=best_val,
            best_iteration=best_iteration,
            test_acc=best_test,
            iterations_run=iterations_run,
            final_state=network.state_dict(),
            best_state=best_state,
            entropy_history=entropy_history,
        )


def run_baseline(
    mode: TrainMode,
    dataset: Dataset,
    train_config: TrainConfig,
    model_config: Optional[ModelConfig] = None,
    sop_config: Optional[SopConfig] = None,
) -> FitResult:
    """
    Train one of the five schemes with otherwise identical settings:
    sup (average pooling, linear head, labeled only), sup_cov (second-order, labeled only),
    ent_cov (entropy minimized by both groups), ours_no_cov (adversarial, average pooling), ours.
    """
    config = train_config.model_copy(update={"mode": mode})
    return SSLTrainer(dataset, config, model_config, sop_config).fit()
