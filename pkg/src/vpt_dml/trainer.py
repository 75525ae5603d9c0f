"""
Training, evaluation, pretraining and benchmarking.

One training step:
1. Page the batch's classes into the class-prompt buffer
2. Sample tower: patchify → encode with deep prompts → head → L2 normalize
3. Proxy tower (or the configured ablation) → one proxy sample per image
4. Accumulate proxy samples per class into semantic proxies
5. Fuse with bias proxies and evaluate the Proxy-Anchor loss
6. Backward, then update every parameter that received a gradient

All randomness inside a step (augmentation, accumulation order) comes from
substreams keyed by (seed, step), so prefetching, paging and resuming never
change the numbers.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import queue
import statistics
import threading
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import TextIO

import numpy as np
from rich.console import Console
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, config_for_method, save_config
from .data import (
    Batch,
    ClassSplits,
    Dataset,
    balanced_sampler,
    load_dataset,
    make_batch,
    split_classes,
)
from .loss import NonFiniteLossError, cross_entropy, training_loss
from .metrics import RetrievalReport, evaluate
from .optim import OptimizerState, global_grad_norm, optimizer_step
from .paging import PagingBuffer
from .params import ParameterStore
from .peft import PeftResult, apply_method
from .proxy import ProxyState, accumulate_batch, proxy_samples
from .tensor import Graph, Tensor
from .utils import DMLError, derive_rng, ensure_directory, stopwatch
from .vit import ParamCount, ViTModel, count_params, head

logger = logging.getLogger(__name__)

AUGMENT_STREAM = 11
ACCUMULATE_STREAM = 12
PRETRAIN_STREAM = 13
EVAL_BATCH = 64

TRAIN_HEADER = ["step", "loss", "grad_norm", "page_ins", "step_ms"]
EVAL_HEADER = ["step", "R@1", "R@2", "R@4", "MAP@R"]
CHECKPOINT_NAME = "checkpoint.vpck"
BACKBONE_PREFIXES = ("patch_embed.", "pos_embed", "cls_token", "blocks.", "head.")


class TrainingAborted(DMLError):
    """Raised when a step produces a non-finite loss or gradient."""

    def __init__(self, step: int, loss: float, reason: str = "non-finite loss") -> None:
        self.step = step
        self.loss = loss
        super().__init__(f"Training aborted at step {step}: {reason} (loss={loss})")


@dataclass
class StepResult:
    step: int
    loss: float
    grad_norm: float
    grad_norms: dict[str, float]
    timings: dict[str, float]
    page_ins: int


@dataclass
class TrainingSummary:
    steps: int
    losses: list[float] = field(default_factory=list)
    step_ms: list[float] = field(default_factory=list)
    reports: list[tuple[int, RetrievalReport]] = field(default_factory=list)
    peak_resident_bytes: int = 0

    @property
    def final_report(self) -> RetrievalReport:
        return self.reports[-1][1] if self.reports else RetrievalReport()

    @property
    def median_step_ms(self) -> float:
        return statistics.median(self.step_ms) if self.step_ms else 0.0


def load_backbone(model: ViTModel, path: str | Path) -> None:
    """
    Copy backbone tensors from a checkpoint into `model`.

    Raises:
        CheckpointError: If a backbone tensor is missing, has the wrong shape,
            or the file holds unexpected names
    """
    state = load_checkpoint(path)
    backbone = [name for name in model.params if ".adapter." not in name]
    missing = [name for name in backbone if name not in state]
    if missing:
        raise CheckpointError(
            f"Checkpoint {path} is missing {len(missing)} tensors, e.g. {missing[0]}"
        )
    extra = [
        name for name in state
        if name not in model.params
        and ".adapter." not in name
        and not name.startswith(("prompts.", "proxy.", "optim.", "meta."))
    ]
    if extra:
        raise CheckpointError(f"Checkpoint {path} has unexpected tensors, e.g. {extra[0]}")
    for name in backbone:
        tensor = model.params[name]
        if state[name].shape != tensor.shape:
            raise CheckpointError(
                f"Shape mismatch for {name}: checkpoint {state[name].shape}, model {tensor.shape}"
            )
        tensor.data = state[name].astype(tensor.data.dtype)
    logger.info("Initialized backbone from %s", path)


class Experiment:
    """Everything one run trains: backbone, PEFT additions, proxies, optimizer, buffer."""

    def __init__(self, config: ExperimentConfig, train_set: Dataset, eval_set: Dataset,
                 model: ViTModel, peft: PeftResult, proxies: ProxyState,
                 optimizer: OptimizerState, paging: PagingBuffer | None) -> None:
        self.config = config
        self.train_set = train_set
        self.eval_set = eval_set
        self.model = model
        self.peft = peft
        self.proxies = proxies
        self.optimizer = optimizer
        self.paging = paging

    @classmethod
    def build(cls, config: ExperimentConfig,
              datasets: tuple[Dataset, Dataset] | None = None) -> Experiment:
        seed = config.run.seed
        if datasets is None:
            splits = load_splits(config)
            datasets = (splits.train, splits.eval)
        train_set, eval_set = datasets
        model = ViTModel(config.model, seed=seed)
        if config.run.init_checkpoint:
            load_backbone(model, config.run.init_checkpoint)
        peft = apply_method(model, config.peft, seed=seed)
        proxies = ProxyState(config.proxy, train_set.num_classes, model, seed=seed)
        optimizer = OptimizerState(config.optim)
        paging = None
        if proxies.class_prompts is not None:
            paging = PagingBuffer(proxies.class_prompts, optimizer, config.run.buffer_capacity)
        return cls(config, train_set, eval_set, model, peft, proxies, optimizer, paging)

    def encoder_prompts(self) -> list[Tensor | None] | None:
        return self.peft.prompts.per_layer() if self.peft.prompts is not None else None

    def parameters(self) -> list[tuple[str, Tensor]]:
        params = list(self.model.params.trainable())
        if self.peft.prompts is not None:
            params.extend(self.peft.prompts.trainable())
        params.extend(self.proxies.parameters())
        return params

    def zero_grad(self) -> None:
        self.model.params.zero_grad()
        for store in self.peft.added_stores:
            store.zero_grad()
        self.proxies.zero_grad()

    def param_count(self) -> ParamCount:
        return count_params(self.model, self.peft.freeze_mask,
                            [*self.peft.added_stores, self.proxies])

    def resident_bytes(self) -> int:
        size = self.model.params.nbytes + self.proxies.nbytes + self.optimizer.nbytes
        return size + sum(store.nbytes for store in self.peft.added_stores)

    def embed(self, images: np.ndarray) -> np.ndarray:
        """Sample-tower embeddings (L2-normalized), computed without a graph."""
        prompts = self.encoder_prompts()
        chunks = []
        for start in range(0, len(images), EVAL_BATCH):
            out = self.model.embed(images[start:start + EVAL_BATCH], prompts)
            chunks.append(T.l2_normalize(out, axis=-1).data)
        return np.concatenate(chunks, axis=0)

    def evaluate(self) -> RetrievalReport:
        config = self.config
        indices = np.arange(len(self.eval_set))
        batch = make_batch(self.eval_set, indices, 0, None, config.data.augment,
                           config.model.image_size)
        return evaluate(self.embed(batch.images), batch.labels)

    def state_dict(self, step: int) -> dict[str, np.ndarray]:
        state = self.model.params.state_dict()
        for store in self.peft.added_stores:
            state.update(store.state_dict())
        state.update(self.proxies.state_dict())
        state.update(self.optimizer.state_dict())
        if self.paging is not None:
            state.update(self.paging.state_dict())
        state["meta.step"] = np.array([step], dtype=np.int64)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> int:
        """Restore a full training state; returns the number of completed steps."""
        try:
            self.model.params.load_state_dict(state)
            for store in self.peft.added_stores:
                store.load_state_dict(state)
            self.proxies.load_state_dict(state)
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"Checkpoint does not match this experiment: {e}") from e
        self.optimizer.load_state_dict(state)
        if self.paging is not None:
            self.paging.adopt_moments()
        return int(state["meta.step"][0]) if "meta.step" in state else 0


def train_step(batch: Batch, experiment: Experiment) -> StepResult:
    """
    Run one optimization step on `batch`.

    Raises:
        TrainingAborted: If the loss or a gradient is not finite
        PagingError: If a batch class is not resident when the proxy tower runs
    """
    config = experiment.config
    model, proxies = experiment.model, experiment.proxies
    labels = [int(c) for c in batch.labels]

    with stopwatch() as total_ms:
        if experiment.paging is not None:
            experiment.paging.page(sorted(set(labels)))
        experiment.zero_grad()

        with stopwatch() as forward_ms, Graph() as graph:
            tokens = model.patchify(batch.images)
            prompts = experiment.encoder_prompts()
            embeddings = T.l2_normalize(
                head(model.encode(tokens, prompts), model.head_params), axis=-1
            )
            fresh: dict[int, Tensor] = {}
            if proxies.enabled:
                samples = proxy_samples(model, tokens, labels, prompts, embeddings, proxies)
                rng = derive_rng(config.run.seed, ACCUMULATE_STREAM, batch.step)
                fresh = accumulate_batch(samples, labels, proxies, rng)
            try:
                loss = training_loss(embeddings, labels, proxies, fresh, config.loss)
            except NonFiniteLossError as e:
                raise TrainingAborted(batch.step, e.value) from e

        with stopwatch() as backward_ms:
            graph.backward(loss)

        params = experiment.parameters()
        frozen = [(n, t) for n, t in experiment.model.params.items()
                  if n in experiment.peft.freeze_mask]
        grad_norms = {
            "backbone": global_grad_norm(
                [(n, t) for n, t in params if not n.startswith(("prompts.", "proxy."))]
            ),
            "prompts": global_grad_norm([(n, t) for n, t in params if n.startswith("prompts.")]),
            "proxy": global_grad_norm([(n, t) for n, t in params if n.startswith("proxy.")]),
            "frozen": global_grad_norm(frozen),
        }
        if not all(np.isfinite(v) for v in grad_norms.values()):
            raise TrainingAborted(batch.step, loss.item(), "non-finite gradient")

        with stopwatch() as update_ms:
            grad_norm = optimizer_step(params, experiment.optimizer)
        proxies.commit(fresh)

    return StepResult(
        step=batch.step,
        loss=loss.item(),
        grad_norm=grad_norm,
        grad_norms=grad_norms,
        timings={
            "forward_ms": forward_ms[0],
            "backward_ms": backward_ms[0],
            "update_ms": update_ms[0],
            "step_ms": total_ms[0],
        },
        page_ins=experiment.paging.stats.page_ins if experiment.paging else 0,
    )


_DONE = object()


class BatchPrefetcher:
    """
    Builds the next batch on a worker thread while the current step runs.

    The hand-off queue holds a single batch; the consumer blocks while it is
    empty. Errors raised by the worker are re-raised in the consumer.
    """

    def __init__(self, produce: Callable[[int], Batch], steps: range) -> None:
        self._produce = produce
        self._steps = steps
        self._queue: queue.Queue[object] = queue.Queue(maxsize=1)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._work, name="batch-prefetch", daemon=True)
        self._thread.start()

    def _put(self, item: object) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _work(self) -> None:
        try:
            for step in self._steps:
                if not self._put(self._produce(step)):
                    return
        except BaseException as e:  # forwarded to the consumer
            self._put(e)
            return
        self._put(_DONE)

    def __iter__(self) -> Iterator[Batch]:
        while True:
            item = self._queue.get()
            if item is _DONE:
                return
            if isinstance(item, BaseException):
                raise item
            assert isinstance(item, Batch)
            yield item

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5.0)


class Trainer:
    """
    Drives an Experiment for `run.steps` steps, evaluating every
    `run.eval_every` steps and once at the end.

    Output directory contents:
        metrics.csv        step,loss,grad_norm,page_ins,step_ms
        metrics_eval.csv   step,R@1,R@2,R@4,MAP@R
        checkpoint.vpck    final parameters, proxies, optimizer state
        config.yaml        the resolved configuration
    """

    def __init__(self, experiment: Experiment, output_dir: str | Path | None = None,
                 console: Console | None = None) -> None:
        self.experiment = experiment
        self.config = experiment.config
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.console = console
        self.logger = logging.getLogger(__name__)

    def _batches(self, start: int, stop: int) -> Iterator[Batch]:
        config = self.config
        train_set = self.experiment.train_set
        sampler = balanced_sampler(train_set.labels, config.data.batch_size,
                                   config.data.per_class, config.run.seed)
        for _ in range(start):
            next(sampler)

        def produce(step: int) -> Batch:
            indices = next(sampler)
            rng = derive_rng(config.run.seed, AUGMENT_STREAM, step)
            return make_batch(train_set, indices, step, rng, config.data.augment,
                              config.model.image_size)

        if not config.run.prefetch:
            for step in range(start, stop):
                yield produce(step)
            return
        prefetcher = BatchPrefetcher(produce, range(start, stop))
        try:
            yield from prefetcher
        finally:
            prefetcher.close()

    def _open_csv(self, name: str, header: list[str], append: bool) -> TextIO | None:
        if self.output_dir is None:
            return None
        path = self.output_dir / name
        exists = append and path.exists()
        handle = open(path, "a" if exists else "w", newline="", encoding="utf-8")
        if not exists:
            csv.writer(handle).writerow(header)
        return handle

    def run(self, start_step: int = 0, show_progress: bool = False) -> TrainingSummary:
        """
        Train from `start_step` to `run.steps`, then save the checkpoint.

        Raises:
            TrainingAborted: On a non-finite loss; the partial CSV is kept
        """
        config = self.config
        steps = config.run.steps
        summary = TrainingSummary(steps=steps)
        if self.output_dir is not None:
            ensure_directory(self.output_dir)
            save_config(config, self.output_dir / "config.yaml")
        train_csv = self._open_csv("metrics.csv", TRAIN_HEADER, append=start_step > 0)
        eval_csv = self._open_csv("metrics_eval.csv", EVAL_HEADER, append=start_step > 0)
        self.logger.info(
            "Training %s for %d steps (%d tunable of %d parameters)",
            config.peft.method, steps - start_step,
            self.experiment.param_count().tunable, self.experiment.param_count().total,
        )

        progress = Progress(
            TextColumn("[bold blue]{task.description}"), BarColumn(),
            TextColumn("{task.completed}/{task.total}"), TextColumn("loss {task.fields[loss]}"),
            TimeElapsedColumn(), console=self.console, disable=not show_progress,
        )
        completed = start_step
        try:
            with progress:
                task = progress.add_task("train", total=steps, completed=start_step, loss="-")
                for batch in self._batches(start_step, steps):
                    result = train_step(batch, self.experiment)
                    completed = batch.step + 1
                    summary.losses.append(result.loss)
                    summary.step_ms.append(result.timings["step_ms"])
                    summary.peak_resident_bytes = max(summary.peak_resident_bytes,
                                                      self.experiment.resident_bytes())
                    if train_csv is not None:
                        step_ms = (f"{result.timings['step_ms']:.3f}"
                                   if config.run.record_step_ms else "")
                        csv.writer(train_csv).writerow([
                            completed, f"{result.loss:.8f}", f"{result.grad_norm:.8f}",
                            result.page_ins, step_ms,
                        ])
                    progress.update(task, completed=completed, loss=f"{result.loss:.4f}")
                    if config.run.eval_every and completed % config.run.eval_every == 0:
                        self._evaluate(completed, summary, eval_csv)
            if not summary.reports or summary.reports[-1][0] != completed:
                self._evaluate(completed, summary, eval_csv)
        finally:
            for handle in (train_csv, eval_csv):
                if handle is not None:
                    handle.close()

        summary.peak_resident_bytes = max(summary.peak_resident_bytes,
                                          self.experiment.resident_bytes())
        if self.output_dir is not None:
            save_checkpoint(self.output_dir / CHECKPOINT_NAME,
                            self.experiment.state_dict(completed))
        return summary

    def _evaluate(self, step: int, summary: TrainingSummary,
                  eval_csv: TextIO | None) -> None:
        report = self.experiment.evaluate()
        summary.reports.append((step, report))
        if eval_csv is not None:
            csv.writer(eval_csv).writerow([step, *report.as_row()])
        self.logger.info(
            "Step %d: %s MAP@R=%.4f", step,
            " ".join(f"R@{k}={v:.4f}" for k, v in report.recall.items()), report.map_at_r,
        )


def load_splits(config: ExperimentConfig) -> ClassSplits:
    dataset = load_dataset(config.data, config.run.seed)
    return split_classes(dataset, config.data.train_classes, config.pretrain.classes)


def resume_step(experiment: Experiment, checkpoint: str | Path) -> int:
    """Load a training checkpoint into `experiment` and return its step."""
    step = experiment.load_state_dict(load_checkpoint(checkpoint))
    logger.info("Resuming from %s at step %d", checkpoint, step)
    return step


def pretrain(config: ExperimentConfig,
             dataset: Dataset | None = None) -> tuple[ViTModel, list[float]]:
    """
    Train the whole backbone as a classifier on the pretraining split.

    That is the classes reserved by `pretrain.classes`, or the train split
    when none are reserved.

    A linear layer maps head outputs to class logits under softmax
    cross-entropy; it is discarded afterwards.

    Returns:
        The trained backbone and its per-step losses
    """
    seed = config.run.seed
    train_set = dataset if dataset is not None else load_splits(config).pretrain
    model = ViTModel(config.model, seed=seed)
    classifier = ParameterStore()
    rng = derive_rng(seed, PRETRAIN_STREAM)
    classifier.add("pretrain.classifier.weight",
                   rng.normal(0.0, config.model.init_std,
                              (config.model.head_out_dim, train_set.num_classes)))
    classifier.add("pretrain.classifier.bias", np.zeros(train_set.num_classes))
    optimizer = OptimizerState(dataclasses.replace(config.optim, lr=config.pretrain.lr))
    batch_size = min(config.pretrain.batch_size, len(train_set))

    losses: list[float] = []
    for step in range(config.pretrain.steps):
        indices = rng.choice(len(train_set), size=batch_size, replace=False)
        batch = make_batch(train_set, indices, step, derive_rng(seed, AUGMENT_STREAM, step),
                           config.data.augment, config.model.image_size)
        model.params.zero_grad()
        classifier.zero_grad()
        with Graph() as graph:
            logits = T.add(T.matmul(model.embed(batch.images),
                                    classifier["pretrain.classifier.weight"]),
                           classifier["pretrain.classifier.bias"])
            loss = cross_entropy(logits, batch.labels)
        if not np.isfinite(loss.item()):
            raise TrainingAborted(step, loss.item())
        graph.backward(loss)
        optimizer_step([*model.params.trainable(), *classifier.trainable()], optimizer)
        losses.append(loss.item())
        if (step + 1) % 100 == 0:
            logger.info("Pretrain step %d: loss %.4f", step + 1, loss.item())
    return model, losses


def save_backbone(model: ViTModel, path: str | Path) -> None:
    state = {name: value for name, value in model.params.state_dict().items()
             if name.startswith(BACKBONE_PREFIXES) and ".adapter." not in name}
    save_checkpoint(path, state)


@dataclass
class CompareRow:
    method: str
    tunable_params: int
    tunable_fraction: float
    peak_resident_bytes: int
    recall_at_1: float
    map_at_r: float
    step_ms: float


def compare(config: ExperimentConfig, methods: Sequence[str],
            output_dir: str | Path | None = None) -> list[CompareRow]:
    """
    Train and evaluate each method on identical data and seed.

    Raises:
        ConfigurationError: On an unknown method name
    """
    method_configs = [(m, config_for_method(config, m)) for m in methods]
    splits = load_splits(config)
    datasets = (splits.train, splits.eval)
    rows: list[CompareRow] = []
    for method, method_config in method_configs:
        method_config.validate()
        experiment = Experiment.build(method_config, datasets)
        count = experiment.param_count()
        run_dir = Path(output_dir) / method if output_dir is not None else None
        summary = Trainer(experiment, run_dir).run()
        report = summary.final_report
        rows.append(CompareRow(
            method=method,
            tunable_params=count.tunable,
            tunable_fraction=count.tunable_fraction,
            peak_resident_bytes=summary.peak_resident_bytes,
            recall_at_1=report.recall.get(1, 0.0),
            map_at_r=report.map_at_r,
            step_ms=summary.median_step_ms,
        ))
        logger.info("%s: R@1 %.4f, %d tunable", method, rows[-1].recall_at_1, count.tunable)
    return rows


@dataclass
class BenchRow:
    method: str
    median_ms: float
    mean_ms: float


def bench(config: ExperimentConfig, methods: Sequence[str], steps: int = 100) -> list[BenchRow]:
    """Per-method forward+backward+update wall time over `steps` steps after one warm-up step."""
    method_configs = [(m, config_for_method(config, m)) for m in methods]
    splits = load_splits(config)
    datasets = (splits.train, splits.eval)
    rows: list[BenchRow] = []
    for method, method_config in method_configs:
        method_config.validate()
        experiment = Experiment.build(method_config, datasets)
        sampler = balanced_sampler(experiment.train_set.labels, method_config.data.batch_size,
                                   method_config.data.per_class, method_config.run.seed)
        timings: list[float] = []
        for step in range(steps + 1):
            batch = make_batch(experiment.train_set, next(sampler), step,
                               derive_rng(method_config.run.seed, AUGMENT_STREAM, step),
                               method_config.data.augment, method_config.model.image_size)
            result = train_step(batch, experiment)
            if step > 0:
                timings.append(result.timings["step_ms"])
        rows.append(BenchRow(method, statistics.median(timings), statistics.fmean(timings)))
    return rows
