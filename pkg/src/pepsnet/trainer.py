"""Epoch loop, evaluation and the per-epoch metrics file."""

from __future__ import annotations

import asyncio
import csv
import json
import logging
import math
import time
from collections.abc import Awaitable, Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from tqdm import tqdm

from ._internal.losses import cross_entropy_loss
from ._internal.optim import OptimizerState, adam_step, sgd_step
from .classifier import PepsClassifier, SampleGradient
from .config import TrainConfig
from .exceptions import PepsArgumentError, PepsCapacityError, PepsTrainingError
from .types import METRICS_HEADER, Dataset, FloatArray, Metrics, OptimizerKind, SplitMetrics

logger = logging.getLogger(__name__)

CALIBRATION_SAMPLES = 8


class MetricsWriter:
    """Comma-separated metrics file with the effective config echoed in a comment line."""

    def __init__(self, path: Path, config: dict[str, Any]) -> None:
        """Create (truncate) the file and write the header.

        Args:
            path: Destination file.
            config: Effective configuration, written as ``# config: {json}``.
        """
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            f.write(f"# config: {json.dumps(config, sort_keys=True)}\n")
            csv.writer(f).writerow(METRICS_HEADER)

    def append(self, metrics: Metrics) -> None:
        with self.path.open("a", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow(metrics.to_row())


@dataclass(frozen=True, slots=True)
class FitResult:
    """Outcome of ``Trainer.fit``.

    Attributes:
        model: Model after the last epoch.
        best_model: Model at the epoch of best validation accuracy.
        best_epoch: That epoch (0 when no epoch ran).
        best_val_acc: Best validation accuracy.
        test_acc_at_best: Test accuracy at ``best_epoch``.
        history: Metrics of every epoch.
    """

    model: PepsClassifier
    best_model: PepsClassifier
    best_epoch: int
    best_val_acc: float
    test_acc_at_best: float
    history: list[Metrics] = field(default_factory=list)

    @property
    def final_train_acc(self) -> float:
        return self.history[-1].train_acc if self.history else math.nan


def _max_abs(grads: dict[str, FloatArray]) -> float:
    peaks = [float(np.max(np.abs(g))) for g in grads.values() if g.size]
    return max(peaks, default=0.0)


class Trainer:
    """Runs mini-batch training and evaluation over a bounded worker pool.

    Per-sample passes are independent; their gradients are summed in sample
    order, so results do not depend on the number of workers.

    Example:
        ```python
        trainer = Trainer(TrainConfig(bond_dim=2, epochs=5), workers=4)
        result = await trainer.fit(model, train, val, test, metrics_path=Path("runs/metrics.csv"))
        ```
    """

    def __init__(self, config: TrainConfig, workers: int = 1, progress: bool = False) -> None:
        """Initialize the trainer.

        Args:
            config: Training hyperparameters.
            workers: Maximum number of samples processed concurrently.
            progress: Show tqdm progress bars.
        """
        if workers < 1:
            raise PepsArgumentError(f"workers must be >= 1, got {workers}")
        self._config = config
        self._workers = workers
        self._progress = progress
        self._debug = config.debug
        self._semaphore: asyncio.Semaphore | None = None

    def _log(self, msg: str) -> None:
        """Log a debug message."""
        if self._debug:
            logger.debug(f"[Trainer] {msg}")

    def _error(self, msg: str) -> None:
        """Log an error message."""
        logger.error(f"[Trainer] {msg}")

    def _get_semaphore(self) -> asyncio.Semaphore:
        if self._semaphore is None:
            self._semaphore = asyncio.Semaphore(self._workers)
        return self._semaphore

    async def _map[T, R](self, fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
        """Apply ``fn`` to every item, results in input order."""
        if self._workers == 1:
            return [fn(item) for item in items]
        semaphore = self._get_semaphore()

        async def run(item: T) -> R:
            async with semaphore:
                return await asyncio.to_thread(fn, item)

        tasks: list[Awaitable[R]] = [run(item) for item in items]
        return list(await asyncio.gather(*tasks))

    # =========================================================================
    # Evaluation
    # =========================================================================

    async def evaluate(self, model: PepsClassifier, dataset: Dataset) -> SplitMetrics:
        """Accuracy and mean loss without recording gradients."""
        if len(dataset) == 0:
            return SplitMetrics(accuracy=math.nan, mean_loss=math.nan, count=0)

        def score(index: int) -> tuple[int, float]:
            try:
                logits = model.logits(dataset.images[index])
            except PepsCapacityError as e:
                raise e.with_sample(index) from e
            return logits.argmax(), cross_entropy_loss(logits, int(dataset.labels[index]))

        scored = await self._map(score, range(len(dataset)))
        predictions = tuple(p for p, _ in scored)
        correct = sum(int(p == label) for p, label in zip(predictions, dataset.labels, strict=True))
        return SplitMetrics(
            accuracy=correct / len(dataset),
            mean_loss=float(np.mean([loss for _, loss in scored])),
            count=len(dataset),
            predictions=predictions,
        )

    async def calibrate_feature_scale(self, model: PepsClassifier, dataset: Dataset) -> PepsClassifier:
        """Choose the feature scale that puts the mean log |logit| of a few samples at zero.

        Logits are homogeneous of degree ``site_count`` in the feature scale,
        so one evaluation fixes the factor.
        """
        count = min(CALIBRATION_SAMPLES, len(dataset))
        if count == 0:
            return model
        magnitudes = await self._map(lambda i: model.log_magnitude(dataset.images[i]), range(count))
        finite = [m for m in magnitudes if math.isfinite(m)]
        if not finite:
            self._error("All calibration logits vanished; keeping the current feature scale")
            return model
        mean = float(np.mean(finite))
        scale = model.feature_scale * math.exp(-mean / model.site_count)
        self._log(f"Feature scale {model.feature_scale:.6g} -> {scale:.6g} (mean log|logit| was {mean:.3f})")
        return model.with_feature_scale(scale)

    # =========================================================================
    # Training
    # =========================================================================

    def _step(
        self, model: PepsClassifier, grads: dict[str, FloatArray], state: OptimizerState
    ) -> tuple[PepsClassifier, OptimizerState]:
        cfg = self._config
        params = model.parameters()
        if cfg.optimizer is OptimizerKind.SGD:
            updated = sgd_step(params, grads, cfg.learning_rate, cfg.weight_decay)
            state = OptimizerState(state.kind, state.step + 1)
        else:
            updated, state = adam_step(
                params,
                grads,
                state,
                cfg.learning_rate,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_epsilon,
                cfg.weight_decay,
            )
        return model.with_parameters(updated).with_positivity_applied(), state

    async def train_epoch(
        self,
        model: PepsClassifier,
        train: Dataset,
        state: OptimizerState,
        epoch: int = 1,
        val: Dataset | None = None,
        test: Dataset | None = None,
    ) -> tuple[PepsClassifier, OptimizerState, Metrics]:
        """One pass over ``train`` in an epoch-seeded order, then full-split metrics.

        Accuracies of splits that are not given are reported as NaN.

        Raises:
            PepsArgumentError: If ``train`` is empty.
            PepsCapacityError: If exact contraction is infeasible (with the sample index).
            PepsTrainingError: If a batch produces a non-finite loss.
        """
        if len(train) == 0:
            raise PepsArgumentError("training set is empty")
        started = time.perf_counter()
        cfg = self._config
        order = np.random.default_rng(cfg.seed + epoch).permutation(len(train))
        batches = [order[k : k + cfg.batch_size] for k in range(0, len(order), cfg.batch_size)]

        batch_losses: list[float] = []
        bar = tqdm(batches, desc=f"epoch {epoch}", unit="batch", disable=not self._progress, leave=False)
        for batch_number, batch in enumerate(bar, start=1):
            current = model

            def sample(index: int, current: PepsClassifier = current) -> SampleGradient:
                try:
                    return current.loss_and_grads(train.images[index], int(train.labels[index]))
                except PepsCapacityError as e:
                    raise e.with_sample(int(index)) from e

            results = await self._map(sample, [int(i) for i in batch])

            grads: dict[str, FloatArray] = {}
            for result in results:
                for name, g in result.grads.items():
                    grads[name] = grads[name] + g if name in grads else g.copy()
            for name in grads:
                grads[name] /= len(results)

            loss = float(np.mean([r.loss for r in results]))
            if not math.isfinite(loss):
                max_grad = _max_abs(grads)
                self._error(f"Non-finite loss in epoch {epoch}, batch {batch_number}")
                raise PepsTrainingError(
                    "Non-finite loss",
                    epoch=epoch,
                    batch=batch_number,
                    max_grad=max_grad,
                    details={"Samples": ", ".join(str(int(i)) for i in batch[:8])},
                )
            batch_losses.append(loss)
            model, state = self._step(model, grads, state)
            bar.set_postfix(loss=f"{loss:.4f}")
            self._log(
                f"epoch {epoch} batch {batch_number}: loss={loss:.6f} "
                f"max discarded={max(r.discarded_weight for r in results):.3e}"
            )
        bar.close()

        train_acc = (await self.evaluate(model, train)).accuracy
        val_acc = (await self.evaluate(model, val)).accuracy if val is not None else math.nan
        test_acc = (await self.evaluate(model, test)).accuracy if test is not None else math.nan
        metrics = Metrics(
            epoch=epoch,
            train_loss=float(np.mean(batch_losses)),
            train_acc=train_acc,
            val_acc=val_acc,
            test_acc=test_acc,
            seconds=time.perf_counter() - started,
        )
        logger.info(
            f"Epoch {epoch}: loss={metrics.train_loss:.4f} train={train_acc:.4f} val={val_acc:.4f} test={test_acc:.4f}"
        )
        return model, state, metrics

    async def fit(
        self,
        model: PepsClassifier,
        train: Dataset,
        val: Dataset,
        test: Dataset,
        metrics_path: Path | None = None,
        checkpoint_path: Path | None = None,
        run_config: dict[str, Any] | None = None,
    ) -> FitResult:
        """Train for ``config.epochs`` epochs, keeping the best-validation model.

        The initial model is checkpointed before the first epoch and the
        checkpoint is overwritten at every new best validation accuracy.
        """
        cfg = self._config
        if cfg.feature_scale is None:
            model = await self.calibrate_feature_scale(model, train)

        writer = None
        if metrics_path is not None:
            writer = MetricsWriter(metrics_path, {**cfg.to_dict(), **(run_config or {})})
        if checkpoint_path is not None:
            model.save(checkpoint_path)

        state = OptimizerState(cfg.optimizer)
        best_model, best_epoch, best_val, best_test = model, 0, -math.inf, math.nan
        history: list[Metrics] = []
        for epoch in range(1, cfg.epochs + 1):
            model, state, metrics = await self.train_epoch(model, train, state, epoch, val, test)
            history.append(metrics)
            if writer is not None:
                writer.append(metrics)
            if metrics.val_acc > best_val:
                best_model, best_epoch, best_val, best_test = model, epoch, metrics.val_acc, metrics.test_acc
                if checkpoint_path is not None:
                    model.save(checkpoint_path)
                self._log(f"New best validation accuracy {best_val:.4f} at epoch {epoch}")

        return FitResult(
            model=model,
            best_model=best_model,
            best_epoch=best_epoch,
            best_val_acc=best_val if best_epoch else math.nan,
            test_acc_at_best=best_test,
            history=history,
        )
