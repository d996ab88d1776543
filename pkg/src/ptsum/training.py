"""Parameter init, Adagrad with global-norm clipping, and the train loop.

Embeddings start near zero (normal, variance 1e-8); every other tensor is
uniform in [-0.02, 0.02]. Optimization is plain Adagrad (learning rate 0.15,
accumulator init 0.1) with gradients rescaled when their global L2 norm
exceeds 2. No regularization of any kind. Early stopping watches the
validation mean NLL.

The optimized batch loss is the *sum* of per-example mean NLLs; logged
losses are per-example means. ``warm_parameters`` offers a larger-scale
initializer for tiny-corpus runs where the near-zero init cannot leave its
cold-start plateau within a small step budget.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nm
from .corpus import IndexedExample, make_batches
from .model import ModelConfig, ModelParams, build_model_batch, forward_teacher
from .numerics import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 128
    lr: float = 0.15
    accumulator_init: float = 0.1
    clip_norm: float = 2.0
    seed: int = 0
    patience: int = 3
    max_epochs: int = 30

    def __post_init__(self):
        numeric = (
            self.batch_size,
            self.lr,
            self.accumulator_init,
            self.clip_norm,
            self.patience,
            self.max_epochs,
        )
        if any(v <= 0 for v in numeric):
            raise ValueError(f"train config values must be positive: {self}")


def init_parameters(
    config: ModelConfig,
    vocab_size: int,
    seed: int,
    dtype=np.float32,
) -> ModelParams:
    """Fresh parameters, deterministic per seed."""
    rng = np.random.default_rng(seed)

    def init_fn(kind: str, shape: tuple[int, ...]) -> np.ndarray:
        if kind == "embedding":
            return rng.normal(0.0, 1e-4, size=shape)  # variance 1e-8
        return rng.uniform(-0.02, 0.02, size=shape)

    return ModelParams(config, vocab_size, init_fn, dtype=dtype)


def warm_parameters(
    config: ModelConfig,
    vocab_size: int,
    seed: int,
    dtype=np.float32,
) -> ModelParams:
    """Larger-scale init (uniform +/-0.25, embedding sigma 0.1) for runs
    with very few optimizer steps, e.g. memorization checks on a handful
    of examples."""
    rng = np.random.default_rng(seed)

    def init_fn(kind: str, shape: tuple[int, ...]) -> np.ndarray:
        if kind == "embedding":
            return rng.normal(0.0, 0.1, size=shape)
        return rng.uniform(-0.25, 0.25, size=shape)

    return ModelParams(config, vocab_size, init_fn, dtype=dtype)


def clip_gradients(grads: list[np.ndarray], threshold: float = 2.0) -> list[np.ndarray]:
    """Rescale (in place) so the global L2 norm is at most ``threshold``.

    Non-finite gradients are a training bug and raise instead of being
    silently clipped away.
    """
    for g in grads:
        if not np.isfinite(g).all():
            raise ValueError("non-finite gradient encountered")
    norm = nm.l2_norm(grads)
    if norm > threshold:
        scale = threshold / norm
        for g in grads:
            g *= scale
    return grads


class Adagrad:
    """Per-entry accumulated squared gradients; update lr * g / sqrt(acc)."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.15, accumulator_init: float = 0.1):
        self.params = list(params)
        self.lr = lr
        self.acc = [
            np.full(p.data.shape, accumulator_init, dtype=np.float64) for p in self.params
        ]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        for p, g, acc in zip(self.params, grads, self.acc):
            acc += np.asarray(g, dtype=np.float64) ** 2
            update = self.lr * g / np.sqrt(acc)
            p.data = (p.data - update).astype(p.data.dtype)


def adagrad_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], opt: Adagrad) -> None:
    """Functional wrapper over ``Adagrad.step`` for a prebuilt state."""
    assert list(params) == opt.params
    opt.step(grads)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    valid_loss: float
    seconds: float


@dataclass
class TrainResult:
    params: ModelParams
    best_epoch: int
    best_valid_loss: float
    history: list[EpochStats] = field(default_factory=list)


def _dataset_nll(
    params: ModelParams,
    examples: Sequence[IndexedExample],
    config: ModelConfig,
    batch_size: int,
) -> float:
    """Mean per-example NLL over a dataset, without building gradients."""
    total = 0.0
    with nm.no_grad():
        for batch in make_batches(list(examples), size=batch_size):
            result = forward_teacher(params, build_model_batch(batch, config), config)
            total += float(result.per_example_nll.sum())
    return total / max(len(examples), 1)


def train(
    train_examples: Sequence[IndexedExample],
    valid_examples: Sequence[IndexedExample],
    model_config: ModelConfig,
    train_config: TrainConfig,
    vocab_size: int,
    log_path: str | Path | None = None,
    params: ModelParams | None = None,
    epoch_callback: Callable[[EpochStats], None] | None = None,
) -> TrainResult:
    """Teacher-forced training with per-epoch shuffling and early stopping.

    Keeps the parameters from the best validation epoch; stops after
    ``patience`` epochs without improvement.
    """
    if params is None:
        params = init_parameters(model_config, vocab_size, seed=train_config.seed)
    opt = Adagrad(params.tensors(), lr=train_config.lr, accumulator_init=train_config.accumulator_init)

    train_examples = list(train_examples)
    valid_examples = list(valid_examples)
    best = TrainResult(params=params.clone(), best_epoch=-1, best_valid_loss=float("inf"))
    since_best = 0
    rows: list[EpochStats] = []

    for epoch in range(train_config.max_epochs):
        started = time.perf_counter()
        order = np.random.default_rng(train_config.seed + epoch).permutation(len(train_examples))
        shuffled = [train_examples[i] for i in order]
        nll_sum = 0.0
        for batch in make_batches(shuffled, size=train_config.batch_size):
            tensors = params.tensors()
            nm.zero_grads(tensors)
            result = forward_teacher(params, build_model_batch(batch, model_config), model_config)
            nm.backward(result.loss)
            grads = [
                t.grad if t.grad is not None else np.zeros(t.data.shape, dtype=np.float64)
                for t in tensors
            ]
            clip_gradients(grads, threshold=train_config.clip_norm)
            opt.step(grads)
            nll_sum += float(result.per_example_nll.sum())
        train_loss = nll_sum / len(train_examples)

        valid_loss = _dataset_nll(params, valid_examples, model_config, train_config.batch_size)
        if not np.isfinite(valid_loss):
            raise RuntimeError(f"validation loss is not finite at epoch {epoch}: {valid_loss}")
        stats = EpochStats(
            epoch=epoch,
            train_loss=train_loss,
            valid_loss=valid_loss,
            seconds=time.perf_counter() - started,
        )
        rows.append(stats)
        if epoch_callback is not None:
            epoch_callback(stats)

        if valid_loss < best.best_valid_loss:
            best = TrainResult(params=params.clone(), best_epoch=epoch, best_valid_loss=valid_loss)
            since_best = 0
        else:
            since_best += 1
            if since_best >= train_config.patience:
                log.info("early stop at epoch %d (no improvement for %d epochs)", epoch, since_best)
                break

    best.history = rows
    if log_path is not None:
        write_training_log(log_path, rows)
    return best


def write_training_log(path: str | Path, rows: Sequence[EpochStats]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,valid_loss,seconds\n")
        for r in rows:
            fh.write(f"{r.epoch},{r.train_loss:.6f},{r.valid_loss:.6f},{r.seconds:.3f}\n")
