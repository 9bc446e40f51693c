"""Cross-entropy objective, Adam optimization, the training loop, and inference.

Training is deterministic given the config seed: splitting, initialization,
neighbor sampling, dropout, and batch shuffling each draw from their own
named substream of the root seed.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .data import Batch, Dataset, batch_iterator
from .errors import ContractError, NumericError
from .graph import RelationGraph, build_graph, sample_neighbors
from .model import ForwardResult, GiktParams, forward_batch, save_checkpoint
from .rng import substream
from .tensor import Tape, Tensor, log as t_log, mul, reduce_sum, sub

logger = logging.getLogger(__name__)

METRICS_HEADER = "epoch\ttrain_loss\ttest_auc\twall_seconds"


def loss(predictions: Tensor, labels: np.ndarray, mask: np.ndarray | None = None,
         reduction: str = "mean") -> Tensor:
    """Binary cross entropy over the masked positions.

    ``mean`` divides by the number of counted positions so the learning rate
    transfers across batch sizes; ``sum`` keeps the plain summed form.
    """
    if predictions.ndim != 1:
        raise ContractError(f"predictions must be 1-D, got shape {predictions.shape}")
    p = predictions.data
    if p.size == 0:
        raise ContractError("loss needs at least one prediction")
    if p.min() <= 0.0 or p.max() >= 1.0:
        raise NumericError("prediction outside the open interval (0, 1)")
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != p.shape:
        raise ContractError(f"labels shape {labels.shape} does not match predictions {p.shape}")
    if mask is None:
        mask = np.ones_like(labels)
    mask = np.asarray(mask, dtype=np.float64)
    counted = mask.sum()
    if counted == 0:
        raise ContractError("every position is masked out of the loss")

    log_p = t_log(predictions)
    log_q = t_log(sub(Tensor(1.0), predictions))
    per_step = mul(Tensor(labels * mask), log_p) + mul(Tensor((1.0 - labels) * mask), log_q)
    total = mul(reduce_sum(per_step), Tensor(-1.0))
    if reduction == "mean":
        return mul(total, Tensor(1.0 / counted))
    return total


class Adam:
    """Bias-corrected Adam over named parameters."""

    def __init__(self, params: list[tuple[str, Tensor]], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {name: np.zeros_like(t.data) for name, t in params}
        self._v = {name: np.zeros_like(t.data) for name, t in params}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for name, p in self.params:
            g = p.grad
            if g is None:
                raise ContractError(f"missing gradient for parameter {name}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name}")
            m = self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def clip_gradients(params: list[tuple[str, Tensor]], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    test_auc: float
    wall_seconds: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.12g}\t{self.test_auc:.12g}\t{self.wall_seconds:.3f}"


@dataclass
class TrainResult:
    params: GiktParams
    rows: list[EpochRow] = field(default_factory=list)
    best_auc: float = 0.0
    best_epoch: int = 0

    def metrics_text(self) -> str:
        return "\n".join([METRICS_HEADER] + [r.line() for r in self.rows]) + "\n"


def predict(params: GiktParams, dataset: Dataset, graph: RelationGraph,
            inference_runs: int | None = None, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode predictions pooled over the dataset.

    Each run resamples graph neighbors; the final probability per step is
    the mean over runs, and with one run or a full-degree graph the output
    is a single deterministic pass.
    """
    cfg = params.config
    runs = cfg.inference_runs if inference_runs is None else inference_runs
    if runs < 1:
        raise ContractError(f"inference_runs must be >= 1, got {runs}")
    accumulated: np.ndarray | None = None
    labels: np.ndarray | None = None
    for run in range(runs):
        run_rng = substream(seed, f"inference-{run}")
        tables = None
        if cfg.gcn_layers > 0:
            tables = sample_neighbors(graph, cfg.n_q, cfg.n_s, run_rng)
        scores = []
        collected = []
        for batch in batch_iterator(dataset, cfg.batch_size, cfg.max_len, shuffle=False):
            result = forward_batch(
                params, batch.questions, batch.answers, batch.lengths, graph,
                training=False, tables=tables, sample_rng=run_rng,
            )
            scores.append(result.predictions.data)
            collected.append(result.labels)
        run_scores = np.concatenate(scores) if scores else np.zeros(0)
        accumulated = run_scores if accumulated is None else accumulated + run_scores
        if labels is None:
            labels = np.concatenate(collected) if collected else np.zeros(0)
    assert accumulated is not None and labels is not None
    return accumulated / runs, labels


def _auc_for_eval(scores: np.ndarray, labels: np.ndarray) -> float:
    from .evaluation import auc

    return auc(scores, labels)


def train_loop(train_set: Dataset, test_set: Dataset, config: TrainConfig,
               graph: RelationGraph | None = None,
               progress: bool = False) -> TrainResult:
    """Train on the train split, track test AUC per epoch, keep the best state.

    Stops early after ``config.patience`` epochs without a new best test AUC.
    Deterministic for a fixed config: identical runs produce identical loss
    curves and identical best parameters.
    """
    cfg = config.validate()
    if not train_set.sequences:
        raise ContractError("training split is empty")
    if graph is None:
        graph = build_graph(train_set)

    params = GiktParams(train_set.question_count, train_set.skill_count, cfg,
                        substream(cfg.seed, "init"))
    optimizer = Adam(params.trainable(), lr=cfg.learning_rate)
    shuffle_rng = substream(cfg.seed, "batches")
    sample_rng = substream(cfg.seed, "neighbors")
    dropout_rng = substream(cfg.seed, "dropout")

    result = TrainResult(params=params)
    best_state: dict[str, np.ndarray] | None = None
    since_best = 0
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        loss_sum = 0.0
        loss_count = 0
        for batch_no, batch in enumerate(
            batch_iterator(train_set, cfg.batch_size, cfg.max_len, rng=shuffle_rng)
        ):
            tables = None
            if cfg.gcn_layers > 0:
                tables = sample_neighbors(graph, cfg.n_q, cfg.n_s, sample_rng)
            with Tape() as tape:
                forward = forward_batch(
                    params, batch.questions, batch.answers, batch.lengths, graph,
                    training=True, tables=tables,
                    dropout_rng=dropout_rng, sample_rng=sample_rng,
                )
                if forward.predictions.size == 0:
                    continue
                batch_loss = loss(forward.predictions, forward.labels,
                                  reduction=cfg.loss_reduction)
                value = batch_loss.item()
                if not np.isfinite(value):
                    raise NumericError(
                        f"training loss diverged at epoch {epoch}, batch {batch_no}"
                    )
                tape.backward(batch_loss)
            if cfg.grad_clip > 0.0:
                clip_gradients(optimizer.params, cfg.grad_clip)
            optimizer.step()
            optimizer.zero_grad()
            n = forward.predictions.size
            loss_sum += value * (n if cfg.loss_reduction == "mean" else 1.0)
            loss_count += n if cfg.loss_reduction == "mean" else 1

        train_loss = loss_sum / max(loss_count, 1)
        scores, labels = predict(params, test_set, graph, seed=cfg.seed + epoch)
        test_auc = _auc_for_eval(scores, labels)
        wall = time.perf_counter() - started
        result.rows.append(EpochRow(epoch, train_loss, test_auc, wall))
        if progress:
            logger.info("epoch %d: train_loss=%.5f test_auc=%.5f (%.1fs)",
                        epoch, train_loss, test_auc, wall)

        if test_auc > result.best_auc:
            result.best_auc = test_auc
            result.best_epoch = epoch
            best_state = {name: t.data.copy() for name, t in params.named_tensors()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    if best_state is not None:
        for name, t in params.named_tensors():
            t.data = best_state[name]
    return result


def train(dataset: Dataset, config: TrainConfig,
          metrics_path: str | None = None,
          checkpoint_path: str | None = None,
          progress: bool = False) -> TrainResult:
    """Split the dataset, run the training loop, persist metrics and the
    best checkpoint."""
    from .data import split_train_test

    train_set, test_set = split_train_test(dataset, config.split_ratio, config.seed)
    result = train_loop(train_set, test_set, config, progress=progress)
    if metrics_path:
        with open(metrics_path, "w", encoding="utf8") as fh:
            fh.write(result.metrics_text())
    if checkpoint_path:
        save_checkpoint(checkpoint_path, result.params)
    return result
