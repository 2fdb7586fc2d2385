"""Losses, the Adam optimizer and the deterministic training loop."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, DataError, DimensionError, NumericError
from .models import Generator, save_checkpoint
from .tensor import Tensor

ADAM_LR = 2e-4
ADAM_BETA1 = 0.5
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def sparse_categorical_crossentropy(logits, labels) -> Tensor:
    """Mean over pixels of -log softmax(logits)[label], via log-sum-exp.

    ``logits`` is [N, H, W, K] (or generally [..., K]); ``labels`` is an
    integer array of the leading shape with values in [0, K).
    """
    logits = T.as_tensor(logits)
    labels = np.asarray(labels)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(
            f"labels shape {labels.shape} does not match logits {logits.shape}"
        )
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(
            f"label {int(labels[where])} out of range [0, {k}) at pixel {where}"
        )
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    lse = T.logsumexp(logits, axis=-1)
    picked = T.sum_(T.mul(logits, Tensor(onehot)), axis=-1)
    return T.mean(T.sub(lse, picked))


def mae_loss(pred, target) -> Tensor:
    """Mean absolute error; subgradient 0 at exact ties."""
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mae_loss: shapes differ: {pred.shape} vs {target.shape}")
    return T.mean(T.absolute(T.sub(pred, target)))


class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    def __init__(self, lr: float = ADAM_LR, beta1: float = ADAM_BETA1,
                 beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def as_dict(self) -> dict:
        return {"t": self.t, "moments": self.moments}


def adam_step(named_params: list[tuple[str, Tensor]], state: AdamState) -> None:
    """One Adam update over all parameters; grads must be populated."""
    for name, p in named_params:
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {name!r} has no gradient")
    state.t += 1
    t = state.t
    correct1 = 1.0 - state.beta1 ** t
    correct2 = 1.0 - state.beta2 ** t
    for name, p in named_params:
        if name not in state.moments:
            state.moments[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
        m, v = state.moments[name]
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        # p -= lr * m_hat / (sqrt(v_hat) + eps), reusing two scratch arrays
        m_hat = m / correct1
        v_hat = v / correct2
        np.sqrt(v_hat, out=v_hat)
        v_hat += state.eps
        np.divide(m_hat, v_hat, out=m_hat)
        m_hat *= state.lr
        p.data -= m_hat


@dataclass
class TrainRecord:
    step: int
    loss: float
    ms: float
    lr: float

    def line(self) -> str:
        return f"{self.step}\t{self.loss:.10g}\t{self.ms:.3f}\t{self.lr:g}"


def _batch_arrays(samples, task: str):
    inputs = np.stack([s.input for s in samples])
    if task == "segmentation":
        targets = np.stack([s.target for s in samples]).astype(np.int64)
    else:
        targets = np.stack([s.target for s in samples])
    return inputs, targets


def compute_loss(gen: Generator, inputs, targets, loss_kind: str, mode: str) -> Tensor:
    out = gen.forward(inputs, mode)
    if loss_kind == "scc":
        return sparse_categorical_crossentropy(out, targets)
    if loss_kind == "mae":
        return mae_loss(out, targets)
    raise ContractError(f"unknown loss kind {loss_kind!r}; expected 'scc' or 'mae'")


def loss_kind_for_task(task: str) -> str:
    return "scc" if task == "segmentation" else "mae"


def train(gen: Generator, dataset, epochs: int, batch_size: int, loss_kind: str,
          seed: int, checkpoint_path=None, checkpoint_every: Optional[int] = None,
          max_steps: Optional[int] = None, stop_loss: Optional[float] = None,
          record_hook: Optional[Callable[[TrainRecord], None]] = None,
          epoch_hook: Optional[Callable[[int], None]] = None,
          state: Optional[AdamState] = None) -> tuple[Generator, list[TrainRecord]]:
    """Train ``gen`` in place; fully deterministic given (seed, config, data).

    Shuffling, batching and initialization all derive from explicit seeds.
    Training aborts with NumericError (naming the batch) if the loss goes
    non-finite.  A checkpoint is written at the end when ``checkpoint_path``
    is given, and every ``checkpoint_every`` epochs when that is set.
    ``max_steps`` caps the number of optimizer steps; ``stop_loss`` stops
    once the batch loss falls below it.
    """
    if not dataset:
        raise DataError("train: dataset is empty")
    task = gen.config.task
    if (task == "segmentation") != (loss_kind == "scc"):
        raise ContractError(f"loss kind {loss_kind!r} does not fit task {task!r}")
    rng = np.random.default_rng(seed)
    state = state if state is not None else AdamState()
    named = list(gen.named_parameters())
    records: list[TrainRecord] = []
    step = 0
    done = False
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(dataset), batch_size):
            batch_idx = order[start:start + batch_size]
            inputs, targets = _batch_arrays([dataset[i] for i in batch_idx], task)
            t0 = time.perf_counter()
            loss = compute_loss(gen, inputs, targets, loss_kind, "train")
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise NumericError(
                    f"non-finite loss at step {step + 1} (epoch {epoch}, batch starting at "
                    f"sample index {start}, dataset indices {batch_idx.tolist()})"
                )
            T.backward(loss)
            adam_step(named, state)
            gen.zero_grad()
            step += 1
            rec = TrainRecord(step, loss_val, (time.perf_counter() - t0) * 1e3, state.lr)
            records.append(rec)
            if record_hook is not None:
                record_hook(rec)
            if (max_steps is not None and step >= max_steps) or \
               (stop_loss is not None and loss_val < stop_loss):
                done = True
                break
        if checkpoint_path is not None and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(gen, checkpoint_path, state.as_dict())
        if epoch_hook is not None:
            epoch_hook(epoch)
        if done:
            break
    if checkpoint_path is not None:
        save_checkpoint(gen, checkpoint_path, state.as_dict())
    return gen, records


def refresh_batch_norm_stats(gen: Generator, dataset, batch_size: int,
                             passes: int, seed: int) -> None:
    """Recalibrate batch-norm running statistics at the current weights.

    Runs forward-only train-mode passes so the EMA buffers reflect the
    finished model instead of its training trajectory.  No parameter is
    touched; with momentum 0.99 a few hundred passes converge the buffers.
    """
    rng = np.random.default_rng(seed)
    task = gen.config.task
    done = 0
    with T.no_grad():
        while done < passes:
            order = rng.permutation(len(dataset))
            for start in range(0, len(dataset), batch_size):
                inputs, _ = _batch_arrays([dataset[i] for i in order[start:start + batch_size]], task)
                gen.forward(inputs, "train")
                done += 1
                if done >= passes:
                    return


def write_train_log(records: list[TrainRecord], path) -> None:
    with open(path, "w") as f:
        f.write("# step\tloss\tms\tlr\n")
        for rec in records:
            f.write(rec.line() + "\n")
