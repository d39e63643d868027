"""Adapter-only training loop: Adam on the LoRA factors, base frozen.

Everything is seeded and single-threaded, so two runs with the same seeds
produce bit-identical adapters, losses, and logs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DivergenceError
from .model import ToyModel, clm_loss_and_grad

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainingState:
    learning_rate: float
    seed: int
    step: int = 0
    moments: dict[str, list[np.ndarray]] = field(default_factory=dict)
    loss_history: list[float] = field(default_factory=list)

    @classmethod
    def for_model(cls, model: ToyModel, learning_rate: float, seed: int):
        state = cls(learning_rate=learning_rate, seed=seed)
        for name, layer in model.adapters.items():
            state.moments[f"{name}.A"] = [np.zeros_like(layer.A), np.zeros_like(layer.A)]
            state.moments[f"{name}.B"] = [np.zeros_like(layer.B), np.zeros_like(layer.B)]
        return state


def train_step(
    model: ToyModel,
    batch: tuple[np.ndarray, np.ndarray, np.ndarray],
    state: TrainingState,
    dropout_rng: np.random.Generator | None = None,
) -> float:
    """One forward/backward/Adam update over (ids, targets, mask).

    With no adapters attached this is a pure loss evaluation: nothing is
    trainable, so no parameter changes.
    """
    ids, targets, mask = batch
    logits, cache = model.forward(
        ids, training=True, rng=dropout_rng, want_cache=True
    )
    loss, dlogits = clm_loss_and_grad(logits, targets, mask)
    state.step += 1
    if not np.isfinite(loss):
        raise DivergenceError(state.step, state.learning_rate)
    state.loss_history.append(loss)
    if not model.adapters:
        return loss
    grads = model.backward(cache, dlogits)
    t = state.step
    for name, g in grads.items():
        m1, m2 = state.moments[name]
        m1 *= ADAM_BETA1
        m1 += (1.0 - ADAM_BETA1) * g
        m2 *= ADAM_BETA2
        m2 += (1.0 - ADAM_BETA2) * g * g
        mhat = m1 / (1.0 - ADAM_BETA1**t)
        vhat = m2 / (1.0 - ADAM_BETA2**t)
        adapter_name, pname = name.rsplit(".", 1)
        param = getattr(model.adapters[adapter_name], pname)
        param -= state.learning_rate * mhat / (np.sqrt(vhat) + ADAM_EPS)
    return loss


def train(
    model: ToyModel,
    ids: np.ndarray,
    targets: np.ndarray,
    mask: np.ndarray,
    epochs: int,
    batch_size: int,
    state: TrainingState,
    log_path: str | Path | None = None,
) -> list[float]:
    """Seeded epochs of shuffled minibatches; optional CSV step log."""
    if epochs < 1 or batch_size < 1:
        raise ContractError("epochs and batch_size must be positive")
    n = ids.shape[0]
    shuffle_rng = np.random.default_rng(state.seed)
    dropout_rng = np.random.default_rng(state.seed + 1)
    rows = []
    for _ in range(epochs):
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, batch_size):
            sel = perm[start : start + batch_size]
            loss = train_step(
                model, (ids[sel], targets[sel], mask[sel]), state, dropout_rng
            )
            rows.append((state.step, loss, state.learning_rate))
    if log_path is not None:
        with Path(log_path).open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "loss", "lr"])
            for step, loss, lr in rows:
                writer.writerow([step, repr(loss), repr(lr)])
    return [r[1] for r in rows]
